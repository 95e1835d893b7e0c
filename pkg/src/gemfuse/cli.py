"""``gemfuse`` command line: generate, preprocess, train, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataeval as de
from . import detmini, preproc, report
from .config import RunConfig, load_config
from .errors import ConfigError, EstimationFailed, GemError, InvalidInput, TrainingDiverged
from .imageio import load_png, save_png
from .model import Detector, ModelConfig, TrainCorruption, load_model, model_manifest, train

log = logging.getLogger("gemfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# documented only; see the paper-config preset
PAPER_HYPERPARAMETERS = {"lr": 8e-6, "batch_size": 2, "epochs": [100, 300]}


class DataError(GemError):
    pass


def split_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, {"train": 0, "test": 1}[split]]).generate_state(1)[0])


def _non_empty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


def run_config_echo(cfg: RunConfig) -> dict:
    """The parts of a config that determine results; paths are left out."""
    d = cfg.to_dict()
    for key in ("output_dir", "checkpoint", "preprocess"):
        d.pop(key)
    d["data"].pop("root")
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, force: bool = False) -> Path:
    root = Path(cfg.data.root)
    if _non_empty(root) and not force:
        raise DataError(f"output directory {root} is not empty; pass --force to overwrite")
    for split in ("train", "test"):
        if (root / split).exists():
            shutil.rmtree(root / split)
    scene = cfg.data.scene
    for split, count in (("train", cfg.data.n_train), ("test", cfg.data.n_test)):
        samples = de.generate_dataset(scene, count, split_seed(cfg.seed, split))
        de.write_dataset(samples, root / split, scene.class_names)
        log.info("wrote %d %s samples to %s", count, split, root / split)
    meta = {"seed": cfg.seed, "scene": asdict(scene), "n_train": cfg.data.n_train, "n_test": cfg.data.n_test}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def _load_split(cfg: RunConfig, split: str):
    path = Path(cfg.data.root) / split
    if not (path / "annotations.json").exists():
        raise DataError(f"no dataset at {path}; run 'gemfuse generate' first")
    samples, names = de.load_dataset(path)
    return samples, names


def _model_config(cfg: RunConfig, n_classes: int) -> ModelConfig:
    return ModelConfig(
        mode=cfg.mode, n_classes=n_classes, k=cfg.k, tau=cfg.tau, lambda_box=cfg.lambda_box, no_object_weight=cfg.no_object_weight
    )


def cmd_train(cfg: RunConfig) -> Path:
    samples, names = _load_split(cfg, "train")
    if not samples:
        raise DataError("training split is empty")
    model = Detector.init(_model_config(cfg, len(names)), cfg.seed)
    t = cfg.train
    aug = None
    if t.corruption:
        aug = TrainCorruption(t.corruption_target, dict(t.corruption), de.CorruptionSpec("rsh", t.corruption_target, cfg.rsh))
    rows = []

    def record(epoch, step, value):
        rows.append(f"{step},{epoch},{value!r}")
        if step % 25 == 0:
            log.info("epoch %d step %d loss %.4f", epoch, step, value)

    result = train(model, samples, t.epochs, t.batch_size, t.lr, cfg.seed, t.optimizer, aug, t.max_steps, record)
    out = cfg.checkpoint_dir()
    extra = {"seed": cfg.seed, "class_names": names, "steps": result.steps, "run": run_config_echo(cfg)}
    extra["paper_hyperparameters"] = PAPER_HYPERPARAMETERS
    detmini.save_checkpoint(out, model.params, model_manifest(model, extra))
    (out / "loss.csv").write_text("step,epoch,loss\n" + "".join(r + "\n" for r in rows))
    if result.losses:
        log.info("loss %.4f -> %.4f over %d steps", result.losses[0], result.losses[-1], result.steps)
    return out


def cmd_eval(cfg: RunConfig, out_dir=None, jobs: int = 1) -> Path:
    try:
        model, manifest = load_model(cfg.checkpoint_dir())
    except FileNotFoundError as exc:
        raise DataError(f"cannot load checkpoint {cfg.checkpoint_dir()}: {exc}") from exc
    samples, names = _load_split(cfg, cfg.eval.split)
    e = cfg.eval
    spec = de.CorruptionSpec(e.corruption, e.target, cfg.rsh)
    rep = de.evaluate(model, samples, spec, trials=e.trials, seed=cfg.seed, class_names=names, jobs=jobs)
    rep.config = {"run": run_config_echo(cfg), "checkpoint_mode": manifest["model"]["mode"], "split": e.split}
    label = e.corruption if e.corruption == "none" else f"{e.corruption}-{e.target}"
    out = Path(out_dir) if out_dir else cfg.checkpoint_dir().parent / f"eval-{e.split}-{label}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json())

    shown = de.corrupt_for_trial(samples[: e.report_images], spec, cfg.seed, 0)
    if shown:
        dets, contrib = de.detect_all(model, shown, cfg.seed, 0)
        for i, (s, d, c) in enumerate(zip(shown, dets, contrib)):
            save_png(report.render(s.image_a, s.image_b, d, c, e.score_threshold), out / f"report_{i:04d}.png")
    log.info("mAP %.4f over %d trials -> %s", rep.map, rep.trials, out / "report.json")
    return out


def _find_images(root: Path, modality: str) -> Path:
    for cand in (root / "images" / modality, root / modality):
        if cand.is_dir():
            return cand
    raise DataError(f"no images/{modality} directory under {root}")


def cmd_preprocess(cfg: RunConfig, out_dir=None) -> Path:
    p = cfg.preprocess
    root = Path(p.input_dir)
    dir_a, dir_b = _find_images(root, "a"), _find_images(root, "b")
    names = sorted(f.name for f in dir_a.glob("*.png"))
    if not names:
        raise DataError(f"no PNG files in {dir_a}")
    if p.correspondences:
        try:
            pts = np.asarray(json.loads(Path(p.correspondences).read_text()), dtype=np.float64)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read correspondences {p.correspondences}: {exc}") from exc
        h = preproc.estimate_homography(pts)
        h_doc = {"estimated": True, **h.to_json_dict()}
        matrix = h.matrix
    else:
        matrix = np.eye(3)
        h_doc = {"estimated": False, "H": [float(v) for v in matrix.reshape(-1)], "n_points": 0}
    out = Path(out_dir) if out_dir else Path(cfg.output_dir) / "preprocess"
    for idx, name in enumerate(names):
        a = load_png(dir_a / name)
        if not (dir_b / name).exists():
            raise DataError(f"{name} has no counterpart in {dir_b}")
        b = load_png(dir_b / name)[:1]
        if a.shape[0] != 3:
            raise DataError(f"{dir_a / name} is not a 3-channel image")
        aligned = a if not p.correspondences else preproc.warp_image(a, matrix, b.shape[1:])
        save_png(aligned, out / "aligned" / name)
        save_png(preproc.r_blend(b, aligned, p.alpha), out / "blended" / name)
        if p.corruption == "rsh":
            rng = np.random.default_rng([cfg.seed, idx])
            save_png(preproc.apply_rsh(aligned, cfg.rsh, rng), out / "corrupted" / name)
    out.mkdir(parents=True, exist_ok=True)
    (out / "homography.json").write_text(json.dumps(h_doc, indent=2, sort_keys=True) + "\n")
    log.info("processed %d image pairs -> %s", len(names), out)
    return out


def cmd_report(paths, out=None) -> str:
    try:
        reports = report.load_reports(paths)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read report: {exc}") from exc
    table = report.comparison_table(reports)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(table)
    return table


# ---------------------------------------------------------------------------
# argument parsing


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--preset", default="toy", help="named base configuration (toy, paper-config, robustness)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel evaluation trials")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr=0.01")
    common.add_argument("--data", help="dataset root (data.root)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="gemfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic two-modality dataset")

    p = sub.add_parser("preprocess", parents=[common], help="align, blend and corrupt image pairs")
    p.add_argument("--input", help="directory with images/a and images/b")
    p.add_argument("--correspondences", help="JSON list of [sx, sy, tx, ty]")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--mode")
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--trials", type=int)
    p.add_argument("--corruption", choices=de.CORRUPTION_MODES)
    p.add_argument("--target", choices=("a", "b"))
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--out")

    p = sub.add_parser("report", parents=[common], help="comparison table from evaluation reports")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out")
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "data": "data.root",
    "input": "preprocess.input_dir",
    "correspondences": "preprocess.correspondences",
    "alpha": "preprocess.alpha",
    "mode": "mode",
    "checkpoint": "checkpoint",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "max_steps": "train.max_steps",
    "trials": "eval.trials",
    "corruption": "eval.corruption",
    "target": "eval.target",
    "split": "eval.split",
}


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            cmd_generate(cfg, force=args.force)
        elif args.command == "preprocess":
            cmd_preprocess(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, jobs=args.jobs)
        else:
            sys.stdout.write(cmd_report(args.reports, args.out))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (DataError, InvalidInput, EstimationFailed) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except GemError as exc:
        log.error("invalid parameter: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
