"""Train every fusion mode through the CLI and tabulate clean and corrupted mAP.

    python scripts/fusion_sweep.py --root runs/sweep --epochs 10
"""

import argparse
from pathlib import Path

from gemfuse.cli import main as gemfuse

MODES = ("sa", "sc", "ma", "mc", "sf", "avg-baseline", "single-a", "single-b")
CORRUPTIONS = (("none", "a"), ("blank", "a"), ("rsh", "a"), ("noise", "b"))


def run(*args) -> None:
    code = gemfuse([str(a) for a in args])
    if code:
        raise SystemExit(f"gemfuse {' '.join(map(str, args))} exited with {code}")


def sweep() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=list(MODES))
    args = ap.parse_args()

    common = ["--data", args.root / "data", "--seed", args.seed, "--set", f"output_dir={args.root}", "-q"]
    if not (args.root / "data" / "dataset.json").exists():
        run("generate", *common)
    reports = []
    for mode in args.modes:
        run("train", *common, "--mode", mode, "--epochs", args.epochs, "--force")
        for corruption, target in CORRUPTIONS:
            out = args.root / mode / f"eval-{corruption}-{target}"
            trials = 1 if corruption in ("none", "blank") else args.trials
            run("eval", *common, "--checkpoint", args.root / mode / "checkpoint", "--corruption", corruption, "--target", target, "--trials", trials, "--out", out, "--force")
            reports.append(out / "report.json")
    run("report", *reports, "--out", args.root / "table.md")


if __name__ == "__main__":
    sweep()
