"""Declarative run configuration: strict JSON loading, presets and overrides.

Precedence is command-line flags, then the config file, then the defaults below.
Unknown keys are rejected with the dotted path of the offending key.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataeval import CORRUPTION_MODES, SceneConfig
from .errors import ConfigError, GemError
from .model import MODES, ModelConfig
from .preproc import RshConfig


FEATURE_CHANNELS = ModelConfig().feature_channels


@dataclass(frozen=True)
class DataSection:
    root: str = "data"
    n_train: int = 400
    n_test: int = 100
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "adam"  # or "sgd" (plain gradient descent)
    max_steps: int | None = None
    # corruption of one modality applied per sample while training
    corruption_target: str = "a"
    corruption: dict = field(default_factory=dict)  # mode -> probability


@dataclass(frozen=True)
class EvalSection:
    split: str = "test"
    trials: int = 10
    corruption: str = "none"
    target: str = "a"
    report_images: int = 4
    score_threshold: float = 0.5  # only for drawing boxes in report images


@dataclass(frozen=True)
class PreprocessSection:
    input_dir: str = "data/test"
    correspondences: str | None = None
    alpha: float = 0.9
    corruption: str = "rsh"


@dataclass(frozen=True)
class RunConfig:
    mode: str = "sa"
    seed: int = 0
    k: int = 16
    tau: float = 1.0
    lambda_box: float = 5.0
    no_object_weight: float = 1.0
    output_dir: str = "runs"
    checkpoint: str | None = None  # defaults to <output_dir>/<mode>/checkpoint
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    rsh: RshConfig = field(default_factory=RshConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)

    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / self.mode / "checkpoint"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Full-scale hyperparameters reported for the original experiments. Kept for
# documentation; the toy network does not train in a useful time with them.
PRESETS: dict[str, dict] = {
    "toy": {},
    "paper-config": {"train": {"lr": 8e-6, "batch_size": 2, "epochs": 100, "optimizer": "adam", "corruption": {"rsh": 0.5}}},
    "robustness": {"train": {"epochs": 60, "corruption": {"rsh": 0.4, "blank": 0.2}}},
}


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{path or 'config'}' must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown key '{path + key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value, hint = raw[f.name], hints[f.name]
        key = path + f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, key + ".")
        else:
            kwargs[f.name] = _coerce(value, hint, key)
    try:
        return cls(**kwargs)
    except GemError as exc:
        raise ConfigError(f"invalid '{path.rstrip('.') or 'config'}': {exc}") from exc


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"'{key}' must be a list")
        inner = args[0] if args else float
        return tuple(_coerce(v, inner, key) for v in value)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif origin is dict or hint is dict:
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"'{key}' has the wrong type: {value!r}")
    return value


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "corruption":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_override(tree: dict, dotted: str, value) -> dict:
    """Return ``tree`` with ``a.b.c = value`` applied."""
    parts = dotted.split(".")
    out = dict(tree)
    node = out
    for p in parts[:-1]:
        child = node.get(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"'{dotted}' does not name a config section")
        node[p] = dict(child)
        node = node[p]
    node[parts[-1]] = value
    return out


def validate(cfg: RunConfig) -> RunConfig:
    checks = [
        ("mode", cfg.mode in MODES, f"must be one of {', '.join(MODES)}"),
        ("k", 1 <= cfg.k <= FEATURE_CHANNELS, f"must lie in [1, {FEATURE_CHANNELS}]"),
        ("tau", cfg.tau > 0, "must be positive"),
        ("lambda_box", cfg.lambda_box >= 0, "must be non-negative"),
        ("no_object_weight", cfg.no_object_weight > 0, "must be positive"),
        ("data.n_train", cfg.data.n_train >= 0, "must be non-negative"),
        ("data.n_test", cfg.data.n_test >= 0, "must be non-negative"),
        ("train.lr", cfg.train.lr > 0, "must be positive"),
        ("train.epochs", cfg.train.epochs >= 0, "must be non-negative"),
        ("train.batch_size", cfg.train.batch_size >= 1, "must be at least 1"),
        ("train.optimizer", cfg.train.optimizer in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
        ("train.max_steps", cfg.train.max_steps is None or cfg.train.max_steps >= 0, "must be non-negative"),
        ("train.corruption_target", cfg.train.corruption_target in ("a", "b"), "must be 'a' or 'b'"),
        (
            "train.corruption",
            all(m in CORRUPTION_MODES and isinstance(p, (int, float)) and p >= 0 for m, p in cfg.train.corruption.items())
            and sum(cfg.train.corruption.values()) <= 1.0,
            "must map corruption modes to probabilities summing to at most 1",
        ),
        ("eval.split", cfg.eval.split in ("train", "test"), "must be 'train' or 'test'"),
        ("eval.trials", cfg.eval.trials >= 1, "must be at least 1"),
        ("eval.corruption", cfg.eval.corruption in CORRUPTION_MODES, f"must be one of {', '.join(CORRUPTION_MODES)}"),
        ("eval.target", cfg.eval.target in ("a", "b"), "must be 'a' or 'b'"),
        ("eval.report_images", cfg.eval.report_images >= 0, "must be non-negative"),
        ("preprocess.alpha", 0.0 <= cfg.preprocess.alpha <= 1.0, "must lie in [0, 1]"),
        ("preprocess.corruption", cfg.preprocess.corruption in ("none", "rsh"), "must be 'none' or 'rsh'"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"'{key}' {msg}")
    return cfg


def load_config(path=None, preset: str = "toy", overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then the file at ``path``, then ``overrides``
    (a dict of dotted keys to values)."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'; choose from {', '.join(PRESETS)}")
    tree = _merge({}, PRESETS[preset])
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        tree = _merge(tree, doc)
    for key, value in (overrides or {}).items():
        tree = set_override(tree, key, value)
    return validate(_build(RunConfig, tree, ""))
