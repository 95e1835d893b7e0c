"""Backbones + fusion + detection head wired into one trainable detector."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import detmini, fusion
from .dataeval import CorruptionSpec, MultiModalSample, corrupt_modality
from .errors import InvalidParameter, NonFiniteError, TrainingDiverged
from .tensorcore import Tensor

MODES = ("sa", "sc", "ma", "mc", "sf", "avg-baseline", "conc-baseline", "single-a", "single-b")
_DOUBLE_WIDTH = {"sc", "mc", "sf", "conc-baseline"}


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "sa"
    n_classes: int = 3
    k: int = 16
    tau: float = 1.0
    backbone_channels: tuple[int, ...] = (8, 16, 32)
    in_channels_a: int = 3
    in_channels_b: int = 1
    d_model: int = 32
    ffn: int = 64
    n_queries: int = 10
    lambda_box: float = 5.0
    no_object_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameter(f"unknown fusion mode {self.mode!r}")
        if not 1 <= self.k <= self.backbone_channels[-1]:
            raise InvalidParameter(f"k must lie in [1, {self.backbone_channels[-1]}], got {self.k}")
        if not self.tau > 0:
            raise InvalidParameter("tau must be positive")

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    def head(self) -> detmini.HeadConfig:
        c = self.feature_channels * (2 if self.mode in _DOUBLE_WIDTH else 1)
        return detmini.HeadConfig(in_channels=c, d_model=self.d_model, ffn=self.ffn, n_queries=self.n_queries, n_classes=self.n_classes)


@dataclass
class ForwardOutput:
    logits: Tensor
    boxes: Tensor
    contributions: list | None  # per-sample (w_a, w_b)
    fused: Tensor


def _prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def _group(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + "/")}


class Detector:
    """A fusion-mode-specific detector; parameters live in one flat dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def mode(self) -> str:
        return self.config.mode

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Detector":
        rng = np.random.default_rng(seed)
        c = config.feature_channels
        p: dict[str, Tensor] = {}
        if config.mode != "single-b":
            p.update(_prefixed("backbone_a", fusion.init_backbone(config.in_channels_a, rng, config.backbone_channels)))
        if config.mode != "single-a":
            p.update(_prefixed("backbone_b", fusion.init_backbone(config.in_channels_b, rng, config.backbone_channels)))
        if config.mode in ("sa", "sc"):
            p.update(_prefixed("certainty_a", fusion.init_certainty(c, rng)))
            p.update(_prefixed("certainty_b", fusion.init_certainty(c, rng)))
        elif config.mode in ("ma", "mc"):
            p.update(_prefixed("mask_a", fusion.init_mask(c, rng)))
            p.update(_prefixed("mask_b", fusion.init_mask(c, rng)))
        elif config.mode == "sf":
            p.update(_prefixed("selector_a", fusion.init_selector(c, rng)))
            p.update(_prefixed("selector_b", fusion.init_selector(c, rng)))
        p.update(_prefixed("head", detmini.init_head(config.head(), rng)))
        return cls(config, p)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------------

    def fuse(self, images_a, images_b, rng: np.random.Generator | None = None, noise=None):
        """Fused feature volume and per-sample (w_a, w_b) contributions."""
        cfg, p = self.config, self.params
        mode = cfg.mode
        s_a = s_b = None
        if mode != "single-b":
            s_a = fusion.extract_features(images_a, _group(p, "backbone_a"), fusion.Modality.RGB).tensor
        if mode != "single-a":
            s_b = fusion.extract_features(images_b, _group(p, "backbone_b"), fusion.Modality.IR).tensor
        batch = (s_a if s_a is not None else s_b).shape[0]
        contrib = None
        if mode in ("sa", "sc"):
            w_a = fusion.estimate_certainty(s_a, _group(p, "certainty_a"), cfg.k)
            w_b = fusion.estimate_certainty(s_b, _group(p, "certainty_b"), cfg.k)
            op = fusion.fuse_scalar_avg if mode == "sa" else fusion.fuse_scalar_concat
            fused = op(s_a, s_b, w_a, w_b)
            contrib = list(zip(w_a.w.data.tolist(), w_b.w.data.tolist()))
        elif mode in ("ma", "mc"):
            m_a = fusion.estimate_mask(s_a, _group(p, "mask_a"))
            m_b = fusion.estimate_mask(s_b, _group(p, "mask_b"))
            op = fusion.fuse_mask_avg if mode == "ma" else fusion.fuse_mask_concat
            fused = op(s_a, s_b, m_a, m_b)
            contrib = list(zip(m_a.m.data.mean(axis=(1, 2, 3)).tolist(), m_b.m.data.mean(axis=(1, 2, 3)).tolist()))
        elif mode == "sf":
            na, nb = (None, None) if noise is None else noise
            if rng is None and noise is None:
                raise InvalidParameter("stochastic fusion needs an rng or explicit noise")
            e_a = fusion.encode_categorical(s_a, _group(p, "selector_a"), cfg.tau, rng=rng, noise=na)
            e_b = fusion.encode_categorical(s_b, _group(p, "selector_b"), cfg.tau, rng=rng, noise=nb)
            fused = fusion.fuse_stochastic(s_a, s_b, e_a, e_b)
            # mass of features passed through each gate
            mass_a = (e_a.e.data * s_a.data).mean(axis=(1, 2, 3))
            mass_b = (e_b.e.data * s_b.data).mean(axis=(1, 2, 3))
            contrib = list(zip(mass_a.tolist(), mass_b.tolist()))
        elif mode == "avg-baseline":
            fused = fusion.fuse_avg_baseline(s_a, s_b)
        elif mode == "conc-baseline":
            fused = fusion.fuse_concat_baseline(s_a, s_b)
        elif mode == "single-a":
            fused = s_a
            contrib = [(1.0, 0.0)] * batch
        else:
            fused = s_b
            contrib = [(0.0, 1.0)] * batch
        return fused, contrib

    def forward(self, images_a, images_b, rng=None, noise=None) -> ForwardOutput:
        fused, contrib = self.fuse(images_a, images_b, rng, noise)
        head = _group(self.params, "head")
        logits, boxes = detmini.predict(detmini.encode_decode(fused, head), head)
        return ForwardOutput(logits, boxes, contrib, fused)

    def detect(self, images_a, images_b, rng=None):
        out = self.forward(np.asarray(images_a), np.asarray(images_b), rng=rng)
        dets = [detmini.postprocess(l, b) for l, b in zip(out.logits.data, out.boxes.data)]
        contrib = out.contributions if out.contributions is not None else [None] * len(dets)
        return dets, contrib

    def loss(self, samples: Sequence[MultiModalSample], rng=None) -> Tensor:
        cfg = self.config
        out = self.forward(np.stack([s.image_a for s in samples]), np.stack([s.image_b for s in samples]), rng=rng)
        targets = [(s.classes, s.boxes) for s in samples]
        matches = [
            detmini.hungarian_match(detmini.match_cost(l, b, s.classes, s.boxes, cfg.lambda_box))
            for l, b, s in zip(out.logits.data, out.boxes.data, samples)
        ]
        total = detmini.batch_set_loss(out.logits, out.boxes, targets, matches, cfg.lambda_box, cfg.no_object_weight)
        return total * (1.0 / len(samples))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainCorruption:
    """Per-sample augmentation of one modality during training."""

    target: str = "a"
    probabilities: dict = field(default_factory=dict)  # mode -> probability
    spec: CorruptionSpec = field(default_factory=CorruptionSpec)

    def sample(self, s: MultiModalSample, rng: np.random.Generator) -> MultiModalSample:
        if not self.probabilities:
            return s
        u = rng.uniform()
        acc = 0.0
        for mode in sorted(self.probabilities):
            acc += self.probabilities[mode]
            if u < acc:
                return corrupt_modality(s, mode, self.target, rng, self.spec.rsh)
        return s


def train_step(model: Detector, batch: Sequence[MultiModalSample], lr: float, rng=None, optimizer: detmini.Adam | None = None) -> float:
    """One joint update of backbones, fusion networks and head; returns the pre-update loss."""
    if not lr >= 0:
        raise InvalidParameter(f"learning rate must be non-negative, got {lr}")
    try:
        loss = model.loss(batch, rng=rng)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite forward pass: {exc}") from exc
    value = loss.item()
    detmini.check_finite_loss(value)
    grads = detmini.gradients(loss, model.params)
    if lr > 0:
        detmini.apply_gradients(model.params, grads, lr, optimizer)
    return value


@dataclass
class TrainResult:
    losses: list[float]
    steps: int


def train(
    model: Detector,
    samples: Sequence[MultiModalSample],
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    optimizer: str = "adam",
    augmentation: TrainCorruption | None = None,
    max_steps: int | None = None,
    log=None,
) -> TrainResult:
    rng = np.random.default_rng(seed)
    opt = detmini.Adam() if optimizer == "adam" else None
    losses = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                return TrainResult(losses, step)
            batch = [samples[i] for i in order[start : start + batch_size]]
            if augmentation is not None:
                batch = [augmentation.sample(s, rng) for s in batch]
            value = train_step(model, batch, lr, rng=rng, optimizer=opt)
            losses.append(value)
            step += 1
            if log is not None:
                log(epoch, step, value)
    return TrainResult(losses, step)


def model_manifest(model: Detector, extra: dict | None = None) -> dict:
    d = {"model": asdict(model.config)}
    if extra:
        d.update(extra)
    return d


def load_model(directory) -> tuple[Detector, dict]:
    params, manifest = detmini.load_checkpoint(directory)
    cfg = dict(manifest["model"])
    cfg["backbone_channels"] = tuple(cfg["backbone_channels"])
    return Detector(ModelConfig(**cfg), params), manifest
