"""Per-modality feature extraction, sensor certainty, and the fusion operators.

Feature volumes are ``C x H x W`` tensors, or ``B x C x H x W`` when batched;
all operators here accept either layout. Fusion modes carry short identifiers:

    sa  certainty-weighted average        sc  certainty-weighted concatenation
    ma  mask-weighted average             mc  mask-weighted concatenation
    sf  Gumbel-Softmax selective fusion (concatenation)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensorcore as tc
from .errors import InvalidInput, InvalidParameter, InvalidShape
from .tensorcore import Tensor

GUMBEL_EPS = 1e-12


class Modality(str, Enum):
    RGB = "RGB"
    IR = "IR"
    DEPTH = "DEPTH"


@dataclass
class FeatureVolume:
    tensor: Tensor
    modality: Modality | None = None

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class CertaintyWeight:
    """``w = raw * mean_ng`` where ``mean_ng`` is detached from the graph."""

    w: Tensor
    raw: Tensor
    mean_ng: Tensor


@dataclass
class CertaintyMask:
    m: Tensor


@dataclass
class CategoricalEncoding:
    e: Tensor
    logpi: Tensor | None = None


@dataclass(frozen=True)
class Contribution:
    a: float
    b: float
    degenerate: bool = False


def _t(x) -> Tensor:
    if isinstance(x, FeatureVolume):
        return x.tensor
    if isinstance(x, CertaintyWeight):
        return x.w
    if isinstance(x, CertaintyMask):
        return x.m
    if isinstance(x, CategoricalEncoding):
        return x.e
    return tc.as_tensor(x)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# parameter construction


def init_backbone(in_channels: int, rng: np.random.Generator, channels=(8, 16, 32)) -> dict[str, Tensor]:
    """Three conv3x3 + ReLU + 2x2 max-pool stages; 64x64 input -> 8x8 grid."""
    params = {}
    c_prev = in_channels
    for i, c in enumerate(channels):
        params[f"conv{i}.w"] = Tensor(_he(rng, (c, c_prev, 3, 3), c_prev * 9), requires_grad=True)
        params[f"conv{i}.b"] = Tensor(np.zeros(c), requires_grad=True)
        c_prev = c
    return params


def init_certainty(channels: int, rng: np.random.Generator, hidden: int = 8) -> dict[str, Tensor]:
    """Scalar certainty network: conv3x3 -> ReLU -> global mean -> dense -> sigmoid."""
    return {
        "conv.w": Tensor(_he(rng, (hidden, channels, 3, 3), channels * 9), requires_grad=True),
        "conv.b": Tensor(np.zeros(hidden), requires_grad=True),
        "fc.w": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)), requires_grad=True),
        "fc.b": Tensor(np.zeros(1), requires_grad=True),
    }


def init_mask(channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Mask network: a single conv3x3 to one channel followed by a sigmoid."""
    return {
        "conv.w": Tensor(_he(rng, (1, channels, 3, 3), channels * 9) * 0.5, requires_grad=True),
        "conv.b": Tensor(np.zeros(1), requires_grad=True),
    }


def init_selector(channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """1x1 conv producing per-position logits for the Gumbel-Softmax gate."""
    return {
        "conv.w": Tensor(_he(rng, (channels, channels, 1, 1), channels), requires_grad=True),
        "conv.b": Tensor(np.zeros(channels), requires_grad=True),
    }


# ---------------------------------------------------------------------------
# feature extraction and certainty


def extract_features(image, params: dict[str, Tensor], modality: Modality | None = None) -> FeatureVolume:
    x = _t(image)
    expected = params["conv0.w"].shape[1]
    if x.ndim not in (3, 4) or x.shape[-3] != expected:
        raise InvalidInput(f"backbone expects {expected} input channels, got image of shape {x.shape}")
    i = 0
    while f"conv{i}.w" in params:
        x = tc.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        x = tc.max_pool2d(tc.relu(x), 2)
        i += 1
    return FeatureVolume(x, modality)


def estimate_certainty(s, params: dict[str, Tensor], k: int) -> CertaintyWeight:
    """Scalar certainty ``f(s) * [mean of the first k channels]`` with the mean detached.

    Batched input yields one weight per sample (shape ``(B,)``).
    """
    s = _t(s)
    channels = s.shape[-3]
    if not 1 <= k <= channels:
        raise InvalidParameter(f"k must lie in [1, {channels}], got {k}")
    h = tc.relu(tc.conv2d(s, params["conv.w"], params["conv.b"], padding=1))
    pooled = tc.mean_reduce(h, axis=(-2, -1))  # (..., hidden)
    pooled = tc.reshape(pooled, (-1, pooled.shape[-1]))
    raw = tc.sigmoid(tc.matmul(pooled, params["fc.w"]) + params["fc.b"])
    raw = tc.reshape(raw, s.shape[:-3])
    mean_ng = tc.stop_gradient(np.mean(s.data[..., :k, :, :], axis=(-3, -2, -1)))
    return CertaintyWeight(w=tc.hadamard(raw, mean_ng), raw=raw, mean_ng=mean_ng)


def estimate_mask(s, params: dict[str, Tensor]) -> CertaintyMask:
    s = _t(s)
    return CertaintyMask(tc.sigmoid(tc.conv2d(s, params["conv.w"], params["conv.b"], padding=1)))


# ---------------------------------------------------------------------------
# deterministic weighted fusion


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShape(f"{op}: feature volumes differ, {a.shape} vs {b.shape}")


def _per_sample(w: Tensor, s: Tensor) -> Tensor:
    # scalar weight per sample -> broadcast over C, H, W
    if w.ndim == 0 or w.size == 1:
        return tc.reshape(w, ())
    if w.shape != s.shape[:1]:
        raise InvalidShape(f"weight shape {w.shape} incompatible with volume {s.shape}")
    return tc.reshape(w, (w.shape[0], 1, 1, 1))


def fuse_scalar_avg(s_a, s_b, w_a, w_b) -> Tensor:
    """g_sa: elementwise mean of the certainty-scaled volumes."""
    s_a, s_b = _t(s_a), _t(s_b)
    _check_pair(s_a, s_b, "fuse_scalar_avg")
    wa, wb = _per_sample(_t(w_a), s_a), _per_sample(_t(w_b), s_b)
    return (wa * s_a + wb * s_b) * 0.5


def fuse_scalar_concat(s_a, s_b, w_a, w_b) -> Tensor:
    """g_sc: channel concatenation of the certainty-scaled volumes."""
    s_a, s_b = _t(s_a), _t(s_b)
    _check_pair(s_a, s_b, "fuse_scalar_concat")
    wa, wb = _per_sample(_t(w_a), s_a), _per_sample(_t(w_b), s_b)
    return tc.concat_channels(wa * s_a, wb * s_b)


def _check_mask(m: Tensor, s: Tensor, op: str) -> None:
    if m.ndim != s.ndim or m.shape[-3] != 1 or m.shape[-2:] != s.shape[-2:]:
        raise InvalidShape(f"{op}: mask {m.shape} does not match volume {s.shape}")


def fuse_mask_avg(s_a, s_b, m_a, m_b) -> Tensor:
    """g_ma: single-channel masks broadcast over channels, then averaged."""
    s_a, s_b, m_a, m_b = _t(s_a), _t(s_b), _t(m_a), _t(m_b)
    _check_pair(s_a, s_b, "fuse_mask_avg")
    _check_mask(m_a, s_a, "fuse_mask_avg")
    _check_mask(m_b, s_b, "fuse_mask_avg")
    return (m_a * s_a + m_b * s_b) * 0.5


def fuse_mask_concat(s_a, s_b, m_a, m_b) -> Tensor:
    """g_mc: masked volumes concatenated along channels."""
    s_a, s_b, m_a, m_b = _t(s_a), _t(s_b), _t(m_a), _t(m_b)
    _check_pair(s_a, s_b, "fuse_mask_concat")
    _check_mask(m_a, s_a, "fuse_mask_concat")
    _check_mask(m_b, s_b, "fuse_mask_concat")
    return tc.concat_channels(m_a * s_a, m_b * s_b)


def fuse_avg_baseline(s_a, s_b) -> Tensor:
    s_a, s_b = _t(s_a), _t(s_b)
    _check_pair(s_a, s_b, "fuse_avg_baseline")
    return (s_a + s_b) * 0.5


def fuse_concat_baseline(s_a, s_b) -> Tensor:
    s_a, s_b = _t(s_a), _t(s_b)
    _check_pair(s_a, s_b, "fuse_concat_baseline")
    return tc.concat_channels(s_a, s_b)


# ---------------------------------------------------------------------------
# stochastic fusion


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator, eps: float = GUMBEL_EPS) -> Tensor:
    """Standard Gumbel noise from U drawn on [eps, 1 - eps]."""
    return Tensor(gumbel_from_uniform(rng.uniform(eps, 1.0 - eps, size=shape)))


def gumbel_softmax(logpi, tau: float = 1.0, rng: np.random.Generator | None = None, noise=None, axis: int = -1) -> CategoricalEncoding:
    """Relaxed categorical sample ``softmax((logpi + G) / tau)`` along ``axis``.

    Either ``rng`` or an explicit ``noise`` array must be given; the latter
    exists so callers can pin the sample.
    """
    if not tau > 0:
        raise InvalidParameter(f"tau must be positive, got {tau}")
    logpi = _t(logpi)
    if noise is None:
        if rng is None:
            raise InvalidParameter("gumbel_softmax needs an rng or explicit noise")
        noise = sample_gumbel(logpi.shape, rng)
    return CategoricalEncoding(tc.softmax_temp(logpi + _t(noise), axis=axis, tau=tau), logpi)


def encode_categorical(s, params: dict[str, Tensor], tau: float = 1.0, rng=None, noise=None) -> CategoricalEncoding:
    """Per (channel, row) categorical over width positions, relaxed by Gumbel-Softmax."""
    s = _t(s)
    logits = tc.conv2d(s, params["conv.w"], params["conv.b"], padding=0)
    return gumbel_softmax(tc.log_softmax(logits, axis=-1), tau, rng=rng, noise=noise, axis=-1)


def fuse_stochastic(s_a, s_b, e_a, e_b) -> Tensor:
    """g_sf: ``[e_a * s_a ; e_b * s_b]``."""
    s_a, s_b, e_a, e_b = _t(s_a), _t(s_b), _t(e_a), _t(e_b)
    _check_pair(s_a, s_b, "fuse_stochastic")
    if e_a.shape != s_a.shape or e_b.shape != s_b.shape:
        raise InvalidShape(f"fuse_stochastic: encodings {e_a.shape}/{e_b.shape} vs volume {s_a.shape}")
    return tc.concat_channels(e_a * s_a, e_b * s_b)


# ---------------------------------------------------------------------------


def certainty_report(w_a: float, w_b: float) -> Contribution:
    """Normalized contribution of each modality; 0.5/0.5 flagged degenerate when both are zero."""
    w_a, w_b = float(_t(w_a).item()), float(_t(w_b).item())
    if w_a < 0 or w_b < 0:
        raise InvalidParameter(f"certainty weights must be non-negative, got {w_a}, {w_b}")
    total = w_a + w_b
    if total == 0.0:
        return Contribution(0.5, 0.5, degenerate=True)
    return Contribution(w_a / total, w_b / total)


FUSION_MODES = ("sa", "sc", "ma", "mc", "sf")
