"""Toy DETR-style head: one encoder layer, one decoder layer, learned queries.

Also holds the pieces of the set-prediction objective (Hungarian matching and
the matched loss), a gradient-descent step, and the checkpoint format.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import InvalidParameter, InvalidShape, TrainingDiverged
from .tensorcore import Tensor


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 32
    d_model: int = 32
    ffn: int = 64
    n_queries: int = 10
    n_classes: int = 3

    @property
    def no_object(self) -> int:
        return self.n_classes


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]  # cx, cy, w, h in [0, 1]


@dataclass
class Assignment:
    """Injective map from ground-truth index to prediction index."""

    pairs: list[tuple[int, int]]
    cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


# ---------------------------------------------------------------------------
# parameters


def _dense(rng, n_in, n_out, scale=1.0):
    w = Tensor(rng.normal(0.0, scale * math.sqrt(1.0 / n_in), size=(n_in, n_out)), requires_grad=True)
    return w, Tensor(np.zeros(n_out), requires_grad=True)


def _attention_params(rng, d, prefix):
    return {f"{prefix}.{n}": Tensor(rng.normal(0.0, math.sqrt(1.0 / d), size=(d, d)), requires_grad=True) for n in "qkvo"}


def _ln_params(d, prefix):
    return {f"{prefix}.g": Tensor(np.ones(d), requires_grad=True), f"{prefix}.b": Tensor(np.zeros(d), requires_grad=True)}


def _ffn_params(rng, d, hidden, prefix):
    w1, b1 = _dense(rng, d, hidden, math.sqrt(2.0))
    w2, b2 = _dense(rng, hidden, d)
    return {f"{prefix}.w1": w1, f"{prefix}.b1": b1, f"{prefix}.w2": w2, f"{prefix}.b2": b2}


def init_head(cfg: HeadConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.d_model
    p: dict[str, Tensor] = {}
    p["proj.w"], p["proj.b"] = _dense(rng, cfg.in_channels, d)
    p.update(_ln_params(d, "proj.ln"))
    p.update(_attention_params(rng, d, "enc.attn"))
    p.update(_ln_params(d, "enc.ln1"))
    p.update(_ffn_params(rng, d, cfg.ffn, "enc.ffn"))
    p.update(_ln_params(d, "enc.ln2"))
    p["query"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.n_queries, d)), requires_grad=True)
    p.update(_attention_params(rng, d, "dec.self"))
    p.update(_ln_params(d, "dec.ln1"))
    p.update(_attention_params(rng, d, "dec.cross"))
    p.update(_ln_params(d, "dec.ln2"))
    p.update(_ffn_params(rng, d, cfg.ffn, "dec.ffn"))
    p.update(_ln_params(d, "dec.ln3"))
    p["cls.w"], p["cls.b"] = _dense(rng, d, cfg.n_classes + 1)
    p["box1.w"], p["box1.b"] = _dense(rng, d, d, math.sqrt(2.0))
    p["box2.w"], p["box2.b"] = _dense(rng, d, 4)
    return p


def positional_encoding(rows: int, cols: int, d: int) -> np.ndarray:
    """Fixed 2-d sinusoidal encoding, shape (rows*cols, d); half the width per axis."""
    if d % 4:
        raise InvalidParameter("d_model must be divisible by 4 for 2-d sinusoidal encoding")
    quarter = d // 4
    freq = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        angle = 2 * np.pi * coord[:, None] * freq[None, :] * 4
        parts += [np.sin(angle), np.cos(angle)]
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# forward


def attention(xq: Tensor, xkv: Tensor, p: dict[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention; returns (output, weights)."""
    q = xq @ p[f"{prefix}.q"]
    k = xkv @ p[f"{prefix}.k"]
    v = xkv @ p[f"{prefix}.v"]
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = tc.softmax_temp(tc.matmul(q, tc.transpose(k, (0, 2, 1))) * scale, axis=-1)
    return (weights @ v) @ p[f"{prefix}.o"], weights


def _ffn(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = tc.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _ln(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return tc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def encode_decode(fused, params: dict[str, Tensor], pos: np.ndarray | None = None, return_attention: bool = False):
    """Map a fused ``[B x] C x H x W`` volume to ``[B x] N x d`` query embeddings.

    ``pos`` overrides the positional encoding of the flattened H*W tokens.
    """
    fused = tc.as_tensor(fused)
    squeeze = fused.ndim == 3
    if squeeze:
        fused = tc.reshape(fused, (1,) + fused.shape)
    if fused.ndim != 4:
        raise InvalidShape(f"encode_decode expects CxHxW or BxCxHxW, got {fused.shape}")
    b, c, h, w = fused.shape
    if c != params["proj.w"].shape[0]:
        raise InvalidShape(f"head projection expects {params['proj.w'].shape[0]} channels, got {c}")
    d = params["proj.w"].shape[1]
    if pos is None:
        pos = positional_encoding(h, w, d)
    tokens = tc.transpose(tc.reshape(fused, (b, c, h * w)), (0, 2, 1))
    # certainty weights rescale the fused volume; normalizing here keeps the
    # relative mix of modalities but not the overall magnitude
    x = _ln(tokens @ params["proj.w"] + params["proj.b"], params, "proj.ln") + pos

    a, enc_att = attention(x, x, params, "enc.attn")
    x = _ln(x + a, params, "enc.ln1")
    x = _ln(x + _ffn(x, params, "enc.ffn"), params, "enc.ln2")

    t = tc.add(np.zeros((b,) + params["query"].shape), params["query"])
    a, self_att = attention(t, t, params, "dec.self")
    t = _ln(t + a, params, "dec.ln1")
    a, cross_att = attention(t, x, params, "dec.cross")
    t = _ln(t + a, params, "dec.ln2")
    t = _ln(t + _ffn(t, params, "dec.ffn"), params, "dec.ln3")

    if squeeze:
        t = tc.reshape(t, t.shape[1:])
    if return_attention:
        return t, {"encoder": enc_att, "decoder_self": self_att, "decoder_cross": cross_att}
    return t


def predict(embeddings: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Class logits (``K+1``, last = no-object) and sigmoid boxes (cx, cy, w, h)."""
    logits = embeddings @ params["cls.w"] + params["cls.b"]
    hidden = tc.relu(embeddings @ params["box1.w"] + params["box1.b"])
    boxes = tc.sigmoid(hidden @ params["box2.w"] + params["box2.b"])
    return logits, boxes


def postprocess(logits: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    """One detection per query: best real class and its softmax probability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    real = prob[:, :-1]
    cls = real.argmax(axis=-1)
    return [
        Detection(int(c), float(real[i, c]), tuple(float(v) for v in boxes[i]))
        for i, c in enumerate(cls)
    ]


# ---------------------------------------------------------------------------
# matching


def hungarian_match(cost) -> Assignment:
    """Min-cost injective assignment of rows (ground truths) to columns (predictions).

    Shortest augmenting path with row/column potentials, O(G^2 N).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidParameter(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise InvalidParameter(f"more ground truths ({n}) than predictions ({m})")
    if not np.all(np.isfinite(cost)):
        raise InvalidParameter("cost matrix must be finite")
    if n == 0:
        return Assignment([], 0.0)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j])
    return Assignment(pairs, float(sum(cost[g, p] for g, p in pairs)))


def brute_force_match(cost) -> Assignment:
    """Exhaustive search over injections; test oracle only."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best, best_cost = None, np.inf
    for cols in itertools.permutations(range(m), n):
        c = float(sum(cost[i, j] for i, j in enumerate(cols)))
        if c < best_cost:
            best, best_cost = cols, c
    return Assignment([(i, j) for i, j in enumerate(best or ())], 0.0 if best is None else best_cost)


def match_cost(logits: np.ndarray, boxes: np.ndarray, gt_classes, gt_boxes, lambda_box: float = 5.0) -> np.ndarray:
    """G x N cost: negative class probability plus weighted L1 box distance."""
    gt_classes = np.asarray(gt_classes, dtype=int)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    return -prob[:, gt_classes].T + lambda_box * l1


# ---------------------------------------------------------------------------
# loss


def batch_set_loss(logits: Tensor, boxes: Tensor, targets, matches, lambda_box: float = 5.0, no_object_weight: float = 1.0) -> Tensor:
    """Sum over samples of the matched set loss.

    ``targets`` is a sequence of (classes, boxes) pairs, ``matches`` the
    per-sample Assignments; logits are (B, N, K+1), boxes (B, N, 4).
    """
    b, n, k1 = logits.shape
    target = np.full((b, n), k1 - 1, dtype=int)
    weight = np.full((b, n), float(no_object_weight))
    bi, pi, gt_rows = [], [], []
    for s, ((classes, gboxes), match) in enumerate(zip(targets, matches)):
        gboxes = np.asarray(gboxes, dtype=np.float64).reshape(-1, 4)
        for g, p in match.pairs:
            target[s, p] = int(classes[g])
            weight[s, p] = 1.0
            bi.append(s)
            pi.append(p)
            gt_rows.append(gboxes[g])
    onehot = np.zeros((b, n, k1))
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    logp = tc.log_softmax(logits, axis=-1)
    loss = -tc.sum_reduce(logp * (onehot * weight[..., None]))
    if bi:
        picked = tc.getitem(boxes, (np.array(bi), np.array(pi)))
        loss = loss + lambda_box * tc.sum_reduce(tc.abs_(picked - np.array(gt_rows)))
    return loss


def set_loss(logits: Tensor, boxes: Tensor, gt_classes, gt_boxes, match: Assignment, lambda_box: float = 5.0, no_object_weight: float = 1.0) -> Tensor:
    """Single-sample set loss; logits (N, K+1), boxes (N, 4)."""
    logits, boxes = tc.as_tensor(logits), tc.as_tensor(boxes)
    return batch_set_loss(
        tc.reshape(logits, (1,) + logits.shape),
        tc.reshape(boxes, (1,) + boxes.shape),
        [(gt_classes, gt_boxes)],
        [match],
        lambda_box,
        no_object_weight,
    )


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    """Adam moments keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def apply_gradients(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, optimizer: Adam | None = None) -> None:
    if optimizer is None:
        for name, g in grads.items():
            params[name].data = params[name].data - lr * g
    else:
        optimizer.update(params, grads, lr)


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    names = list(params)
    return dict(zip(names, tc.backward(loss, [params[n] for n in names])))


def check_finite_loss(value: float, step: int | None = None) -> None:
    if not math.isfinite(value):
        where = f" at step {step}" if step is not None else ""
        raise TrainingDiverged(f"loss became non-finite{where}")


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one little-endian float64 blob per tensor


def save_checkpoint(directory, params: dict[str, Tensor], manifest_extra: dict) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        fname = "params/" + name.replace("/", "__") + ".bin"
        (directory / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "file": fname})
    manifest = dict(manifest_extra)
    manifest["format"] = "gemfuse-checkpoint/1"
    manifest["params"] = entries
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {}
    for entry in manifest["params"]:
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return params, manifest
