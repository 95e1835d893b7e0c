"""Synthetic two-modality scenes and the detection evaluation protocol.

Modality ``a`` is RGB-like: every object is a grey rectangle whose brightness
encodes its class, so lighting changes flip class evidence. Modality ``b`` is
IR-like: all objects are equally hot but each class has its own silhouette.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import preproc
from .fusion import certainty_report
from .errors import InvalidInput, InvalidParameter
from .imageio import load_png, save_png

CORRUPTION_MODES = ("none", "blank", "noise", "rsh")
AP_METADATA = {
    "iou_threshold": 0.5,
    "interpolation": "all-point",
    "matching": "confidence-descending greedy; each detection takes the best-IoU unmatched ground truth",
    "tie_break": "stable sort by detection index",
    "map_classes": "classes present in ground truth",
}


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    object_count: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (14, 26)
    class_names: tuple[str, ...] = ("person", "bicycle", "car")
    a_levels: tuple[float, ...] = (0.3, 0.55, 0.85)
    a_background: float = 0.08
    b_background: float = 0.15
    b_object: float = 0.85
    noise: float = 0.02
    margin: int = 2

    def __post_init__(self):
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise InvalidParameter(f"object_count range is invalid: {self.object_count}")
        if len(self.a_levels) != len(self.class_names):
            raise InvalidParameter("a_levels needs one brightness per class")
        if not 0 < self.object_size[0] <= self.object_size[1] < self.image_size:
            raise InvalidParameter(f"object_size {self.object_size} does not fit image {self.image_size}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class MultiModalSample:
    image_a: np.ndarray  # (3, H, W)
    image_b: np.ndarray  # (1, H, W)
    classes: np.ndarray  # (G,)
    boxes: np.ndarray  # (G, 4) normalized cx, cy, w, h
    corruption: dict | None = None
    seed: int | None = None

    @property
    def size(self) -> tuple[int, int]:
        return self.image_a.shape[1:]

    def pixel_boxes(self) -> np.ndarray:
        """(G, 4) boxes as x, y, w, h in pixels."""
        h, w = self.size
        b = self.boxes
        return np.stack([(b[:, 0] - b[:, 2] / 2) * w, (b[:, 1] - b[:, 3] / 2) * h, b[:, 2] * w, b[:, 3] * h], axis=1)


# ---------------------------------------------------------------------------
# scene synthesis


def shape_mask(class_id: int, h: int, w: int) -> np.ndarray:
    """Silhouette of a class inside an h x w box: rectangle, ellipse, triangle."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if class_id % 3 == 0:
        return np.ones((h, w), dtype=bool)
    if class_id % 3 == 1:
        return ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0
    # apex at top centre, base along the bottom edge
    return np.abs(xs - w / 2) <= (w / 2) * (ys / h)


def _tight(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] + 1), int(rows[-1] + 1)


def generate_scene(cfg: SceneConfig, seed: int) -> MultiModalSample:
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    a = np.full((3, size, size), cfg.a_background)
    b = np.full((1, size, size), cfg.b_background)
    occupied = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    classes, boxes = [], []
    for _ in range(n):
        for _attempt in range(100):
            c = int(rng.integers(cfg.n_classes))
            h, w = (int(v) for v in rng.integers(cfg.object_size[0], cfg.object_size[1] + 1, size=2))
            y, x = (int(v) for v in rng.integers(0, size - np.array([h, w]) + 1))
            m = cfg.margin
            if not occupied[max(y - m, 0) : y + h + m, max(x - m, 0) : x + w + m].any():
                break
        else:
            continue
        local = shape_mask(c, h, w)
        x0, y0, x1, y1 = _tight(local)
        full = np.zeros((size, size), dtype=bool)
        full[y : y + h, x : x + w] = local
        occupied[y : y + h, x : x + w] = True
        b[0, full] = cfg.b_object
        a[:, y + y0 : y + y1, x + x0 : x + x1] = cfg.a_levels[c]
        bx0, by0, bw, bh = x + x0, y + y0, x1 - x0, y1 - y0
        classes.append(c)
        boxes.append([(bx0 + bw / 2) / size, (by0 + bh / 2) / size, bw / size, bh / size])
    if cfg.noise > 0:
        a = a + rng.normal(0.0, cfg.noise, size=a.shape)
        b = b + rng.normal(0.0, cfg.noise, size=b.shape)
    return MultiModalSample(
        image_a=np.clip(a, 0.0, 1.0),
        image_b=np.clip(b, 0.0, 1.0),
        classes=np.array(classes, dtype=int),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        seed=seed,
    )


def generate_dataset(cfg: SceneConfig, count: int, seed: int) -> list[MultiModalSample]:
    seeds = np.random.SeedSequence(seed).generate_state(count) if count else []
    return [generate_scene(cfg, int(s)) for s in seeds]


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str = "none"
    target: str = "a"
    rsh: preproc.RshConfig = field(default_factory=preproc.RshConfig)

    def __post_init__(self):
        if self.mode not in CORRUPTION_MODES:
            raise InvalidParameter(f"unknown corruption mode {self.mode!r}")
        if self.target not in ("a", "b"):
            raise InvalidParameter(f"corruption target must be 'a' or 'b', got {self.target!r}")


def corrupt_modality(
    sample: MultiModalSample,
    mode: str,
    target: str,
    rng: np.random.Generator,
    rsh: preproc.RshConfig | None = None,
    seed: int | None = None,
) -> MultiModalSample:
    """Return a copy with one modality degraded; annotations are shared unchanged."""
    if mode not in CORRUPTION_MODES:
        raise InvalidParameter(f"unknown corruption mode {mode!r}")
    if target not in ("a", "b"):
        raise InvalidParameter(f"corruption target must be 'a' or 'b', got {target!r}")
    key = "image_a" if target == "a" else "image_b"
    img = getattr(sample, key)
    if mode == "none":
        new = img
    elif mode == "blank":
        new = np.zeros_like(img)
    elif mode == "noise":
        new = rng.uniform(0.0, 1.0, size=img.shape)
    else:
        new = preproc.apply_rsh(img, rsh or preproc.RshConfig(), rng)
    return replace(sample, **{key: new}, corruption={"mode": mode, "modality": target, "seed": seed})


# ---------------------------------------------------------------------------
# metrics


def cxcywh_to_xyxy(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def iou(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) boxes; 0 when the union is empty."""
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


@dataclass(frozen=True)
class ScoredBox:
    image_id: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]


def precision_recall(dets: Sequence[ScoredBox], gts: Sequence[GroundTruth], class_id: int, iou_threshold: float = 0.5):
    """Cumulative (precision, recall) after each detection of ``class_id``, best score first."""
    if not 0 < iou_threshold < 1:
        raise InvalidParameter(f"iou threshold must lie in (0, 1), got {iou_threshold}")
    dets = [d for d in dets if d.class_id == class_id]
    by_image: dict[int, list[GroundTruth]] = {}
    for g in gts:
        if g.class_id == class_id:
            by_image.setdefault(g.image_id, []).append(g)
    n_gt = sum(len(v) for v in by_image.values())
    order = np.argsort(-np.array([d.score for d in dets], dtype=np.float64), kind="stable")
    used = {k: np.zeros(len(v), dtype=bool) for k, v in by_image.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        cands = by_image.get(d.image_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[d.image_id][j]:
                continue
            o = iou(d.box, g.box)
            if o >= iou_threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall, n_gt


def average_precision(dets: Sequence[ScoredBox], gts: Sequence[GroundTruth], class_id: int, iou_threshold: float = 0.5) -> float:
    """Area under the monotone precision envelope (all-point interpolation).

    Returns 0.0 when the class has no ground truth.
    """
    precision, recall, n_gt = precision_recall(dets, gts, class_id, iou_threshold)
    if n_gt == 0 or len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def mean_average_precision(dets, gts, iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """mAP over the classes present in ``gts`` plus the per-class APs."""
    classes = sorted({g.class_id for g in gts})
    per_class = {c: average_precision(dets, gts, c, iou_threshold) for c in classes}
    if not per_class:
        return 0.0, {}
    return sum(per_class.values()) / len(per_class), per_class


def to_records(detections_per_image, samples: Sequence[MultiModalSample]):
    dets, gts = [], []
    for i, (dlist, s) in enumerate(zip(detections_per_image, samples)):
        for d in dlist:
            dets.append(ScoredBox(i, d.class_id, d.confidence, tuple(cxcywh_to_xyxy(d.box))))
        for c, b in zip(s.classes, s.boxes):
            gts.append(GroundTruth(i, int(c), tuple(cxcywh_to_xyxy(b))))
    return dets, gts


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mode: str
    per_class_ap: dict[str, float]
    map: float
    trial_maps: list[float]
    certainty: dict | None
    corruption: dict
    trials: int
    seed: int
    n_samples: int
    metadata: dict = field(default_factory=lambda: dict(AP_METADATA))
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "per_class_ap", "map", "trial_maps", "certainty", "corruption", "trials", "seed", "n_samples", "metadata"],
    "properties": {
        "mode": {"type": "string"},
        "per_class_ap": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "trial_maps": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "certainty": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["mean_w_a", "mean_w_b", "mean_c_a", "mean_c_b", "degenerate"],
                    "properties": {
                        "mean_w_a": {"type": "number"},
                        "mean_w_b": {"type": "number"},
                        "mean_c_a": {"type": "number", "minimum": 0, "maximum": 1},
                        "mean_c_b": {"type": "number", "minimum": 0, "maximum": 1},
                        "degenerate": {"type": "integer", "minimum": 0},
                    },
                },
            ]
        },
        "corruption": {"type": "object", "required": ["mode", "target"]},
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "n_samples": {"type": "integer", "minimum": 1},
        "metadata": {"type": "object"},
        "config": {"type": "object"},
    },
}


# stream index reserved for inference-time noise (stochastic fusion); sample
# streams use indices 0..n-1
_INFERENCE_STREAM = 2**32 - 1


def _trial_seed(seed: int, trial: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial, index])


def corrupt_for_trial(samples: Sequence[MultiModalSample], spec: CorruptionSpec, seed: int, trial: int) -> list[MultiModalSample]:
    """The corrupted copies of ``samples`` that trial ``trial`` evaluates on."""
    return [
        corrupt_modality(s, spec.mode, spec.target, _trial_seed(seed, trial, i), spec.rsh, seed=seed)
        for i, s in enumerate(samples)
    ]


def detect_all(model, samples: Sequence[MultiModalSample], seed: int, trial: int, batch_size: int = 50):
    """Per-image detections and contributions, in batches."""
    detections, contributions = [], []
    infer_rng = _trial_seed(seed, trial, _INFERENCE_STREAM)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        dets, contrib = model.detect(
            np.stack([s.image_a for s in chunk]), np.stack([s.image_b for s in chunk]), rng=infer_rng
        )
        detections.extend(dets)
        contributions.extend(contrib)
    return detections, contributions


def run_trial(model, samples: Sequence[MultiModalSample], spec: CorruptionSpec, seed: int, trial: int, batch_size: int = 50):
    """One corrupted pass over ``samples``: (mAP, per-class AP, per-image contributions)."""
    corrupted = corrupt_for_trial(samples, spec, seed, trial)
    detections, contributions = detect_all(model, corrupted, seed, trial, batch_size)
    dets, gts = to_records(detections, corrupted)
    m, per_class = mean_average_precision(dets, gts)
    return m, per_class, contributions


def _run_trial_job(args):
    return run_trial(*args)


def evaluate(
    model,
    samples: Sequence[MultiModalSample],
    spec: CorruptionSpec | None = None,
    trials: int = 10,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Average mAP over ``trials`` independently re-seeded corruptions of ``samples``.

    ``model.detect(images_a, images_b, rng)`` must return per-image detections
    and per-image contributions (``(w_a, w_b)`` pairs, or None when the fusion
    mode has no certainty measure).
    """
    if not samples:
        raise InvalidInput("empty test set")
    if trials < 1:
        raise InvalidParameter("trials must be >= 1")
    spec = spec or CorruptionSpec()
    jobs_args = [(model, samples, spec, seed, t) for t in range(trials)]
    if jobs > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial_job, jobs_args))
    else:
        results = [run_trial(*a) for a in jobs_args]

    trial_maps = [float(r[0]) for r in results]
    present = sorted({c for r in results for c in r[1]})
    names = list(class_names) if class_names else [str(c) for c in range(max(present, default=-1) + 1)]
    per_class = {names[c]: sum(r[1][c] for r in results) / trials for c in present}

    certainty = None
    pairs = [c for r in results for c in r[2] if c is not None]
    if pairs:
        reports = [certainty_report(wa, wb) for wa, wb in pairs]
        certainty = {
            "mean_w_a": float(np.mean([p[0] for p in pairs])),
            "mean_w_b": float(np.mean([p[1] for p in pairs])),
            "mean_c_a": float(np.mean([r.a for r in reports])),
            "mean_c_b": float(np.mean([r.b for r in reports])),
            "degenerate": int(sum(r.degenerate for r in reports)),
        }
    corruption = {"mode": spec.mode, "target": spec.target}
    if spec.mode == "rsh":
        corruption["rsh"] = asdict(spec.rsh)
    return EvalReport(
        mode=getattr(model, "mode", "unknown"),
        per_class_ap=per_class,
        map=sum(trial_maps) / trials,
        trial_maps=trial_maps,
        certainty=certainty,
        corruption=corruption,
        trials=trials,
        seed=seed,
        n_samples=len(samples),
    )


# ---------------------------------------------------------------------------
# dataset on disk: images/{a,b}/NNNN.png + annotations.json (COCO subset)


def write_dataset(samples: Sequence[MultiModalSample], directory, class_names: Sequence[str]) -> Path:
    directory = Path(directory)
    images, annotations = [], []
    ann_id = 1
    for i, s in enumerate(samples):
        name = f"{i:04d}.png"
        save_png(s.image_a, directory / "images" / "a" / name)
        save_png(s.image_b, directory / "images" / "b" / name)
        h, w = s.size
        images.append({"id": i, "file_name": name, "width": int(w), "height": int(h), "seed": s.seed})
        for c, pb in zip(s.classes, s.pixel_boxes()):
            bbox = [round(float(v), 6) for v in pb]
            annotations.append(
                {"id": ann_id, "image_id": i, "category_id": int(c), "bbox": bbox, "area": round(bbox[2] * bbox[3], 6), "iscrowd": 0}
            )
            ann_id += 1
    doc = {
        "images": images,
        "categories": [{"id": i, "name": n} for i, n in enumerate(class_names)],
        "annotations": annotations,
    }
    path = directory / "annotations.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def validate_dataset(directory) -> list[str]:
    """Problems found in an on-disk dataset; empty when it is well formed."""
    directory = Path(directory)
    errors = []
    ann_path = directory / "annotations.json"
    if not ann_path.exists():
        return [f"missing {ann_path}"]
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        return [f"annotations.json is not valid JSON: {exc}"]
    for key in ("images", "categories", "annotations"):
        if not isinstance(doc.get(key), list):
            errors.append(f"annotations.json lacks a '{key}' list")
    if errors:
        return errors
    cat_ids = {c["id"] for c in doc["categories"]}
    sizes = {}
    for im in doc["images"]:
        sizes[im["id"]] = (im["width"], im["height"])
        for mod in ("a", "b"):
            if not (directory / "images" / mod / im["file_name"]).exists():
                errors.append(f"image {im['id']}: missing images/{mod}/{im['file_name']}")
    for ann in doc["annotations"]:
        if ann["image_id"] not in sizes:
            errors.append(f"annotation {ann['id']}: unknown image {ann['image_id']}")
            continue
        if ann["category_id"] not in cat_ids:
            errors.append(f"annotation {ann['id']}: unknown category {ann['category_id']}")
        x, y, w, h = ann["bbox"]
        W, H = sizes[ann["image_id"]]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W + 1e-6 or y + h > H + 1e-6:
            errors.append(f"annotation {ann['id']}: bbox {ann['bbox']} outside {W}x{H} image")
    return errors


def load_dataset(directory) -> tuple[list[MultiModalSample], list[str]]:
    directory = Path(directory)
    errors = validate_dataset(directory)
    if errors:
        raise InvalidInput(f"dataset {directory} is invalid: {errors[0]}")
    doc = json.loads((directory / "annotations.json").read_text())
    by_image: dict[int, list] = {im["id"]: [] for im in doc["images"]}
    for ann in doc["annotations"]:
        by_image[ann["image_id"]].append(ann)
    samples = []
    for im in sorted(doc["images"], key=lambda r: r["id"]):
        a = load_png(directory / "images" / "a" / im["file_name"])
        b = load_png(directory / "images" / "b" / im["file_name"])
        if a.shape[1:] != b.shape[1:]:
            raise InvalidInput(f"image {im['id']}: modalities differ in size")
        W, H = im["width"], im["height"]
        anns = by_image[im["id"]]
        boxes = np.array(
            [[(x + w / 2) / W, (y + h / 2) / H, w / W, h / H] for x, y, w, h in (a_["bbox"] for a_ in anns)], dtype=np.float64
        ).reshape(-1, 4)
        samples.append(MultiModalSample(a, b, np.array([a_["category_id"] for a_ in anns], dtype=int), boxes, seed=im.get("seed")))
    names = [c["name"] for c in sorted(doc["categories"], key=lambda c: c["id"])]
    return samples, names
