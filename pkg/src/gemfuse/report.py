"""Report images and comparison tables.

A report image shows the two modalities merged along the anti-diagonal, the
predicted boxes, and a bar on top whose blue part is modality a's share of
the certainty and whose green part is modality b's.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .detmini import Detection
from .fusion import certainty_report

BLUE = np.array([0.15, 0.35, 0.95])
GREEN = np.array([0.2, 0.8, 0.3])
CLASS_COLOURS = np.array([[1.0, 0.2, 0.2], [1.0, 0.85, 0.1], [0.9, 0.3, 1.0], [0.1, 0.9, 0.9]])
BAR_ROWS = 6


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img[:3]


def diagonal_merge(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Modality a above the anti-diagonal, modality b below it."""
    a, b = _rgb(a), _rgb(b)
    h, w = a.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w]
    upper = xs / max(w - 1, 1) + ys / max(h - 1, 1) < 1.0
    return np.where(upper[None], a, b)


def draw_box(img: np.ndarray, box, colour) -> None:
    """Outline a normalized (cx, cy, w, h) box in place."""
    _, h, w = img.shape
    cx, cy, bw, bh = box
    x0 = int(np.clip(np.floor((cx - bw / 2) * w), 0, w - 1))
    x1 = int(np.clip(np.ceil((cx + bw / 2) * w) - 1, 0, w - 1))
    y0 = int(np.clip(np.floor((cy - bh / 2) * h), 0, h - 1))
    y1 = int(np.clip(np.ceil((cy + bh / 2) * h) - 1, 0, h - 1))
    c = np.asarray(colour)[:, None]
    img[:, y0, x0 : x1 + 1] = c
    img[:, y1, x0 : x1 + 1] = c
    img[:, y0 : y1 + 1, x0] = c
    img[:, y0 : y1 + 1, x1] = c


def contribution_bar(width: int, c_a: float) -> np.ndarray:
    bar = np.empty((3, BAR_ROWS, width))
    split = int(round(np.clip(c_a, 0.0, 1.0) * width))
    bar[:, :, :split] = BLUE[:, None, None]
    bar[:, :, split:] = GREEN[:, None, None]
    return bar


def render(
    image_a: np.ndarray,
    image_b: np.ndarray,
    detections: Sequence[Detection],
    contribution,
    score_threshold: float = 0.5,
    scale: int = 4,
) -> np.ndarray:
    """(3, BAR_ROWS*scale + H*scale, W*scale) report image."""
    base = diagonal_merge(image_a, image_b)
    big = base.repeat(scale, axis=1).repeat(scale, axis=2)
    for d in detections:
        if d.confidence >= score_threshold:
            draw_box(big, d.box, CLASS_COLOURS[d.class_id % len(CLASS_COLOURS)])
    c_a = certainty_report(*contribution).a if contribution is not None else 0.5
    bar = contribution_bar(big.shape[2], c_a).repeat(scale, axis=1)
    return np.concatenate([bar, big], axis=1)


def comparison_table(reports: Sequence[dict]) -> str:
    """Markdown table: one row per evaluation report."""
    classes = sorted({c for r in reports for c in r["per_class_ap"]})
    head = ["mode", "corruption", "trials", "mAP", *classes, "c_a", "c_b"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in reports:
        corr = r["corruption"]
        label = "none" if corr["mode"] == "none" else f"{corr['mode']}({corr['target']})"
        cert = r.get("certainty")
        cells = [r["mode"], label, str(r["trials"]), f"{r['map']:.3f}"]
        cells += [f"{r['per_class_ap'][c]:.3f}" if c in r["per_class_ap"] else "-" for c in classes]
        cells += [f"{cert['mean_c_a']:.3f}", f"{cert['mean_c_b']:.3f}"] if cert else ["-", "-"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def load_reports(paths) -> list[dict]:
    return [json.loads(Path(p).read_text()) for p in paths]
