"""Sensor-output preprocessing.

Images are float64 arrays of shape (C, H, W) with values in [0, 1]. 8-bit
PNG conversion lives in :mod:`gemfuse.imageio`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationFailed, InvalidInput, InvalidParameter

DEFAULT_ALPHA = 0.9


def _image(x, name="image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise InvalidInput(f"{name} must be CxHxW or HxW, got shape {arr.shape}")
    return arr


def r_blend(depth, rgb, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Hybrid depth: ``alpha * depth + (1 - alpha) * red``, clamped to [0, 1]."""
    depth, rgb = _image(depth, "depth"), _image(rgb, "rgb")
    if depth.shape[0] != 1 or rgb.shape[0] != 3:
        raise InvalidInput(f"expected 1-channel depth and 3-channel rgb, got {depth.shape} and {rgb.shape}")
    if depth.shape[1:] != rgb.shape[1:]:
        raise InvalidInput(f"depth {depth.shape[1:]} and rgb {rgb.shape[1:]} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        out = depth.copy()
    elif alpha == 0.0:
        out = rgb[:1].copy()
    else:
        out = alpha * depth + (1.0 - alpha) * rgb[:1]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# homography


@dataclass
class Homography:
    matrix: np.ndarray  # 3x3, bottom-right entry 1
    normalized: np.ndarray = field(repr=False)  # estimate in Hartley-normalized coordinates
    residuals: np.ndarray = field(repr=False)  # per-correspondence reprojection error, pixels

    @property
    def mean_residual(self) -> float:
        return float(self.residuals.mean())

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max())

    def to_json_dict(self) -> dict:
        return {
            "H": [float(v) for v in self.matrix.reshape(-1)],
            "residual_mean": self.mean_residual,
            "residual_max": self.max_residual,
            "residual_rms": float(np.sqrt(np.mean(self.residuals**2))),
            "n_points": int(self.residuals.size),
        }


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if dist <= 0:
        raise EstimationFailed("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    p = _homogeneous(pts) @ np.asarray(h).T
    return p[:, :2] / p[:, 2:3]


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    return sv[-1] <= tol * max(sv[0], 1e-300)


def estimate_homography(correspondences) -> Homography:
    """Normalized DLT from rows of ``[sx, sy, tx, ty]``; maps source to target."""
    c = np.asarray(correspondences, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise EstimationFailed(f"correspondences must be an (n, 4) array, got shape {c.shape}")
    if len(c) < 4:
        raise EstimationFailed(f"need at least 4 correspondences, got {len(c)}")
    src, dst = c[:, :2], c[:, 2:]
    if _collinear(src) or _collinear(dst):
        raise EstimationFailed("degenerate configuration: points are collinear")
    t_src, t_dst = _normalizer(src), _normalizer(dst)
    xs = _homogeneous(src) @ t_src.T
    xd = _homogeneous(dst) @ t_dst.T
    rows = []
    for (x, y, _), (u, v, _) in zip(xs, xd):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    # a second null direction means the fit is under-determined
    if len(sv) >= 8 and sv[7] <= 1e-10 * sv[0]:
        raise EstimationFailed("degenerate configuration: solution is not unique")
    hn = vt[-1].reshape(3, 3)
    if abs(hn[2, 2]) > 1e-15:
        hn = hn / hn[2, 2]
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(h[2, 2]) < 1e-15:
        raise EstimationFailed("estimated homography cannot be normalized")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) <= 1e-12:
        raise EstimationFailed("estimated homography is singular")
    residuals = np.sqrt(((apply_homography(h, src) - dst) ** 2).sum(axis=1))
    return Homography(h, hn, residuals)


def warp_image(img, h, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse-map every output pixel through ``h`` and sample bilinearly.

    ``out_size`` is (rows, cols); samples outside the source image are 0.
    """
    img = _image(img)
    h = np.asarray(getattr(h, "matrix", h), dtype=np.float64)
    if h.shape != (3, 3) or abs(np.linalg.det(h)) <= 1e-12:
        raise InvalidParameter("homography must be an invertible 3x3 matrix")
    c, rows, cols = img.shape
    out_rows, out_cols = out_size or (rows, cols)
    hinv = np.linalg.inv(h)
    ys, xs = np.mgrid[0:out_rows, 0:out_cols]
    src = apply_homography(hinv, np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    sx, sy = src[:, 0], src[:, 1]
    valid = (sx >= 0) & (sx <= cols - 1) & (sy >= 0) & (sy <= rows - 1)
    x0 = np.clip(np.floor(sx), 0, cols - 1).astype(int)
    y0 = np.clip(np.floor(sy), 0, rows - 1).astype(int)
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    fx = np.where(valid, sx - x0, 0.0)
    fy = np.where(valid, sy - y0, 0.0)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bottom = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.where(valid, out, 0.0)
    return np.clip(out.reshape(c, out_rows, out_cols), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Random Shadows and Highlights


@dataclass(frozen=True)
class RshConfig:
    shadow_count: tuple[int, int] = (1, 3)
    highlight_count: tuple[int, int] = (1, 3)
    shadow_factor: tuple[float, float] = (0.3, 0.7)
    highlight_factor: tuple[float, float] = (1.3, 1.8)
    vertices: tuple[int, int] = (3, 8)
    radius: tuple[float, float] = (0.25, 0.6)  # fraction of the longer image side
    max_factor: float = 3.0

    def __post_init__(self):
        lo, hi = self.shadow_factor
        if not 0 < lo <= hi < 1:
            raise InvalidParameter(f"shadow multipliers must lie in (0, 1), got {self.shadow_factor}")
        lo, hi = self.highlight_factor
        if not 1 < lo <= hi <= self.max_factor:
            raise InvalidParameter(f"highlight multipliers must lie in (1, {self.max_factor}], got {self.highlight_factor}")
        for name in ("shadow_count", "highlight_count", "vertices", "radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise InvalidParameter(f"{name} range is invalid: {(lo, hi)}")
        if self.vertices[0] < 3:
            raise InvalidParameter("polygons need at least 3 vertices")

    @classmethod
    def disabled(cls) -> "RshConfig":
        return cls(shadow_count=(0, 0), highlight_count=(0, 0))


def polygon_mask(vertices, rows: int, cols: int) -> np.ndarray:
    """Boolean mask of pixel centres inside a convex polygon given as (x, y) vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    ys, xs = np.mgrid[0:rows, 0:cols] + 0.5
    nxt = np.roll(v, -1, axis=0)
    cross = (nxt[:, 0] - v[:, 0])[:, None, None] * (ys - v[:, 1][:, None, None]) - (nxt[:, 1] - v[:, 1])[:, None, None] * (
        xs - v[:, 0][:, None, None]
    )
    return np.all(cross >= 0, axis=0) | np.all(cross <= 0, axis=0)


def random_convex_polygon(rng: np.random.Generator, rows: int, cols: int, cfg: RshConfig) -> np.ndarray:
    """Vertices on a random rotated ellipse, hence convex."""
    n = int(rng.integers(cfg.vertices[0], cfg.vertices[1] + 1))
    side = max(rows, cols)
    centre = rng.uniform([0, 0], [cols, rows])
    rx, ry = rng.uniform(cfg.radius[0], cfg.radius[1], size=2) * side
    rot = rng.uniform(0, np.pi)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    px, py = rx * np.cos(angles), ry * np.sin(angles)
    c, s = np.cos(rot), np.sin(rot)
    return np.stack([centre[0] + c * px - s * py, centre[1] + s * px + c * py], axis=1)


def shade_polygon(img, vertices, factor: float) -> np.ndarray:
    img = _image(img)
    mask = polygon_mask(vertices, img.shape[1], img.shape[2])
    out = img.copy()
    out[:, mask] *= factor
    return np.clip(out, 0.0, 1.0)


def apply_rsh(img, cfg: RshConfig, rng: np.random.Generator) -> np.ndarray:
    """Multiply random convex polygons by shadow (<1) and highlight (>1) factors.

    Geometry is untouched, so annotations stay valid.
    """
    img = _image(img)
    out = img.copy()
    _, rows, cols = img.shape
    n_shadow = int(rng.integers(cfg.shadow_count[0], cfg.shadow_count[1] + 1))
    n_light = int(rng.integers(cfg.highlight_count[0], cfg.highlight_count[1] + 1))
    for factors, n in ((cfg.shadow_factor, n_shadow), (cfg.highlight_factor, n_light)):
        for _ in range(n):
            poly = random_convex_polygon(rng, rows, cols, cfg)
            factor = rng.uniform(*factors)
            mask = polygon_mask(poly, rows, cols)
            out[:, mask] *= factor
    return np.clip(out, 0.0, 1.0)
