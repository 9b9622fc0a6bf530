"""Shared geometry, raster helpers, RNG and configuration.

Coordinates are continuous: pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``
so its center sits at ``(c + 0.5, r + 0.5)``.  Boxes are stored by center,
width and height in that frame; corner formats are converted at IO edges.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numba import njit
from PIL import Image as PILImage


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        # plain floats keep repr and JSON output free of numpy scalar types
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        """Build from a top-left corner box ``(x, y, w, h)``."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_extent(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def extent(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.cx + dx, self.cy + dy, self.w, self.h)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.cx, self.cy, self.w * s, self.h * s)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.extent()
    bx1, by1, bx2, by2 = b.extent()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


# ---------------------------------------------------------------------------
# Raster helpers


def as_image(data) -> np.ndarray:
    """Validate and return a float64 ``(H, W, C)`` image."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWx1 or HxWx3, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) as a 2-D array."""
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at pixel-index coordinates, clamping to the edge.

    ``xs``/``ys`` are in index space (pixel ``c`` centered at ``x = c``).
    Returns an array of shape ``xs.shape + (C,)``.
    """
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _box_grid(cx, cy, w, h, angle_deg, out_size):
    # offsets of output pixel centers from the box center, in source pixels
    t = (np.arange(out_size) + 0.5) / out_size
    dx = t[None, :] * w - w / 2.0
    dy = t[:, None] * h - h / 2.0
    dx, dy = np.broadcast_arrays(dx, dy)
    if angle_deg == 0:
        xs = cx + dx
        ys = cy + dy
    else:
        th = math.radians(angle_deg)
        c, s = math.cos(th), math.sin(th)
        xs = cx + dx * c - dy * s
        ys = cy + dx * s + dy * c
    # continuous -> index space
    return xs - 0.5, ys - 0.5


def _check_region(box: BoundingBox, out_size: int):
    if out_size < 2:
        raise ValueError("out_size must be >= 2")
    if box.w < 1 or box.h < 1:
        raise ValueError("degenerate region")


def crop_resize(img: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Resample ``box`` to an ``out_size`` square patch (bilinear, clamp-to-edge)."""
    _check_region(box, out_size)
    xs, ys = _box_grid(box.cx, box.cy, box.w, box.h, 0, out_size)
    return bilinear(img, xs, ys)


def rotate_patch(img: np.ndarray, box: BoundingBox, angle: float, out_size: int) -> np.ndarray:
    """Sample ``box`` rotated by ``angle`` degrees about its center.

    The sampling rectangle is rotated by ``angle`` in image coordinates
    (x right, y down), so a positive angle turns it clockwise on screen.
    Training augmentation stays within a few degrees, but any angle works.
    """
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle}")
    _check_region(box, out_size)
    xs, ys = _box_grid(box.cx, box.cy, box.w, box.h, angle, out_size)
    return bilinear(img, xs, ys)


@njit(cache=True)
def _crop_kernel(img, boxes, out_size, out):
    h, w, c = img.shape
    for n in range(boxes.shape[0]):
        cx, cy, bw, bh = boxes[n, 0], boxes[n, 1], boxes[n, 2], boxes[n, 3]
        for i in range(out_size):
            t = (i + 0.5) / out_size
            y = cy + (t * bh - bh / 2.0) - 0.5
            y = min(max(y, 0.0), h - 1.0)
            y0 = int(math.floor(y))
            y1 = min(y0 + 1, h - 1)
            fy = y - y0
            for j in range(out_size):
                t = (j + 0.5) / out_size
                x = cx + (t * bw - bw / 2.0) - 0.5
                x = min(max(x, 0.0), w - 1.0)
                x0 = int(math.floor(x))
                x1 = min(x0 + 1, w - 1)
                fx = x - x0
                for k in range(c):
                    top = img[y0, x0, k] * (1.0 - fx) + img[y0, x1, k] * fx
                    bot = img[y1, x0, k] * (1.0 - fx) + img[y1, x1, k] * fx
                    out[n, i, j, k] = top * (1.0 - fy) + bot * fy


def crop_many(img: np.ndarray, boxes, out_size: int, dtype=np.float32) -> np.ndarray:
    """Batch ``crop_resize`` for many boxes; returns ``(N, S, S, C)``."""
    boxes = list(boxes)
    for b in boxes:
        _check_region(b, out_size)
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(boxes), out_size, out_size, img.shape[2]), dtype=np.float64)
    _crop_kernel(np.ascontiguousarray(img, dtype=np.float64), arr, out_size, out)
    return out.astype(dtype, copy=False)


def clamp_box_center(box: BoundingBox, width: int, height: int) -> BoundingBox:
    cx = min(max(box.cx, 0.0), float(width))
    cy = min(max(box.cy, 0.0), float(height))
    return BoundingBox(cx, cy, box.w, box.h)


# ---------------------------------------------------------------------------
# Image IO


def load_image(path) -> np.ndarray:
    """Decode a PNG or binary PPM (P6) into an ``(H, W, C)`` array in [0, 1]."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F", "1"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(Path(path))


# ---------------------------------------------------------------------------
# RNG


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent PCG64 streams derived from one seed via SeedSequence."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n)]


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TrackerConfig:
    n_bootstrap_frames: int = 4
    pos_per_frame: int = 25
    neg_per_frame: int = 50
    neg_max_target_fraction: float = 0.2
    candidate_count: int = 256
    candidate_sigma_factor: float = 0.25
    motion_update_period: int = 4
    appearance_update_period: int = 50
    confidence_threshold: float = 0.85
    n_scales: int = 20
    scale_step: float = 1.03
    fusion_weight_appearance: float = 0.5
    patch_size: int = 64
    # beyond the core tracker parameters
    positive_iou: float = 0.7
    buffer_capacity: int = 500
    svm_c: float = 1.0
    use_motion: bool = True
    flow_max_magnitude: float = 8.0
    finetune: bool = False
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3

    def __post_init__(self):
        for name in ("pos_per_frame", "candidate_count", "motion_update_period",
                     "appearance_update_period", "n_scales", "patch_size",
                     "buffer_capacity", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_bootstrap_frames < 0 or self.neg_per_frame < 0:
            raise ValueError("n_bootstrap_frames and neg_per_frame must be >= 0")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        for name in ("neg_max_target_fraction", "confidence_threshold",
                     "fusion_weight_appearance", "positive_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.scale_step > 1.0:
            raise ValueError("scale_step must be > 1")
        if self.candidate_sigma_factor < 0 or self.svm_c <= 0 or self.flow_max_magnitude < 0:
            raise ValueError("candidate_sigma_factor, svm_c, flow_max_magnitude must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        kinds = {int: int, float: float, bool: bool, "int": int, "float": float, "bool": bool}
        return {f.name: kinds[f.type] for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrackerConfig":
        """Build from string or typed values; unknown keys are rejected."""
        types = cls.field_types()
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = parse_value(raw, types[key], key)
        return cls(**kwargs)


def parse_value(raw, kind: type, key: str = "value"):
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    if kind is str:
        return text
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None
