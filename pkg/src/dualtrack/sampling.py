"""Training-sample harvesting, candidate proposal and the bootstrap tracker."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import BoundingBox, TrackerConfig, bilinear, intersection_area, iou, rotate_patch, to_gray

log = logging.getLogger(__name__)

MAX_SHIFT = 5.0
MAX_ANGLE = 10.0
MAX_REDRAWS = 1000


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    patch: np.ndarray
    label: int  # +1 positive, -1 negative
    source_box: BoundingBox
    frame_index: int
    angle: float = 0.0

    @property
    def positive(self) -> bool:
        return self.label > 0


@dataclass(frozen=True)
class CandidateSet:
    boxes: list
    origin: BoundingBox

    def __len__(self):
        return len(self.boxes)


def target_fraction(box: BoundingBox, target: BoundingBox) -> float:
    """Share of the target's area covered by ``box``."""
    return intersection_area(box, target) / target.area


def _inside(gt: BoundingBox, width: int, height: int) -> bool:
    x1, y1, x2, y2 = gt.extent()
    return x2 > 0 and y2 > 0 and x1 < width and y1 < height


def generate_training_samples(frame: np.ndarray, gt: BoundingBox, cfg: TrackerConfig,
                              rng: np.random.Generator, frame_index: int = 0) -> list[LabeledSample]:
    """Jittered positives and far-away negatives around ``gt``.

    Positives are shifted by up to 5 px per axis and rotated by up to 10
    degrees, redrawn until their IoU with ``gt`` reaches ``cfg.positive_iou``.
    Negatives are placed uniformly over the frame and redrawn until they
    cover less than ``cfg.neg_max_target_fraction`` of the target.
    """
    height, width = frame.shape[:2]
    if not _inside(gt, width, height):
        raise SamplingError("ground-truth box lies outside the frame")
    if cfg.neg_per_frame > 0 and width * height < 2 * gt.area:
        raise SamplingError("cannot sample negatives")
    ps = cfg.patch_size
    out = []
    for _ in range(cfg.pos_per_frame):
        for _attempt in range(MAX_REDRAWS):
            dx, dy = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2)
            angle = float(rng.uniform(-MAX_ANGLE, MAX_ANGLE))
            box = gt.shifted(float(dx), float(dy))
            if iou(box, gt) >= cfg.positive_iou:
                break
        else:
            raise SamplingError(f"no positive with IoU >= {cfg.positive_iou} after {MAX_REDRAWS} draws")
        out.append(LabeledSample(rotate_patch(frame, box, angle, ps), 1, box, frame_index, angle))

    # centers keep the box inside the frame when it fits, else range over the frame
    lo_x, hi_x = (gt.w / 2, width - gt.w / 2) if gt.w <= width else (0.0, float(width))
    lo_y, hi_y = (gt.h / 2, height - gt.h / 2) if gt.h <= height else (0.0, float(height))
    for _ in range(cfg.neg_per_frame):
        for _attempt in range(MAX_REDRAWS):
            cx = float(rng.uniform(lo_x, hi_x))
            cy = float(rng.uniform(lo_y, hi_y))
            box = BoundingBox(cx, cy, gt.w, gt.h)
            if target_fraction(box, gt) < cfg.neg_max_target_fraction:
                break
        else:
            raise SamplingError("cannot sample negatives")
        out.append(LabeledSample(rotate_patch(frame, box, 0.0, ps), -1, box, frame_index, 0.0))
    return out


def sample_candidates(prev: BoundingBox, cfg: TrackerConfig, rng: np.random.Generator,
                      frame_dims: tuple[int, int]) -> CandidateSet:
    """Gaussian candidate boxes around ``prev``; ``frame_dims`` is ``(height, width)``.

    Index 0 is always ``prev`` itself.
    """
    height, width = frame_dims
    sigma = cfg.candidate_sigma_factor * math.sqrt(prev.w * prev.h)
    boxes = [prev]
    n = cfg.candidate_count - 1
    if n > 0:
        offs = rng.normal(0.0, 1.0, size=(n, 2)) * sigma
        cxs = np.clip(prev.cx + offs[:, 0], 0.0, float(width))
        cys = np.clip(prev.cy + offs[:, 1], 0.0, float(height))
        boxes.extend(BoundingBox(float(x), float(y), prev.w, prev.h) for x, y in zip(cxs, cys))
    return CandidateSet(boxes, prev)


# ---------------------------------------------------------------------------
# Bootstrap tracker


@dataclass(frozen=True)
class BootstrapStep:
    frame_index: int
    box: BoundingBox
    fallback: bool = False


def _grid(box: BoundingBox, th: int, tw: int, margin: int):
    # index-space sample positions: pixel j of the box's left edge sits at left + j
    x0 = box.cx - tw / 2.0 - margin
    y0 = box.cy - th / 2.0 - margin
    xs = x0 + np.arange(tw + 2 * margin)
    ys = y0 + np.arange(th + 2 * margin)
    return np.broadcast_arrays(xs[None, :], ys[:, None])


def ncc_map(region: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of ``template`` at every valid offset.

    Windows with zero variance get ``nan``.
    """
    th, tw = template.shape
    t = template - template.mean()
    tnorm = np.sqrt((t * t).sum())
    win = sliding_window_view(region, (th, tw))
    wmean = win.mean(axis=(2, 3))
    num = np.einsum("abij,ij->ab", win, t)
    wsq = np.einsum("abij,abij->ab", win, win) - th * tw * wmean ** 2
    denom = np.sqrt(np.maximum(wsq, 0.0)) * tnorm
    out = np.full(num.shape, np.nan)
    ok = denom > 1e-12
    out[ok] = num[ok] / denom[ok]
    return out


def _parabolic(cm, c0, cp):
    d = cm - 2 * c0 + cp
    if not np.isfinite(d) or d >= 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / d, -0.5, 0.5))


def bootstrap(frames, gt0: BoundingBox, cfg: TrackerConfig) -> list[BootstrapStep]:
    """Track frames ``1..N`` by NCC template matching of the frame-0 patch.

    The search window spans +-0.5*max(w, h) around the previous box.  When the
    correlation is undefined (flat template or flat search area) the previous
    box is kept and the step is flagged.
    """
    n = cfg.n_bootstrap_frames
    if len(frames) < n + 1:
        raise ValueError(f"bootstrap needs {n + 1} frames, got {len(frames)}")
    gray0 = to_gray(frames[0])
    th = max(1, int(round(gt0.h)))
    tw = max(1, int(round(gt0.w)))
    xs, ys = _grid(gt0, th, tw, 0)
    template = bilinear(gray0[:, :, None], xs, ys)[:, :, 0]
    flat_template = template.std() < 1e-12
    radius = int(math.ceil(0.5 * max(gt0.w, gt0.h)))

    steps = [BootstrapStep(0, gt0)]
    prev = gt0
    for k in range(1, n + 1):
        if flat_template:
            log.warning("bootstrap frame %d: flat template, keeping previous box", k)
            steps.append(BootstrapStep(k, prev, True))
            continue
        gray = to_gray(frames[k])
        xs, ys = _grid(prev, th, tw, radius)
        region = bilinear(gray[:, :, None], xs, ys)[:, :, 0]
        score = ncc_map(region, template)
        if not np.any(np.isfinite(score)):
            log.warning("bootstrap frame %d: undefined correlation, keeping previous box", k)
            steps.append(BootstrapStep(k, prev, True))
            continue
        filled = np.where(np.isfinite(score), score, -np.inf)
        iy, ix = np.unravel_index(np.argmax(filled), filled.shape)
        sx = sy = 0.0
        if 0 < ix < filled.shape[1] - 1:
            sx = _parabolic(filled[iy, ix - 1], filled[iy, ix], filled[iy, ix + 1])
        if 0 < iy < filled.shape[0] - 1:
            sy = _parabolic(filled[iy - 1, ix], filled[iy, ix], filled[iy + 1, ix])
        prev = prev.shifted(ix - radius + sx, iy - radius + sy)
        steps.append(BootstrapStep(k, prev, False))
    return steps
