"""Seeded synthetic sequences with exact ground truth.

A textured square target is composited over a static textured background.
Target edges are anti-aliased by area coverage, so non-integer boxes are
rendered faithfully and the ground truth needs no rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BoundingBox, bilinear, make_rng, save_image

SCENARIOS = ("static", "translate", "illumination", "occlusion", "scale")
ATTRIBUTES = {
    "static": [],
    "translate": ["fast_motion"],
    "illumination": ["illumination"],
    "occlusion": ["occlusion"],
    "scale": ["scale"],
}
SPEED = 3.0
OCCLUDER_SPEED = 4.0
OCCLUDED_FRAMES = 10


@dataclass
class Sequence:
    scenario: str
    frames: list
    boxes: list
    meta: dict = field(default_factory=dict)


def _texture(rng, h, w, sigma, lo, hi):
    tex = np.stack([ndimage.gaussian_filter(rng.random((h, w)), sigma, mode="wrap") for _ in range(3)], -1)
    tex -= tex.min()
    tex /= tex.max()
    return lo + (hi - lo) * tex


def _blocky(rng, h, w, block):
    # random colour blocks, softened slightly
    blocks = rng.random((-(-h // block), -(-w // block), 3))
    tex = np.kron(blocks, np.ones((block, block, 1)))[:h, :w]
    tex = ndimage.gaussian_filter(tex, (1.0, 1.0, 0))
    tex -= tex.min()
    tex /= tex.max()
    return 0.05 + 0.7 * tex


def _target_texture(rng, size=48):
    return _blocky(rng, size, size, size // 6)


def _coverage(lo, hi, n):
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def composite(img: np.ndarray, tex: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Paint ``tex`` stretched over ``box`` with area-coverage edges."""
    h, w = img.shape[:2]
    x1, y1, x2, y2 = box.extent()
    cov = _coverage(y1, y2, h)[:, None] * _coverage(x1, x2, w)[None, :]
    ys, xs = np.nonzero(cov)
    if len(ys) == 0:
        return img
    th, tw = tex.shape[:2]
    u = (xs + 0.5 - x1) / box.w * tw - 0.5
    v = (ys + 0.5 - y1) / box.h * th - 0.5
    vals = bilinear(tex, u, v)
    out = img.copy()
    a = cov[ys, xs][:, None]
    out[ys, xs] = out[ys, xs] * (1 - a) + vals * a
    return out


def _bounce(start, v, lo, hi, k):
    span = hi - lo
    p = (start - lo + v * k) % (2 * span)
    return lo + (p if p <= span else 2 * span - p)


def make_sequence(scenario: str, n_frames: int = 200, seed: int = 0, width: int = 192,
                  height: int = 144, target: float = 32.0) -> Sequence:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; valid: {', '.join(SCENARIOS)}")
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = make_rng(seed)
    bg = _blocky(rng, height, width, 6)
    tex = _target_texture(rng)
    occ_tex = _texture(rng, height, 64, 3.0, 0.2, 0.7)
    jitter = rng.uniform(-8, 8, size=2)
    cx0 = width / 2 + jitter[0]
    cy0 = height / 2 + jitter[1]
    meta: dict = {"scenario": scenario, "seed": seed, "width": width, "height": height}

    boxes = []
    for k in range(n_frames):
        cx, cy, size = cx0, cy0, target
        if scenario == "translate":
            margin = target
            cx = _bounce(margin, SPEED, margin, width - margin, k)
        elif scenario == "illumination":
            margin = target
            cx = _bounce(cx0, 1.0, margin, width - margin, k)
        elif scenario == "scale":
            size = target * (1.0 + 0.5 * k / (n_frames - 1))
        boxes.append(BoundingBox(float(cx), float(cy), float(size), float(size)))

    brightness = np.ones(n_frames)
    if scenario == "illumination":
        # 1 -> 1.3 -> 0.7 -> 1 as a piecewise-linear ramp
        t = np.arange(n_frames) / max(n_frames - 1, 1)
        brightness = 1.0 + 0.3 * np.interp(t, [0, 0.25, 0.75, 1.0], [0, 1, -1, 0])
    meta["brightness"] = brightness.tolist()

    occ_boxes = [None] * n_frames
    if scenario == "occlusion":
        b = boxes[0]
        ow = b.w + OCCLUDER_SPEED * (OCCLUDED_FRAMES - 1)
        full_start = n_frames // 2
        # occluder left edge equals the target's left edge at full_start
        left0 = b.extent()[0] - OCCLUDER_SPEED * full_start
        full, touching = [], []
        for k in range(n_frames):
            left = left0 + OCCLUDER_SPEED * k
            ob = BoundingBox(left + ow / 2, height / 2, ow, float(height))
            occ_boxes[k] = ob
            ox1, _, ox2, _ = ob.extent()
            tx1, _, tx2, _ = b.extent()
            if ox1 <= tx1 + 1e-9 and ox2 >= tx2 - 1e-9:
                full.append(k)
            if ox2 > tx1 and ox1 < tx2:
                touching.append(k)
        meta["occluded_frames"] = full
        meta["occlusion_start"] = touching[0]
        meta["occlusion_pass"] = touching[-1] + 1

    frames = []
    for k in range(n_frames):
        img = composite(bg, tex, boxes[k])
        if occ_boxes[k] is not None:
            img = composite(img, occ_tex, occ_boxes[k])
        frames.append(np.clip(img * brightness[k], 0.0, 1.0))
    return Sequence(scenario, frames, boxes, meta)


def write_sequence(seq: Sequence, out_dir) -> Path:
    """Write PNG frames, OTB-style ground truth and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(seq.frames):
        save_image(out / f"{k + 1:08d}.png", frame)
    lines = []
    for b in seq.boxes:
        x, y, w, h = b.to_corners()
        lines.append(f"{x!r},{y!r},{w!r},{h!r}")
    (out / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    (out / "synth_meta.json").write_text(json.dumps(seq.meta, sort_keys=True))
    manifest = out / "manifest.txt"
    manifest.write_text(
        "frames_dir=.\n"
        "pattern=%08d.png\n"
        "first_frame=1\n"
        "gt=groundtruth_rect.txt\n"
        "gt_format=otb\n"
        f"attributes={','.join(ATTRIBUTES[seq.scenario])}\n"
    )
    return manifest


def expected_scale_width(w0: float, k: int, n_frames: int) -> float:
    return w0 * (1.0 + 0.5 * k / (n_frames - 1))


def quantize(frames) -> list:
    """Round frames through 8 bits the way PNG storage does."""
    return [np.rint(np.asarray(f) * 255.0) / 255.0 for f in frames]

