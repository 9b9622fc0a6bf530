"""Benchmark-style scoring: F-score, success and precision curves, loaders.

Frame indices are 0-based positions in the sequence.  A manifest may set
``first_frame`` (default 1) to say which file number is index 0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundingBox, center_distance, iou

SUCCESS_THRESHOLDS = np.arange(21) / 20.0
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
MANIFEST_KEYS = {"frames_dir", "pattern", "first_frame", "gt", "gt_format", "attributes"}


class ManifestError(ValueError):
    pass


@dataclass
class GroundTruth:
    entries: dict
    attributes: set = field(default_factory=set)
    annotation_stride: int = 1

    def __post_init__(self):
        if not self.entries:
            raise ValueError("ground truth has no entries")

    @property
    def frames(self) -> list[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class Curve:
    thresholds: np.ndarray
    values: np.ndarray
    auc: float


def curve_auc(thresholds, values) -> float:
    """Trapezoidal area under ``values`` with thresholds rescaled to [0, 1]."""
    t = np.asarray(thresholds, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    span = t[-1] - t[0]
    if span <= 0:
        return float(v[0])
    x = (t - t[0]) / span
    return float(np.sum((x[1:] - x[:-1]) * (v[1:] + v[:-1]) / 2.0))


def _by_frame(results) -> dict:
    return {r.frame_index: r.box for r in results}


def _paired(results, gt: GroundTruth):
    boxes = _by_frame(results)
    out = []
    for k in gt.frames:
        if k not in boxes:
            raise ValueError(f"no result for annotated frame {k}")
        out.append((boxes[k], gt.entries[k]))
    return out


def overlaps(results, gt: GroundTruth) -> np.ndarray:
    return np.array([iou(b, g) for b, g in _paired(results, gt)])


def center_errors(results, gt: GroundTruth) -> np.ndarray:
    return np.array([center_distance(b, g) for b, g in _paired(results, gt)])


def f_score(results, gt: GroundTruth, overlap_thresh: float = 0.5) -> float:
    """F-measure over annotated frames; a frame counts when iou >= threshold.

    The target is taken to be present in every annotated frame, so precision
    and recall coincide.
    """
    ov = overlaps(results, gt)
    tp = int(np.sum(ov >= overlap_thresh))
    p = r = tp / len(ov)
    return 0.0 if tp == 0 else 2 * p * r / (p + r)


def success_curve(results, gt: GroundTruth, thresholds=SUCCESS_THRESHOLDS) -> Curve:
    t = np.asarray(thresholds, dtype=np.float64)
    ov = overlaps(results, gt)
    values = np.array([np.mean(ov >= th) for th in t])
    return Curve(t, values, curve_auc(t, values))


def precision_curve(results, gt: GroundTruth, thresholds=PRECISION_THRESHOLDS) -> Curve:
    t = np.asarray(thresholds, dtype=np.float64)
    err = center_errors(results, gt)
    values = np.array([np.mean(err <= th) for th in t])
    return Curve(t, values, curve_auc(t, values))


@dataclass(frozen=True)
class SequenceScore:
    name: str
    attributes: frozenset
    f: float
    success_auc: float
    precision_auc: float
    precision_20: float


def score_sequence(name: str, results, gt: GroundTruth) -> SequenceScore:
    pc = precision_curve(results, gt)
    return SequenceScore(name, frozenset(gt.attributes), f_score(results, gt),
                         success_curve(results, gt).auc, pc.auc,
                         float(pc.values[int(np.searchsorted(pc.thresholds, 20.0))]))


def aggregate(scores, attribute: str | None = None) -> dict:
    """Mean F and AUCs over the sequences carrying ``attribute`` (all if None)."""
    chosen = [s for s in scores if attribute is None or attribute in s.attributes]
    if not chosen:
        raise ValueError(f"no sequences match attribute {attribute!r}")
    return {
        "sequences": len(chosen),
        "f": float(np.mean([s.f for s in chosen])),
        "success_auc": float(np.mean([s.success_auc for s in chosen])),
        "precision_auc": float(np.mean([s.precision_auc for s in chosen])),
        "precision_20": float(np.mean([s.precision_20 for s in chosen])),
    }


# ---------------------------------------------------------------------------
# loaders


def parse_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in MANIFEST_KEYS:
            raise ManifestError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    for key in ("gt",):
        if key not in out:
            raise ManifestError(f"{path}: missing required key {key!r}")
    out.setdefault("frames_dir", ".")
    out.setdefault("pattern", "%08d.png")
    out.setdefault("gt_format", "otb")
    if out["gt_format"] not in ("otb", "alov"):
        raise ManifestError(f"{path}: gt_format must be otb or alov, got {out['gt_format']!r}")
    try:
        out["first_frame"] = int(out.get("first_frame", "1"))
    except ValueError:
        raise ManifestError(f"{path}: first_frame must be an integer") from None
    return out


def _numbers(line: str, path, lineno: int, count: int) -> list[float]:
    parts = [p for p in re.split(r"[,\s]+", line.strip()) if p]
    if len(parts) != count:
        raise ValueError(f"{path}:{lineno}: expected {count} numbers, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"{path}:{lineno}: not a number in {line.strip()!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"{path}:{lineno}: non-finite value")
    return vals


def load_otb(path) -> dict:
    """``x,y,w,h`` per line (commas or whitespace), one line per frame."""
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        x, y, w, h = _numbers(line, path, lineno, 4)
        try:
            entries[len(entries)] = BoundingBox.from_corners(x, y, w, h)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not entries:
        raise ValueError(f"{path}: empty ground truth")
    return entries


def load_alov(path, first_frame: int = 1) -> dict:
    """``frame x1 y1 x2 y2`` per annotated frame (file numbering)."""
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        f, x1, y1, x2, y2 = _numbers(line, path, lineno, 5)
        if f != int(f) or int(f) < first_frame:
            raise ValueError(f"{path}:{lineno}: bad frame number {f}")
        k = int(f) - first_frame
        if k in entries:
            raise ValueError(f"{path}:{lineno}: duplicate frame {int(f)}")
        try:
            entries[k] = BoundingBox.from_extent(x1, y1, x2, y2)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not entries:
        raise ValueError(f"{path}: empty ground truth")
    return entries


def _stride(frames: list[int]) -> int:
    if len(frames) < 2:
        return 1
    return int(np.gcd.reduce(np.diff(frames)))


def write_otb(path, boxes) -> None:
    lines = [",".join(repr(v) for v in b.to_corners()) for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def write_alov(path, entries: dict, first_frame: int = 1) -> None:
    lines = []
    for k in sorted(entries):
        x1, y1, x2, y2 = entries[k].extent()
        lines.append(f"{k + first_frame} {x1!r} {y1!r} {x2!r} {y2!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_sequence(manifest) -> tuple[list[Path], GroundTruth]:
    """Read a manifest; returns frame paths (index order) and ground truth."""
    m = parse_manifest(manifest)
    root = Path(manifest).parent
    frames_dir = root / m["frames_dir"]
    gt_path = root / m["gt"]
    if not gt_path.is_file():
        raise ManifestError(f"ground-truth file not found: {gt_path}")
    first = m["first_frame"]
    if m["gt_format"] == "otb":
        entries = load_otb(gt_path)
    else:
        entries = load_alov(gt_path, first)

    def frame_path(k):
        try:
            return frames_dir / (m["pattern"] % (k + first))
        except (TypeError, ValueError):
            raise ManifestError(f"bad frame pattern {m['pattern']!r}") from None

    last = max(entries)
    if m["gt_format"] == "otb":
        count = len(entries)
    else:
        # every frame up to the last annotated one must exist; later ones are optional
        count = last + 1
        while frame_path(count).is_file():
            count += 1
    paths = [frame_path(k) for k in range(count)]
    for p in paths:
        if not p.is_file():
            raise ManifestError(f"missing frame file: {p}")
    attrs = {a.strip() for a in m.get("attributes", "").split(",") if a.strip()}
    return paths, GroundTruth(entries, attrs, _stride(sorted(entries)))
