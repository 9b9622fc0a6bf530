"""Two-stream tracking: candidate scoring, late fusion, scale search, updates."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as F
from .classifier import SvmModel, train_svm
from .core import BoundingBox, TrackerConfig, child_rngs, crop_many
from .flow import FlowField, compute_flow, flow_to_rgb
from .sampling import LabeledSample, bootstrap, generate_training_samples, sample_candidates

log = logging.getLogger(__name__)

RESULTS_HEADER = ["frame", "cx", "cy", "w", "h", "conf_app", "conf_motion", "conf_fused",
                  "scale", "upd_motion", "upd_app"]
SNAPSHOT_MAGIC = b"DTSNAP"
SNAPSHOT_VERSION = 1
MIN_SCALED_SIDE = 4.0

# child RNG streams derived from the run seed
_RNG_APP_INIT, _RNG_MOT_INIT, _RNG_CAND, _RNG_APP_SAMPLES, _RNG_MOT_SAMPLES, _RNG_FINETUNE = range(6)


@dataclass(frozen=True)
class Updates:
    motion: bool
    appearance: bool


@dataclass(frozen=True)
class TrackResult:
    frame_index: int
    box: BoundingBox
    conf_app: float
    conf_motion: float
    conf_fused: float
    scale_applied: float = 1.0
    updates: Updates = Updates(False, False)
    failed: bool = False


class SampleBuffer:
    """Bounded FIFO of samples with their cached feature vectors."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque = deque()
        self.evicted = 0

    def extend(self, samples, feats) -> None:
        for s, f in zip(samples, feats):
            if len(self._items) == self.capacity:
                self._items.popleft()
                self.evicted += 1
            self._items.append((s, f))
        assert len(self._items) <= self.capacity

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def samples(self) -> list[LabeledSample]:
        return [s for s, _ in self._items]

    def refresh_features(self, feats) -> None:
        self._items = deque((s, f) for (s, _), f in zip(self._items, feats))


@dataclass
class Stream:
    name: str
    spec: F.NetworkSpec
    weights: F.Weights
    buffer: SampleBuffer
    svm: SvmModel | None = None

    def features(self, patches: np.ndarray) -> np.ndarray:
        return normalize(F.extract_features_batch(self.spec, self.weights, patches))

    def confidence(self, patches: np.ndarray) -> np.ndarray:
        return np.atleast_1d(self.svm.confidence(self.features(patches)))

    def add_samples(self, samples) -> None:
        if not samples:
            return
        patches = np.stack([s.patch for s in samples])
        self.buffer.extend(samples, self.features(patches))

    def retrain(self, C: float) -> None:
        feats = np.stack([f for _, f in self.buffer])
        labels = np.array([s.label for s, _ in self.buffer], dtype=np.float64)
        self.svm = fit_standardized(feats, labels, C)


def fit_standardized(feats: np.ndarray, labels: np.ndarray, C: float) -> SvmModel:
    """Train on per-dimension z-scored features, then fold the scaling into the model.

    The returned model scores raw (unscaled) features.
    """
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    m = train_svm((feats - mu) / sd, labels, C)
    w = m.weights / sd
    return replace(m, weights=w, bias=m.bias - float(w @ mu))


def normalize(feats: np.ndarray) -> np.ndarray:
    """L2-normalize rows; all-zero rows stay zero."""
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.where(norms > 0, norms, 1.0)


@dataclass
class TrackerState:
    cfg: TrackerConfig
    seed: int
    appearance: Stream
    motion: Stream | None
    last_box: BoundingBox
    frame_index: int
    rngs: list
    init_results: list = field(default_factory=list)
    last_flow: FlowField | None = None


# ---------------------------------------------------------------------------
# small pieces


def fuse(ca: float, cm: float, alpha: float) -> float:
    """Late fusion of the two stream confidences."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * ca + (1.0 - alpha) * cm


def should_update(frame_index: int, conf_fused: float, cfg: TrackerConfig) -> Updates:
    if frame_index < 1:
        raise ValueError("frame_index must be >= 1")
    motion = frame_index % cfg.motion_update_period == 0
    appearance = (frame_index % cfg.appearance_update_period == 0
                  or conf_fused < cfg.confidence_threshold)
    return Updates(motion, appearance)


def pick_candidate(fused, boxes, last_box: BoundingBox) -> int:
    """Index of the best fused score; ties go to the box nearest ``last_box``."""
    fused = np.asarray(fused)
    tied = np.flatnonzero(fused == fused.max())
    if len(tied) == 1:
        return int(tied[0])
    return int(min(tied, key=lambda i: (math.hypot(boxes[i].cx - last_box.cx, boxes[i].cy - last_box.cy), i)))


def scale_exponents(n_scales: int) -> list[int]:
    """``n`` consecutive exponents containing 0, e.g. -10..9 for 20."""
    lo = -(n_scales // 2)
    return list(range(lo, lo + n_scales))


def scale_search(frame: np.ndarray, box: BoundingBox, stream: Stream, cfg: TrackerConfig):
    """Pick the best of ``cfg.n_scales`` rescalings of ``box`` by appearance confidence.

    Returns ``(box, scale)``.  Ties go to the scale closest to 1.
    """
    ks = []
    boxes = []
    for k in scale_exponents(cfg.n_scales):
        s = cfg.scale_step ** k
        b = box.scaled(s)
        if min(b.w, b.h) < MIN_SCALED_SIDE:
            continue
        ks.append(k)
        boxes.append(b)
    if not boxes:
        return box, 1.0
    conf = stream.confidence(crop_many(frame, boxes, cfg.patch_size))
    best = max(range(len(ks)), key=lambda i: (conf[i], -abs(ks[i]), -ks[i]))
    return boxes[best], cfg.scale_step ** ks[best]


def _alpha(cfg: TrackerConfig) -> float:
    return cfg.fusion_weight_appearance if cfg.use_motion else 1.0


def _flow_rgb(cfg: TrackerConfig, a, b):
    f = compute_flow(a, b)
    mag = cfg.flow_max_magnitude if cfg.flow_max_magnitude > 0 else "auto"
    return f, flow_to_rgb(f, mag)


# ---------------------------------------------------------------------------
# initialization


def _network(cfg: TrackerConfig, weights_path, rng) -> tuple[F.NetworkSpec, F.Weights]:
    spec = F.default_spec(cfg.patch_size, finetune=cfg.finetune)
    if weights_path:
        return spec, F.load_weights(weights_path, spec)
    return spec, F.init_weights(spec, rng)


def init_tracker(frames, gt0: BoundingBox, cfg: TrackerConfig, seed: int = 0,
                 appearance_weights=None, motion_weights=None) -> TrackerState:
    """Bootstrap over frames ``0..N`` and train both streams.

    ``frames`` must hold at least ``N + 1`` frames (and at least two when the
    motion stream is on, since frame 0 draws its motion samples from the
    ``(0, 1)`` flow).
    """
    n = cfg.n_bootstrap_frames
    if len(frames) < n + 1:
        raise ValueError(f"need {n + 1} frames to initialize, got {len(frames)}")
    if cfg.use_motion and len(frames) < 2:
        raise ValueError("the motion stream needs at least two frames")
    rngs = child_rngs(seed, 6)
    steps = bootstrap(frames, gt0, cfg)
    boxes = [s.box for s in steps]

    spec, w = _network(cfg, appearance_weights, rngs[_RNG_APP_INIT])
    app = Stream("appearance", spec, w, SampleBuffer(cfg.buffer_capacity))
    app_samples = []
    for k in range(n + 1):
        app_samples += generate_training_samples(frames[k], boxes[k], cfg, rngs[_RNG_APP_SAMPLES], k)

    motion = None
    rgbs = {}
    if cfg.use_motion:
        spec_m, w_m = _network(cfg, motion_weights, rngs[_RNG_MOT_INIT])
        motion = Stream("motion", spec_m, w_m, SampleBuffer(cfg.buffer_capacity))
        mot_samples = []
        flows = {}
        for k in range(n + 1):
            pair = (0, 1) if k == 0 else (k - 1, k)
            if pair not in flows:
                flows[pair] = _flow_rgb(cfg, frames[pair[0]], frames[pair[1]])
            rgbs[k] = flows[pair][1]
            mot_samples += generate_training_samples(rgbs[k], boxes[k], cfg, rngs[_RNG_MOT_SAMPLES], k)

    if cfg.finetune:
        app.weights, _ = F.finetune_fc(app.spec, app.weights, app_samples, cfg.finetune_epochs,
                                       cfg.finetune_lr, rngs[_RNG_FINETUNE])
    app.add_samples(app_samples)
    app.retrain(cfg.svm_c)
    if motion is not None:
        if cfg.finetune:
            motion.weights, _ = F.finetune_fc(motion.spec, motion.weights, mot_samples,
                                              cfg.finetune_epochs, cfg.finetune_lr, rngs[_RNG_FINETUNE])
        motion.add_samples(mot_samples)
        motion.retrain(cfg.svm_c)

    state = TrackerState(cfg, seed, app, motion, boxes[n], n, rngs)
    alpha = _alpha(cfg)
    for k in range(n + 1):
        ca = float(app.confidence(crop_many(frames[k], [boxes[k]], cfg.patch_size))[0])
        cm = 0.0
        if motion is not None:
            cm = float(motion.confidence(crop_many(rgbs[k], [boxes[k]], cfg.patch_size))[0])
        state.init_results.append(TrackResult(k, boxes[k], ca, cm, fuse(ca, cm, alpha)))
    return state


# ---------------------------------------------------------------------------
# per-frame tracking


def track_frame(state: TrackerState, frame: np.ndarray, prev_frame: np.ndarray) -> TrackResult:
    """Track one frame; a failure inside keeps the last box with zero confidence."""
    if frame.shape != prev_frame.shape:
        raise ValueError(f"frame shapes differ: {frame.shape} vs {prev_frame.shape}")
    index = state.frame_index + 1
    try:
        result = _track(state, frame, prev_frame, index)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("frame %d failed: %s", index, exc)
        result = TrackResult(index, state.last_box, 0.0, 0.0, 0.0, 1.0, Updates(False, False), True)
    state.last_box = result.box
    state.frame_index = index
    return result


def _track(state: TrackerState, frame, prev_frame, index) -> TrackResult:
    cfg = state.cfg
    app, motion = state.appearance, state.motion
    alpha = _alpha(cfg)
    rgb = None
    if motion is not None:
        state.last_flow, rgb = _flow_rgb(cfg, prev_frame, frame)

    cands = sample_candidates(state.last_box, cfg, state.rngs[_RNG_CAND], frame.shape[:2]).boxes
    ca = app.confidence(crop_many(frame, cands, cfg.patch_size))
    if motion is not None:
        cm = motion.confidence(crop_many(rgb, cands, cfg.patch_size))
        fused = alpha * ca + (1.0 - alpha) * cm
    else:
        cm = np.zeros_like(ca)
        fused = ca
    best = pick_candidate(fused, cands, state.last_box)
    conf_fused = float(fused[best])

    box, scale = scale_search(frame, cands[best], app, cfg)
    upd = should_update(index, conf_fused, cfg)
    # low-confidence frames would teach the appearance model its own drift;
    # motion keeps learning so it can follow direction changes
    upd = Updates(upd.motion and motion is not None,
                  upd.appearance and conf_fused >= cfg.confidence_threshold)
    if upd.motion:
        motion.add_samples(generate_training_samples(rgb, box, cfg, state.rngs[_RNG_MOT_SAMPLES], index))
        motion.retrain(cfg.svm_c)
    if upd.appearance:
        new = generate_training_samples(frame, box, cfg, state.rngs[_RNG_APP_SAMPLES], index)
        if cfg.finetune:
            app.weights, _ = F.finetune_fc(app.spec, app.weights, app.buffer.samples + new,
                                           cfg.finetune_epochs, cfg.finetune_lr,
                                           state.rngs[_RNG_FINETUNE])
            app.buffer.refresh_features(app.features(np.stack([s.patch for s in app.buffer.samples]))
                                        if len(app.buffer) else [])
        app.add_samples(new)
        app.retrain(cfg.svm_c)
    return TrackResult(index, box, float(ca[best]), float(cm[best]), conf_fused, scale, upd)


def run_sequence(frames, gt0: BoundingBox, cfg: TrackerConfig, seed: int = 0,
                 appearance_weights=None, motion_weights=None, on_frame=None) -> list[TrackResult]:
    """Initialize on the first frames and track to the end; one result per frame.

    ``frames`` may be any sequence supporting ``len`` and indexing (e.g. a
    lazy loader).  ``on_frame(state, result)`` is called after each tracked frame.
    """
    n = cfg.n_bootstrap_frames
    head = [frames[k] for k in range(min(len(frames), max(n + 1, 2)))]
    state = init_tracker(head, gt0, cfg, seed, appearance_weights, motion_weights)
    results = list(state.init_results)
    prev = head[n]
    for k in range(n + 1, len(frames)):
        frame = frames[k]
        res = track_frame(state, frame, prev)
        results.append(res)
        if on_frame is not None:
            on_frame(state, res)
        prev = frame
    return results


# ---------------------------------------------------------------------------
# results CSV


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_results_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(results_to_csv(results))


def results_to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in results:
        b = r.box
        w.writerow([r.frame_index, _fmt(b.cx), _fmt(b.cy), _fmt(b.w), _fmt(b.h),
                    _fmt(r.conf_app), _fmt(r.conf_motion), _fmt(r.conf_fused), _fmt(r.scale_applied),
                    int(r.updates.motion), int(r.updates.appearance)])
    return buf.getvalue()


def read_results_csv(path) -> list[TrackResult]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RESULTS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(RESULTS_HEADER)} fields")
            try:
                vals = [float(v) for v in row[1:9]]
                out.append(TrackResult(int(row[0]), BoundingBox(*vals[:4]), vals[4], vals[5], vals[6],
                                       vals[7], Updates(row[9] == "1", row[10] == "1")))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# state snapshot
#
# b"DTSNAP" u16 version, then length-prefixed (u32) sections in order:
#   config JSON, appearance weights (DTW1), motion weights (DTW1 or empty),
#   appearance SVM, motion SVM (empty when absent), metadata JSON.
# An SVM section is u32 dim then float64 LE: weights[dim], bias, calib_a, calib_b, C.


def _svm_bytes(m: SvmModel | None) -> bytes:
    if m is None:
        return b""
    vals = np.concatenate([m.weights, [m.bias, m.calib_a, m.calib_b, m.C]]).astype("<f8")
    return struct.pack("<I", m.dim) + vals.tobytes()


def _svm_from(data: bytes) -> SvmModel | None:
    if not data:
        return None
    (dim,) = struct.unpack_from("<I", data, 0)
    vals = np.frombuffer(data, dtype="<f8", count=dim + 4, offset=4).astype(np.float64)
    return SvmModel(vals[:dim].copy(), float(vals[dim]), float(vals[dim + 1]), float(vals[dim + 2]),
                    float(vals[dim + 3]))


def _buffer_meta(buf: SampleBuffer) -> list:
    return [[s.frame_index, s.label, list(s.source_box.as_tuple()), s.angle] for s in buf.samples]


def snapshot_bytes(state: TrackerState) -> bytes:
    meta = {
        "seed": state.seed,
        "frame_index": state.frame_index,
        "last_box": list(state.last_box.as_tuple()),
        "rng_states": [r.bit_generator.state for r in state.rngs],
        "buffers": {
            "appearance": {"capacity": state.appearance.buffer.capacity,
                           "evicted": state.appearance.buffer.evicted,
                           "samples": _buffer_meta(state.appearance.buffer)},
        },
    }
    if state.motion is not None:
        meta["buffers"]["motion"] = {"capacity": state.motion.buffer.capacity,
                                     "evicted": state.motion.buffer.evicted,
                                     "samples": _buffer_meta(state.motion.buffer)}
    sections = [
        json.dumps(state.cfg.to_dict(), sort_keys=True).encode(),
        F.weights_to_bytes(state.appearance.spec, state.appearance.weights),
        F.weights_to_bytes(state.motion.spec, state.motion.weights) if state.motion else b"",
        _svm_bytes(state.appearance.svm),
        _svm_bytes(state.motion.svm if state.motion else None),
        json.dumps(meta, sort_keys=True).encode(),
    ]
    out = [SNAPSHOT_MAGIC, struct.pack("<H", SNAPSHOT_VERSION)]
    for s in sections:
        out.append(struct.pack("<I", len(s)))
        out.append(s)
    return b"".join(out)


def read_snapshot(data: bytes) -> dict:
    """Decode a snapshot into its parts (config, weights, SVMs, metadata)."""
    if data[:6] != SNAPSHOT_MAGIC:
        raise ValueError("not a tracker snapshot (bad magic)")
    (version,) = struct.unpack_from("<H", data, 6)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    pos = 8
    sections = []
    for _ in range(6):
        (n,) = struct.unpack_from("<I", data, pos)
        sections.append(data[pos + 4:pos + 4 + n])
        pos += 4 + n
    cfg = TrackerConfig(**json.loads(sections[0]))
    spec = F.default_spec(cfg.patch_size, finetune=cfg.finetune)
    return {
        "version": version,
        "config": cfg,
        "appearance_weights": F.weights_from_bytes(sections[1], spec),
        "motion_weights": F.weights_from_bytes(sections[2], spec) if sections[2] else None,
        "appearance_svm": _svm_from(sections[3]),
        "motion_svm": _svm_from(sections[4]),
        "meta": json.loads(sections[5]),
    }
