"""``dt`` command line: track, eval, synth, weights."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import features as F
from .core import TrackerConfig, load_image, make_rng, parse_value, save_image
from .evaluation import (Curve, aggregate, curve_auc, load_sequence, precision_curve,
                         score_sequence, success_curve)

log = logging.getLogger("dualtrack")

# run-level keys accepted in a config file next to the tracker keys
RUN_KEYS = {"seed": int, "appearance_weights": str, "motion_weights": str}
ALIASES = {"alpha": "fusion_weight_appearance"}

KEY_HELP = {
    "n_bootstrap_frames": "frames tracked by template matching before the learned tracker",
    "pos_per_frame": "positive training samples per frame",
    "neg_per_frame": "negative training samples per frame",
    "neg_max_target_fraction": "max share of the target a negative may cover",
    "candidate_count": "candidate boxes per frame (the previous box included)",
    "candidate_sigma_factor": "candidate spread relative to sqrt(w*h)",
    "motion_update_period": "frames between motion model updates",
    "appearance_update_period": "frames between scheduled appearance updates",
    "confidence_threshold": "fused confidence below which the appearance model updates",
    "n_scales": "number of scales tried per frame",
    "scale_step": "ratio between neighbouring scales",
    "fusion_weight_appearance": "appearance weight in late fusion (alias: alpha)",
    "patch_size": "network input size in pixels",
    "positive_iou": "minimum overlap of a positive sample with the target",
    "buffer_capacity": "samples kept per stream (oldest evicted first)",
    "svm_c": "SVM regularization constant",
    "use_motion": "enable the optical-flow stream",
    "flow_max_magnitude": "flow magnitude mapped to full saturation (0 = auto)",
    "finetune": "fine-tune the fully connected layers on tracker samples",
    "finetune_epochs": "epochs per fine-tuning round",
    "finetune_lr": "fine-tuning learning rate",
}


class CliError(Exception):
    pass


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tracker settings (override the config file)")
    defaults = TrackerConfig()
    for f in fields(TrackerConfig):
        default = getattr(defaults, f.name)
        shown = str(default).lower() if isinstance(default, bool) else default
        g.add_argument(_flag(f.name), dest=f.name, default=None, metavar="V",
                       help=f"{KEY_HELP.get(f.name, f.name)} (default: {shown})")
    g.add_argument("--alpha", dest="alpha", default=None, metavar="V",
                   help="alias for --fusion-weight-appearance")


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    known = {f.name for f in fields(TrackerConfig)} | set(RUN_KEYS) | set(ALIASES)
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        out[ALIASES.get(key, key)] = value
    return out


def resolve_run(args) -> tuple[TrackerConfig, dict]:
    """Merge config file, flags and DT_SEED; flags win over the file."""
    values = read_config_file(args.config) if args.config else {}
    for f in fields(TrackerConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "alpha", None) is not None:
        values["fusion_weight_appearance"] = args.alpha
    for key in RUN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    run = {}
    for key, kind in RUN_KEYS.items():
        if key in values:
            run[key] = parse_value(values.pop(key), kind, key)
    if "seed" not in run:
        env = os.environ.get("DT_SEED")
        run["seed"] = parse_value(env, int, "DT_SEED") if env else 0
    cfg = TrackerConfig.from_mapping(values)
    return cfg, run


class FrameList:
    """Lazy frame loader indexed like a list."""

    def __init__(self, paths):
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, k):
        return load_image(self.paths[k])


def _draw_box(img: np.ndarray, box, colour=(1.0, 0.1, 0.1)) -> np.ndarray:
    out = img.copy()
    h, w = out.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box.extent())
    x1, x2 = np.clip([x1, x2 - 1], 0, w - 1)
    y1, y2 = np.clip([y1, y2 - 1], 0, h - 1)
    out[y1, x1:x2 + 1] = colour
    out[y2, x1:x2 + 1] = colour
    out[y1:y2 + 1, x1] = colour
    out[y1:y2 + 1, x2] = colour
    return out


def cmd_track(args) -> int:
    from .flow import write_flo
    from .tracker import run_sequence, snapshot_bytes, write_results_csv

    cfg, run = resolve_run(args)
    paths, gt = load_sequence(args.manifest)
    if 0 not in gt.entries:
        raise CliError("ground truth has no box for the first frame")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = FrameList(paths)
    if args.dump_flow:
        (out / "flow").mkdir(exist_ok=True)
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
    last_state = {}

    def on_frame(state, res):
        last_state["s"] = state
        if args.dump_flow and state.last_flow is not None:
            write_flo(out / "flow" / f"{res.frame_index:08d}.flo", state.last_flow)
        if args.overlays:
            save_image(out / "overlays" / f"{res.frame_index:08d}.png",
                       _draw_box(frames[res.frame_index], res.box))
        log.info("frame %d conf %.3f", res.frame_index, res.conf_fused)

    results = run_sequence(frames, gt.entries[0], cfg, seed=run["seed"],
                           appearance_weights=run.get("appearance_weights"),
                           motion_weights=run.get("motion_weights"), on_frame=on_frame)
    if args.overlays:
        for r in results[:cfg.n_bootstrap_frames + 1]:
            save_image(out / "overlays" / f"{r.frame_index:08d}.png", _draw_box(frames[r.frame_index], r.box))
    write_results_csv(out / "results.csv", results)
    if args.snapshot and "s" in last_state:
        (out / "snapshot.dtsnap").write_bytes(snapshot_bytes(last_state["s"]))
    failed = sum(r.failed for r in results)
    print(f"tracked {len(results)} frames -> {out / 'results.csv'}" + (f" ({failed} failed)" if failed else ""))
    return 0


def _mean_curve(curves: list[Curve]) -> Curve:
    t = curves[0].thresholds
    v = np.mean([c.values for c in curves], axis=0)
    return Curve(t, v, curve_auc(t, v))


def cmd_eval(args) -> int:
    from . import plotting
    from .tracker import read_results_csv

    if len(args.results) != len(args.manifest):
        raise CliError("give one --manifest per --results")
    scored = []
    for res_path, man in zip(args.results, args.manifest):
        _, gt = load_sequence(man)
        results = read_results_csv(res_path)
        scored.append((score_sequence(str(man), results, gt), results, gt))
    summary = aggregate([s for s, _, _ in scored], args.attribute)
    chosen = [(r, g) for s, r, g in scored if args.attribute is None or args.attribute in s.attributes]
    succ = _mean_curve([success_curve(r, g) for r, g in chosen])
    prec = _mean_curve([precision_curve(r, g) for r, g in chosen])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "f_score.txt").write_text(f"{summary['f']:.6f}\n")
    plotting.write_success(out, succ)
    plotting.write_precision(out, prec)
    print(f"F={summary['f']:.3f} success_auc={succ.auc:.3f} precision_auc={prec.auc:.3f} "
          f"precision@20={summary['precision_20']:.3f} sequences={summary['sequences']}")
    return 0


def cmd_synth(args) -> int:
    from .synth import SCENARIOS, make_sequence, write_sequence

    if args.scenario not in SCENARIOS:
        raise CliError(f"unknown scenario {args.scenario!r}; valid: {', '.join(SCENARIOS)}")
    seed = args.seed
    if seed is None:
        env = os.environ.get("DT_SEED")
        seed = parse_value(env, int, "DT_SEED") if env else 0
    seq = make_sequence(args.scenario, args.frames, seed, args.width, args.height, args.target_size)
    manifest = write_sequence(seq, args.out)
    print(f"wrote {len(seq.frames)} frames -> {manifest}")
    return 0


def cmd_weights_describe(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise CliError(f"weights file not found: {path}")
    header = F.read_header(path.read_bytes())
    names = {F.CODE_CONV: "conv", F.CODE_FC: "fc"}
    total = 0
    for i, (code, dims) in enumerate(header):
        n = int(np.prod(dims)) + (dims[-1] if dims else 0)
        total += n
        print(f"{i:2d} {names[code]:<4} kernel={'x'.join(map(str, dims)):<16} params={n}")
    print(f"layers={len(header)} params={total}")
    return 0


def cmd_weights_init(args) -> int:
    seed = args.seed
    if seed is None:
        env = os.environ.get("DT_SEED")
        seed = parse_value(env, int, "DT_SEED") if env else 0
    spec = F.default_spec(args.patch_size, finetune=args.finetune)
    F.save_weights(args.out, spec, F.init_weights(spec, make_rng(seed)))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dt", description="Two-stream tracking-by-detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track a sequence and write results.csv")
    t.add_argument("--manifest", required=True, help="sequence manifest (key=value lines)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--seed", default=None, help="run seed (falls back to config, then DT_SEED, then 0)")
    t.add_argument("--appearance-weights", dest="appearance_weights", default=None,
                   help="DTW1 weights for the appearance network (random init if omitted)")
    t.add_argument("--motion-weights", dest="motion_weights", default=None,
                   help="DTW1 weights for the motion network (random init if omitted)")
    t.add_argument("--dump-flow", action="store_true", help="write flow/<frame>.flo per tracked frame")
    t.add_argument("--overlays", action="store_true", help="write overlays/<frame>.png with the box drawn")
    t.add_argument("--snapshot", action="store_true", help="write snapshot.dtsnap with the final state")
    _add_config_flags(t)
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("--results", action="append", required=True, help="results.csv (repeatable)")
    e.add_argument("--manifest", action="append", required=True, help="manifest per results file")
    e.add_argument("--out", default=".", help="output directory for curves and f_score.txt")
    e.add_argument("--attribute", default=None, help="only sequences tagged with this attribute")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("scenario", help="static, translate, illumination, occlusion or scale")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=192)
    s.add_argument("--height", type=int, default=144)
    s.add_argument("--target-size", dest="target_size", type=float, default=32.0)
    s.set_defaults(func=cmd_synth)

    w = sub.add_parser("weights", help="inspect or create DTW1 weights files")
    wsub = w.add_subparsers(dest="weights_command", required=True)
    d = wsub.add_parser("describe", help="list the layers of a weights file")
    d.add_argument("path")
    d.set_defaults(func=cmd_weights_describe)
    i = wsub.add_parser("init", help="write randomly initialized weights")
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--patch-size", dest="patch_size", type=int, default=64)
    i.add_argument("--finetune", action="store_true", help="include the two-way classifier head")
    i.set_defaults(func=cmd_weights_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, ArithmeticError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dt: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
