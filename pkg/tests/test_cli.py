import csv
import shutil
import subprocess
from dataclasses import fields

import numpy as np
import pytest

from dualtrack import features as F
from dualtrack.cli import main, read_config_file, resolve_run
from dualtrack.core import BoundingBox, TrackerConfig, make_rng
from dualtrack.evaluation import load_otb
from dualtrack.tracker import RESULTS_HEADER, TrackResult, write_results_csv

QUICK = ["--patch-size", "32", "--candidate-count", "24"]


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert main(["synth", "translate", "--frames", "8", "--seed", "7", "--out", str(d)]) == 0
    return d


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestSynth:
    def test_contract(self, seq_dir):
        pngs = sorted(seq_dir.glob("*.png"))
        assert [p.name for p in pngs] == [f"{k:08d}.png" for k in range(1, 9)]
        assert len(load_otb(seq_dir / "groundtruth_rect.txt")) == 8
        assert "gt_format=otb" in (seq_dir / "manifest.txt").read_text()

    def test_static_gt_constant(self, tmp_path, capsys):
        code, _, _ = run(["synth", "static", "--frames", "6", "--seed", "1", "--out", str(tmp_path)], capsys)
        lines = (tmp_path / "groundtruth_rect.txt").read_text().split()
        assert code == 0 and len(set(lines)) == 1 and len(lines) == 6

    def test_scale_widths(self, tmp_path, capsys):
        run(["synth", "scale", "--frames", "11", "--seed", "2", "--out", str(tmp_path)], capsys)
        gt = load_otb(tmp_path / "groundtruth_rect.txt")
        w0 = gt[0].w
        for k in range(11):
            assert gt[k].w == pytest.approx(w0 * (1 + 0.5 * k / 10), abs=1e-9)

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(["synth", "occlusion", "--frames", "4", "--seed", "3", "--out", str(tmp_path / name)], capsys)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_unknown_scenario(self, tmp_path, capsys):
        code, _, err = run(["synth", "zoom", "--out", str(tmp_path)], capsys)
        assert code == 1 and "static" in err and "scale" in err and err.startswith("dt: error:")


class TestTrack:
    def test_results_and_determinism(self, seq_dir, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            code, _, _ = run(["track", "--manifest", str(seq_dir / "manifest.txt"), "--out", str(tmp_path / name),
                              "--seed", "4", *QUICK], capsys)
            assert code == 0
            outs.append((tmp_path / name / "results.csv").read_bytes())
        assert outs[0] == outs[1]
        rows = list(csv.reader(outs[0].decode().splitlines()))
        assert rows[0] == RESULTS_HEADER and len(rows) == 9

    def test_optional_outputs(self, seq_dir, tmp_path, capsys):
        code, _, _ = run(["track", "--manifest", str(seq_dir / "manifest.txt"), "--out", str(tmp_path),
                          "--dump-flow", "--overlays", "--snapshot", *QUICK], capsys)
        assert code == 0
        assert len(list((tmp_path / "flow").glob("*.flo"))) == 3  # frames after bootstrap
        assert len(list((tmp_path / "overlays").glob("*.png"))) == 8
        assert (tmp_path / "snapshot.dtsnap").read_bytes()[:6] == b"DTSNAP"

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(["track", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)], capsys)
        assert code == 1 and "nope.txt" in err and len(err.strip().splitlines()) == 1

    def test_bad_config_value(self, seq_dir, tmp_path, capsys):
        code, _, err = run(["track", "--manifest", str(seq_dir / "manifest.txt"), "--out", str(tmp_path),
                            "--n-scales", "many"], capsys)
        assert code == 1 and "n_scales" in err

    def test_help_lists_every_key_and_default(self, capsys):
        with pytest.raises(SystemExit):
            main(["track", "--help"])
        text = " ".join(capsys.readouterr().out.split())
        d = TrackerConfig()
        for f in fields(TrackerConfig):
            v = getattr(d, f.name)
            shown = str(v).lower() if isinstance(v, bool) else str(v)
            assert "--" + f.name.replace("_", "-") in text
            assert f"(default: {shown})" in text
        assert "--seed" in text and "--alpha" in text

    def test_console_script(self):
        exe = shutil.which("dt")
        assert exe, "console script not installed"
        p = subprocess.run([exe, "weights", "--help"], capture_output=True, text=True)
        assert p.returncode == 0 and "describe" in p.stdout


class _Args:
    def __init__(self, **kw):
        self.config = None
        self.seed = None
        self.appearance_weights = None
        self.motion_weights = None
        self.alpha = None
        for f in fields(TrackerConfig):
            setattr(self, f.name, None)
        self.__dict__.update(kw)


class TestConfig:
    def test_flags_override_file(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DT_SEED", raising=False)
        cfg_file = tmp_path / "c.txt"
        cfg_file.write_text("# sweep\ncandidate_count = 64\nalpha=0.3\nseed=9\nsvm_c=2  # stronger\n")
        cfg, run = resolve_run(_Args(config=cfg_file, candidate_count="12"))
        assert cfg.candidate_count == 12 and cfg.svm_c == 2.0
        assert cfg.fusion_weight_appearance == 0.3 and run["seed"] == 9

    def test_seed_fallbacks(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DT_SEED", "21")
        assert resolve_run(_Args())[1]["seed"] == 21
        assert resolve_run(_Args(seed="5"))[1]["seed"] == 5
        monkeypatch.delenv("DT_SEED")
        assert resolve_run(_Args())[1]["seed"] == 0

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("candidate_count=3\nwobble=1\n")
        with pytest.raises(Exception, match=":2: unknown config key"):
            read_config_file(tmp_path / "c.txt")


class TestEval:
    def _results(self, seq_dir, tmp_path, shift_every_other):
        gt = load_otb(seq_dir / "groundtruth_rect.txt")
        res = []
        for k in sorted(gt):
            b = gt[k].shifted(100, 0) if shift_every_other and k % 2 else gt[k]
            res.append(TrackResult(k, b, 1.0, 1.0, 1.0))
        path = tmp_path / ("half.csv" if shift_every_other else "perfect.csv")
        write_results_csv(path, res)
        return path

    def test_perfect(self, seq_dir, tmp_path, capsys):
        r = self._results(seq_dir, tmp_path, False)
        code, out, _ = run(["eval", "--results", str(r), "--manifest", str(seq_dir / "manifest.txt"),
                            "--out", str(tmp_path / "ev")], capsys)
        assert code == 0 and out.startswith("F=1.000 ")
        for name in ("f_score.txt", "success.csv", "precision.csv", "success.svg", "precision.svg"):
            assert (tmp_path / "ev" / name).is_file()
        assert (tmp_path / "ev" / "success.csv").read_text().splitlines()[0] == "threshold,value"

    def test_half(self, seq_dir, tmp_path, capsys):
        r = self._results(seq_dir, tmp_path, True)
        code, out, _ = run(["eval", "--results", str(r), "--manifest", str(seq_dir / "manifest.txt"),
                            "--out", str(tmp_path / "ev")], capsys)
        assert code == 0 and out.startswith("F=0.500 ")
        assert (tmp_path / "ev" / "f_score.txt").read_text().strip() == "0.500000"

    def test_svg_deterministic(self, seq_dir, tmp_path, capsys):
        r = self._results(seq_dir, tmp_path, True)
        for name in ("a", "b"):
            run(["eval", "--results", str(r), "--manifest", str(seq_dir / "manifest.txt"),
                 "--out", str(tmp_path / name)], capsys)
        assert (tmp_path / "a" / "success.svg").read_bytes() == (tmp_path / "b" / "success.svg").read_bytes()

    def test_attribute_no_match(self, seq_dir, tmp_path, capsys):
        r = self._results(seq_dir, tmp_path, False)
        code, _, err = run(["eval", "--results", str(r), "--manifest", str(seq_dir / "manifest.txt"),
                            "--attribute", "occlusion", "--out", str(tmp_path)], capsys)
        assert code == 1 and "no sequences match" in err

    def test_attribute_match(self, seq_dir, tmp_path, capsys):
        r = self._results(seq_dir, tmp_path, False)
        code, out, _ = run(["eval", "--results", str(r), "--manifest", str(seq_dir / "manifest.txt"),
                            "--attribute", "fast_motion", "--out", str(tmp_path)], capsys)
        assert code == 0 and "sequences=1" in out


class TestWeights:
    def test_init_and_describe(self, tmp_path, capsys):
        path = tmp_path / "w.dtw"
        code, _, _ = run(["weights", "init", "--out", str(path), "--seed", "3", "--patch-size", "32"], capsys)
        assert code == 0 and path.read_bytes()[:4] == b"DTW1"
        code, out, _ = run(["weights", "describe", str(path)], capsys)
        spec = F.default_spec(32)
        expect = sum(k.size + b.size for k, b in (p for p in F.init_weights(spec, make_rng(0)).params if p))
        assert code == 0 and out.strip().endswith(f"params={expect}")
        assert "conv" in out.lower() and "fc" in out.lower()

    def test_describe_rejects_garbage(self, tmp_path, capsys):
        (tmp_path / "bad.dtw").write_bytes(b"XXXX" + bytes(16))
        code, _, err = run(["weights", "describe", str(tmp_path / "bad.dtw")], capsys)
        assert code == 1 and err.startswith("dt: error:")

    def test_weights_used_by_track(self, seq_dir, tmp_path, capsys):
        w = tmp_path / "w.dtw"
        run(["weights", "init", "--out", str(w), "--seed", "8", "--patch-size", "32"], capsys)
        code, _, _ = run(["track", "--manifest", str(seq_dir / "manifest.txt"), "--out", str(tmp_path / "o"),
                          "--appearance-weights", str(w), "--motion-weights", str(w), *QUICK], capsys)
        assert code == 0 and (tmp_path / "o" / "results.csv").is_file()
