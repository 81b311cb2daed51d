import json

import numpy as np
import pytest

from thermodet import cli, detect, graph, thermal_io as tio
from thermodet.detect import Detection


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def synth_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    train_dir, val_dir = root / "train", root / "val"
    assert run_cli(
        "synth", "--out", str(train_dir), "--frames", "30", "--persons", "1",
        "--sequences", "2", "--noise", "0.05", "--seed", "3",
    ) == 0
    assert run_cli(
        "synth", "--out", str(val_dir), "--frames", "20", "--persons", "1",
        "--noise", "0.05", "--seed", "9",
    ) == 0
    return train_dir, val_dir


@pytest.fixture(scope="module")
def trained_model(synth_dirs, tmp_path_factory):
    train_dir, val_dir = synth_dirs
    out = tmp_path_factory.mktemp("models") / "model.bin"
    code = run_cli(
        "train", "--data", str(train_dir), "--val", str(val_dir),
        "--out", str(out), "--iters", "60", "--batch", "4",
        "--val-cadence", "30", "--widths", "4,6,8", "--seed", "0",
    )
    assert code == 0
    return out


class TestSynth:
    def test_writes_frames_and_manifest(self, synth_dirs):
        train_dir, val_dir = synth_dirs
        assert (val_dir / "annotations.jsonl").exists()
        assert len(list(val_dir.glob("frame_*.tiff"))) == 20
        manifest = json.loads((val_dir / "manifest.json").read_text())
        assert manifest["seed"] == 9
        assert (train_dir / "seq_000" / "annotations.jsonl").exists()
        assert (train_dir / "seq_001").is_dir()

    def test_invalid_config_exit_code(self, tmp_path):
        code = run_cli(
            "synth", "--out", str(tmp_path / "x"), "--ambient", "40",
            "--person-lo", "30", "--person-hi", "35",
        )
        assert code == cli.EXIT_CODES["config"]


class TestTrain:
    def test_model_written_with_manifest(self, trained_model):
        kind, model = cli.load_model(trained_model)
        assert kind == "f32"
        assert model.layers[-1].out_channels == 25
        manifest = json.loads(
            trained_model.with_name("model.bin.manifest.json").read_text()
        )
        assert manifest["settings"]["train"]["max_iters"] == 60
        assert "inputs" in manifest

    def test_config_file_overridden_by_flags(self, synth_dirs, tmp_path):
        train_dir, val_dir = synth_dirs
        cfg = tmp_path / "conf.ini"
        cfg.write_text("[train]\nmax_iters = 20\nbatch_size = 2\nval_cadence = 10\n"
                       "[model]\nwidths = 4,6\n")
        out = tmp_path / "m.bin"
        assert run_cli(
            "train", "--data", str(train_dir), "--val", str(val_dir),
            "--out", str(out), "--config", str(cfg), "--iters", "10",
        ) == 0
        manifest = json.loads(out.with_name("m.bin.manifest.json").read_text())
        assert manifest["settings"]["train"]["max_iters"] == 10
        assert manifest["settings"]["train"]["batch_size"] == 2


class TestReport:
    def test_prints_table(self, trained_model, capsys, tmp_path):
        csv_path = tmp_path / "report.csv"
        assert run_cli("report", "--model", str(trained_model), "--csv", str(csv_path)) == 0
        out = capsys.readouterr().out
        assert "conv3x3" in out and "total" in out and "arena" in out
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "layer,kind,in,out,stride,params,macs"
        # 6 layers (widths 4,6,8) + total + two arena summary rows
        assert len(lines) == 6 + 3 + 1
        assert any("arena_int8_bytes" in l for l in lines)


class TestDetectEval:
    def test_detect_writes_jsonl_and_timing(self, trained_model, synth_dirs, tmp_path):
        _, val_dir = synth_dirs
        dets = tmp_path / "dets.jsonl"
        timing = tmp_path / "timing.csv"
        assert run_cli(
            "detect", "--model", str(trained_model), "--input", str(val_dir),
            "--out", str(dets), "--conf", "0.3", "--timing", str(timing),
        ) == 0
        assert dets.exists() and timing.exists()
        assert timing.read_text().startswith("frame,normalize_bg_sub")

    def test_executor_mismatch(self, trained_model, synth_dirs, tmp_path):
        _, val_dir = synth_dirs
        code = run_cli(
            "detect", "--model", str(trained_model), "--input", str(val_dir),
            "--out", str(tmp_path / "d.jsonl"), "--executor", "int8",
        )
        assert code == cli.EXIT_CODES["config"]

    def test_eval_perfect_detections(self, synth_dirs, tmp_path, capsys):
        _, val_dir = synth_dirs
        boxes = tio.read_annotations(val_dir / "annotations.jsonl")
        per_frame = {}
        for b in boxes:
            per_frame.setdefault(b.frame_index, []).append(
                Detection.from_xywh(*map(float, (b.x, b.y, b.w, b.h)), 0.9)
            )
        dets_path = tmp_path / "perfect.jsonl"
        detect.write_detections(
            dets_path, [per_frame.get(i, []) for i in range(20)]
        )
        assert run_cli(
            "eval", "--dets", str(dets_path), "--gt",
            str(val_dir / "annotations.jsonl"), "--pr-csv", str(tmp_path / "pr.csv"),
        ) == 0
        out = capsys.readouterr().out
        assert "F1 100.00%" in out
        assert "AP 100.00%" in out
        assert (tmp_path / "pr.csv").exists()

    def test_eval_missing_file_exit_code(self, tmp_path):
        code = run_cli(
            "eval", "--dets", str(tmp_path / "none.jsonl"), "--gt",
            str(tmp_path / "none2.jsonl"),
        )
        assert code == 2

    def test_eval_plot(self, synth_dirs, tmp_path):
        pytest.importorskip("matplotlib")
        _, val_dir = synth_dirs
        boxes = tio.read_annotations(val_dir / "annotations.jsonl")
        per_frame = {}
        for b in boxes:
            per_frame.setdefault(b.frame_index, []).append(
                Detection.from_xywh(*map(float, (b.x, b.y, b.w, b.h)), 0.8)
            )
        dets_path = tmp_path / "d.jsonl"
        detect.write_detections(dets_path, [per_frame.get(i, []) for i in range(20)])
        plot = tmp_path / "pr.png"
        assert run_cli(
            "eval", "--dets", str(dets_path), "--gt",
            str(val_dir / "annotations.jsonl"), "--plot", str(plot),
        ) == 0
        assert plot.stat().st_size > 0


class TestPruneQuantizeCli:
    def test_structural_prune(self, trained_model, tmp_path):
        out_dir = tmp_path / "pruned"
        assert run_cli(
            "prune", "--model", str(trained_model), "--out-dir", str(out_dir),
            "--iters", "3", "--structural-only",
        ) == 0
        assert (out_dir / "pruned.bin").exists()
        assert (out_dir / "ledger.csv").exists()
        assert len(list(out_dir.glob("prune_*.bin"))) == 3
        _, pruned = cli.load_model(out_dir / "pruned.bin")
        _, orig = cli.load_model(trained_model)
        assert graph.count_params(pruned) < graph.count_params(orig)

    def test_quantize_then_int8_detect(self, trained_model, synth_dirs, tmp_path, capsys):
        _, val_dir = synth_dirs
        qpath = tmp_path / "model.q8"
        assert run_cli(
            "quantize", "--model", str(trained_model), "--calib", str(val_dir),
            "--out", str(qpath), "--count", "10",
        ) == 0
        kind, qm = cli.load_model(qpath)
        assert kind == "int8"
        dets = tmp_path / "dets8.jsonl"
        assert run_cli(
            "detect", "--model", str(qpath), "--input", str(val_dir),
            "--out", str(dets), "--executor", "int8", "--conf", "0.3",
        ) == 0
        assert "int8 executor" in capsys.readouterr().out

    def test_report_on_quantized(self, trained_model, synth_dirs, tmp_path, capsys):
        _, val_dir = synth_dirs
        qpath = tmp_path / "m.q8"
        run_cli("quantize", "--model", str(trained_model), "--calib", str(val_dir),
                "--out", str(qpath), "--count", "4")
        assert run_cli("report", "--model", str(qpath)) == 0
        assert "arena int8" in capsys.readouterr().out


class TestUsage:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_unknown_model_magic(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = run_cli("report", "--model", str(bad))
        assert code == cli.EXIT_CODES["format"]


class TestFullChain:
    def test_synth_train_prune_quantize_detect_eval(self, tmp_path, capsys):
        """The whole toolchain, desk-sized, on one artifact lineage."""
        data, val = tmp_path / "data", tmp_path / "val"
        assert run_cli("synth", "--out", str(data), "--sequences", "3",
                       "--frames", "25", "--noise", "0.05", "--seed", "50") == 0
        assert run_cli("synth", "--out", str(val), "--frames", "20",
                       "--noise", "0.05", "--seed", "77") == 0
        model = tmp_path / "m.bin"
        assert run_cli("train", "--data", str(data), "--val", str(val),
                       "--out", str(model), "--iters", "40", "--batch", "4",
                       "--val-cadence", "20", "--widths", "4,6,8") == 0
        pruned_dir = tmp_path / "pruned"
        assert run_cli("prune", "--model", str(model), "--out-dir", str(pruned_dir),
                       "--iters", "2", "--structural-only") == 0
        q = tmp_path / "m.q8"
        assert run_cli("quantize", "--model", str(pruned_dir / "pruned.bin"),
                       "--calib", str(val), "--out", str(q), "--count", "6") == 0
        dets = tmp_path / "dets.jsonl"
        assert run_cli("detect", "--model", str(q), "--input", str(val),
                       "--out", str(dets), "--conf", "0.2") == 0
        assert run_cli("eval", "--dets", str(dets), "--gt",
                       str(val / "annotations.jsonl")) == 0
        out = capsys.readouterr().out
        assert "AP" in out and "F1" in out


class TestKernelEnvFlag:
    def test_numpy_fallback_selected(self):
        import subprocess
        import sys as _sys

        code = (
            "from thermodet.kernels import KERNEL_BACKEND; "
            "print(KERNEL_BACKEND)"
        )
        out = subprocess.run(
            [_sys.executable, "-c", code],
            env={"PATH": "/usr/bin:/bin", "THERMODET_KERNELS": "numpy"},
            capture_output=True, text=True, cwd="/",
        )
        assert out.stdout.strip() == "numpy"

    def test_invalid_value_rejected(self):
        import subprocess
        import sys as _sys

        code = "import thermodet.kernels"
        out = subprocess.run(
            [_sys.executable, "-c", code],
            env={"PATH": "/usr/bin:/bin", "THERMODET_KERNELS": "cuda"},
            capture_output=True, text=True, cwd="/",
        )
        assert out.returncode != 0
        assert "THERMODET_KERNELS" in out.stderr
