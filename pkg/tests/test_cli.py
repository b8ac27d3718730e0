import json
import os
import subprocess
import sys

import numpy as np
import pytest

from gair.cli import main

TINY_DATA = {
    "count": 12,
    "seed": 7,
    "rs_size": 8,
    "sv_size": 8,
    "temporal_variants": 2,
}

TINY_TRAIN = {
    "batch_size": 4,
    "epochs": 1,
    "dim": 16,
    "rff_sigma": 10.0,
    "bank_capacity": 16,
}


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset plus a one-epoch pretrained checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    data_cfg = write_config(root, "data.json", TINY_DATA)
    ds = str(root / "ds")
    assert main(["--config", data_cfg, "gen-data", "--out", ds]) == 0
    train_cfg = write_config(root, "train.json", {**TINY_DATA, **TINY_TRAIN})
    run = str(root / "run")
    assert main(["--config", train_cfg, "pretrain", "--data", ds, "--out", run]) == 0
    return {"root": root, "ds": ds, "ckpt": os.path.join(run, "checkpoint.bin"), "run": run}


class TestGenData:
    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "d.json", TINY_DATA)
        for name in ("a", "b"):
            assert main(["--config", cfg, "gen-data", "--out", str(tmp_path / name)]) == 0
        blob_a = (tmp_path / "a" / "data.blob").read_bytes()
        blob_b = (tmp_path / "b" / "data.blob").read_bytes()
        assert blob_a == blob_b
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_zero_count_is_usage_error(self, tmp_path):
        assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "x")]) == 2

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "d.json", TINY_DATA)
        assert main(["--config", cfg, "gen-data", "--count", "3", "--out", str(tmp_path / "x")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["count"] == 3

    def test_unreadable_config_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert main(["--config", str(bad), "gen-data", "--out", str(tmp_path / "x")]) == 2


class TestPretrain:
    def test_writes_checkpoint_and_metrics(self, workspace):
        assert os.path.exists(workspace["ckpt"])
        metrics = [json.loads(line) for line in open(os.path.join(workspace["run"], "metrics.jsonl"))]
        assert len(metrics) == 3  # 12 records / batch 4, one epoch
        assert all({"incl", "secl", "total", "grad_norm", "grad_norm_loc", "lr", "step"} <= set(m) for m in metrics)

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3

    def test_lambda_zero_reports_zero_location_gradient(self, tmp_path, workspace):
        cfg = write_config(tmp_path, "t.json", {**TINY_DATA, **TINY_TRAIN})
        out = str(tmp_path / "run0")
        rc = main(["--config", cfg, "pretrain", "--data", workspace["ds"], "--out", out, "--lambda", "0.0"])
        assert rc == 0
        metrics = [json.loads(line) for line in open(os.path.join(out, "metrics.jsonl"))]
        assert all(m["grad_norm_loc"] == 0.0 for m in metrics)
        assert any(m["grad_norm"] > 0.0 for m in metrics)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path, workspace):
        cfg = write_config(tmp_path, "t.json", {**TINY_DATA, **TINY_TRAIN, "epochs": 2, "eval_every": 3})
        full = str(tmp_path / "full")
        assert main(["--config", cfg, "pretrain", "--data", workspace["ds"], "--out", full]) == 0
        # same run, but interrupted at the step-3 checkpoint and resumed
        part = str(tmp_path / "part")
        assert main(["--config", cfg, "pretrain", "--data", workspace["ds"], "--out", part]) == 0
        resumed = str(tmp_path / "resumed")
        rc = main(["--config", cfg, "pretrain", "--data", workspace["ds"], "--out", resumed,
                   "--resume", os.path.join(part, "ckpt_000003.bin")])
        assert rc == 0
        a = open(os.path.join(full, "checkpoint.bin"), "rb").read()
        b = open(os.path.join(resumed, "checkpoint.bin"), "rb").read()
        assert a == b


class TestEvaluate:
    def test_report_fields(self, workspace, tmp_path):
        out = str(tmp_path / "report.json")
        rc = main(["evaluate", "--checkpoint", workspace["ckpt"], "--data", workspace["ds"],
                   "--holdout", "8", "--probe", "linear", "--probe", "nonlinear", "--out", out])
        assert rc == 0
        report = json.loads(open(out).read())
        assert report["task"] == "sv_to_inr_rs_retrieval"
        assert 0.0 <= report["metrics"]["recall@1"] <= 1.0
        assert "probe_linear_accuracy" in report and "probe_nonlinear_accuracy" in report
        assert len(report["config_hash"]) == 16

    def test_corrupt_checkpoint_is_data_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.bin"
        data = bytearray(open(workspace["ckpt"], "rb").read())
        data[:8] = b"BADMAGIC"
        bad.write_bytes(bytes(data))
        assert main(["evaluate", "--checkpoint", str(bad), "--data", workspace["ds"]]) == 3


class TestHeatmap:
    def test_loc_mode_outputs(self, workspace, tmp_path, capsys):
        prefix = str(tmp_path / "hm")
        rc = main(["heatmap", "--checkpoint", workspace["ckpt"], "--data", workspace["ds"],
                   "--index", "2", "--mode", "loc", "--cells", "5", "--out", prefix])
        assert rc == 0
        info = json.loads(capsys.readouterr().out)
        rows = [line.split(",") for line in open(prefix + ".csv").read().splitlines()]
        vals = np.array([[float(x) for x in row] for row in rows])
        assert vals.shape == (5, 5)
        assert np.all(np.abs(vals) <= 1.0 + 1e-6)
        raw = open(prefix + ".pgm", "rb").read()
        assert raw.startswith(b"P5\n5 5\n255\n")
        pixels = np.frombuffer(raw[len(b"P5\n5 5\n255\n"):], dtype=np.uint8).reshape(5, 5)
        assert np.array_equal(pixels, np.clip(np.round((vals + 1) * 127.5), 0, 255).astype(np.uint8))
        assert info["argmax_cell"] == list(np.unravel_index(np.argmax(vals), vals.shape))

    def test_inr_mode_outputs(self, workspace, tmp_path):
        prefix = str(tmp_path / "hm_inr")
        rc = main(["heatmap", "--checkpoint", workspace["ckpt"], "--data", workspace["ds"],
                   "--index", "0", "--mode", "inr", "--resolution", "0.0025", "--out", prefix])
        assert rc == 0
        assert os.path.exists(prefix + ".csv") and os.path.exists(prefix + ".pgm")

    def test_deterministic(self, workspace, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for prefix in (a, b):
            assert main(["heatmap", "--checkpoint", workspace["ckpt"], "--data", workspace["ds"],
                         "--index", "1", "--out", prefix]) == 0
        assert open(a + ".csv").read() == open(b + ".csv").read()

    def test_index_out_of_range_is_usage_error(self, workspace, tmp_path):
        rc = main(["heatmap", "--checkpoint", workspace["ckpt"], "--data", workspace["ds"],
                   "--index", "99", "--out", str(tmp_path / "x")])
        assert rc == 2


class TestGradcheck:
    def test_audit_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "pass" in out and "FAIL" not in out

    def test_planted_fault_is_detected(self):
        env = dict(os.environ, GAIR_FAULT_OP="matmul")
        proc = subprocess.run([sys.executable, "-m", "gair.cli", "gradcheck"],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 1
        assert "FAIL" in proc.stdout

    def test_threads_cap_env(self):
        env = dict(os.environ, GAIR_THREADS="1")
        proc = subprocess.run([sys.executable, "-m", "gair.cli", "gradcheck"],
                              capture_output=True, text=True, env=env)
        assert proc.returncode == 0


class TestUsage:
    def test_no_command_is_usage_error(self):
        assert main([]) == 2

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 2
