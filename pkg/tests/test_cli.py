import io

import numpy as np
import pytest

from gptensor.cli import main
from gptensor.config import RunConfig, build_config, parse_config_file
from gptensor.sptensor import parse_coo


def run(argv):
    return main(argv)


def synth_args(out, mode="continuous", dims="8,8", density="0.2", seed="3", extra=()):
    return [
        "synth",
        "--mode",
        mode,
        "--dims",
        dims,
        "--density",
        density,
        "--n-test",
        "30",
        "--seed",
        seed,
        "--out",
        str(out),
        *extra,
    ]


class TestConfigFile:
    def test_parse_and_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("mode=binary\nrank=2,2\np=7\nseed=5  # inline comment\n")
        values = parse_config_file(cfg)
        assert values == {"mode": "binary", "rank": (2, 2), "num_inducing": 7, "seed": 5}
        merged = build_config(str(cfg), {"seed": 9, "tasks": None})
        assert merged.seed == 9
        assert merged.num_inducing == 7
        assert merged.mode == "binary"

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("warp_speed=9\n")
        with pytest.raises(ValueError, match="unknown key"):
            parse_config_file(cfg)

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError, match="optimizer"):
            build_config(None, {"optimizer": "adam"})
        with pytest.raises(ValueError, match="positive"):
            build_config(None, {"rank": "0"})
        with pytest.raises(ValueError, match="mode"):
            build_config(None, {"mode": "ternary"})

    def test_echo_lists_every_field(self):
        lines = RunConfig().echo_lines()
        keys = {line.split("=", 1)[0] for line in lines}
        assert {"mode", "rank", "num_inducing", "tasks", "seed", "optimizer"} <= keys


class TestSynth:
    def test_density_count_and_determinism(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(synth_args(out1, dims="30,30", density="0.05")) == 0
        assert run(synth_args(out2, dims="30,30", density="0.05")) == 0
        train = (out1 / "train.coo").read_text()
        # 45 designated nonzero cells before balancing, 90 entries written
        assert parse_coo(io.StringIO(train)).num_entries == 90
        assert train == (out2 / "train.coo").read_text()
        assert (out1 / "test.coo").read_text() == (out2 / "test.coo").read_text()

    def test_binary_labels_balanced(self, tmp_path):
        out = tmp_path / "bin"
        assert run(synth_args(out, mode="binary", dims="12,12", density="0.3")) == 0
        tensor = parse_coo(io.StringIO((out / "train.coo").read_text()))
        frac = float(np.mean(tensor.values))
        assert 0.2 < frac < 0.8


class TestPipeline:
    @pytest.mark.parametrize("mode", ["continuous", "binary"])
    def test_round_trip_emits_finite_metric(self, tmp_path, mode):
        out = tmp_path / mode
        assert run(synth_args(out, mode=mode, dims="10,10", density="0.25")) == 0
        train_args = [
            "train",
            "--mode",
            mode,
            "--train",
            str(out / "train.coo"),
            "--rank",
            "2",
            "--p",
            "6",
            "--max-iters",
            "15",
            "--seed",
            "0",
            "--out",
            str(out),
        ]
        assert run(train_args) == 0
        assert (out / "checkpoint.bin").exists()
        log_lines = (out / "train_log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) >= 2
        import json

        for line in log_lines:
            record = json.loads(line)
            assert {"iteration", "elbo", "grad_norm", "inner_iters", "seconds"} <= set(record)
        predict_args = [
            "predict",
            "--mode",
            mode,
            "--checkpoint",
            str(out / "checkpoint.bin"),
            "--train",
            str(out / "train.coo"),
            "--out",
            str(out),
            str(out / "test.coo"),
        ]
        assert run(predict_args) == 0
        eval_args = [
            "eval",
            "--mode",
            mode,
            "--out",
            str(out),
            str(out / "predictions.coo"),
            str(out / "test.coo"),
        ]
        assert run(eval_args) == 0
        metrics = (out / "metrics.txt").read_text()
        key = "auc=" if mode == "binary" else "mse="
        value = next(l for l in metrics.splitlines() if l.startswith(key))
        assert np.isfinite(float(value.split("=", 1)[1]))
        assert "n_entries=30" in metrics

    def test_rerun_is_bit_identical(self, tmp_path, monkeypatch):
        # identical configs with relative paths, executed in separate cwds
        outs = []
        for name in ("r1", "r2"):
            cwd = tmp_path / name
            cwd.mkdir()
            monkeypatch.chdir(cwd)
            run(synth_args("out", dims="10,10", density="0.25"))
            run(
                [
                    "train",
                    "--train",
                    "out/train.coo",
                    "--rank",
                    "2",
                    "--p",
                    "5",
                    "--max-iters",
                    "10",
                    "--seed",
                    "1",
                    "--tasks",
                    "1",
                    "--out",
                    "out",
                ]
            )
            run(
                [
                    "predict",
                    "--checkpoint",
                    "out/checkpoint.bin",
                    "--train",
                    "out/train.coo",
                    "--out",
                    "out",
                    "out/test.coo",
                ]
            )
            run(["eval", "--out", "out", "out/predictions.coo", "out/test.coo"])
            outs.append(cwd / "out")
        a, b = outs
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
        assert (a / "metrics.txt").read_text() == (b / "metrics.txt").read_text()

    def test_eval_mismatch_reports_missing_index(self, tmp_path, capsys):
        pred = tmp_path / "pred.coo"
        truth = tmp_path / "truth.coo"
        pred.write_text("2 4 4\n0 0 0.5\n")
        truth.write_text("2 4 4\n0 0 1.0\n1 1 2.0\n")
        assert run(["eval", str(pred), str(truth)]) == 1
        err = capsys.readouterr().err
        assert "missing" in err and "(1, 1)" in err

    def test_train_without_file_fails_cleanly(self, capsys):
        assert run(["train"]) == 1
        assert "train" in capsys.readouterr().err
