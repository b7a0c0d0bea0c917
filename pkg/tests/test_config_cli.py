"""Run configuration, training-loop contracts, and the command-line surface."""

import dataclasses
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mttv.cli import main
from mttv.config import (
    ConfigError,
    DataConfig,
    OptimizerConfig,
    RunConfig,
    ScheduleConfig,
    load_config,
    save_config,
    toy_preset,
)
from mttv.core import LossConfig
from mttv.data import SyntheticLTConfig, read_manifest
from mttv.encoders import EncoderSpec, load_checkpoint, save_checkpoint
from mttv.evaluation import load_metrics, load_metrics_header
from mttv.training import CollapseError, learning_rate, pretrain
from mttv.views import default_vector_policy


def tiny_config(seed=0, max_epochs=3, **overrides):
    synthetic = SyntheticLTConfig(
        num_classes=4, feature_dim=8, cluster_separation=4.0, within_cluster_std=1.0,
        r=0.5, n_max=30, seed=seed,
    )
    base = RunConfig(
        data=DataConfig(source="synthetic", synthetic=synthetic, eval_per_class=5),
        encoder=EncoderSpec(
            backbone="small_mlp", input_shape=(1, 1, 8), hidden_width=16,
            embedding_dim=12, projection_dim=6,
        ),
        loss=LossConfig(temperature=0.5, lambda_low=0.1, lambda_high=0.9),
        optimizer=OptimizerConfig(lr=0.1),
        schedule=ScheduleConfig(max_epochs=max_epochs, knn_k=3, linear_epochs=5),
        augmentation=default_vector_policy(dropout_p=0.2, noise_sigma=0.3),
        batch_size=16,
        seed=seed,
    )
    return dataclasses.replace(base, **overrides) if overrides else base


class TestRunConfig:
    def test_json_roundtrip(self, tmp_path):
        config = toy_preset(seed=3)
        path = tmp_path / "config.json"
        save_config(config, path)
        assert load_config(path) == config

    def test_every_default_is_serialized(self, tmp_path):
        save_config(tiny_config(), tmp_path / "c.json")
        payload = json.loads((tmp_path / "c.json").read_text())
        for key in ("data", "encoder", "loss", "optimizer", "schedule", "augmentation",
                    "method", "views", "option", "batch_size", "ema_momentum", "seed",
                    "deterministic"):
            assert key in payload

    def test_rejects_bad_method(self):
        with pytest.raises(ConfigError, match="method"):
            tiny_config(method="simsiam")

    def test_rejects_tiny_batch(self):
        with pytest.raises(ConfigError, match="batch"):
            tiny_config(batch_size=1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ConfigError, match="input shape"):
            tiny_config(encoder=EncoderSpec(backbone="small_mlp", input_shape=(1, 1, 9),
                                            hidden_width=16, embedding_dim=12, projection_dim=6))

    def test_rejects_malformed_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_rejects_missing_fields(self, tmp_path):
        path = tmp_path / "partial.json"
        path.write_text(json.dumps({"method": "mttv"}))
        with pytest.raises(ConfigError):
            load_config(path)


class TestLearningRateSchedule:
    def test_matches_closed_form_pointwise(self):
        base, max_epochs, warmup_frac = 0.3, 200, 0.10
        warmup = round(warmup_frac * max_epochs)
        for epoch in range(max_epochs):
            expected = (
                base * (epoch + 1) / warmup
                if epoch < warmup
                else base * 0.5 * (1 + math.cos(math.pi * (epoch - warmup) / (max_epochs - warmup)))
            )
            assert learning_rate(epoch, base, max_epochs, warmup_frac) == pytest.approx(expected)

    def test_warmup_reaches_base_then_decays_to_zero(self):
        values = [learning_rate(e, 1.0, 50, 0.10) for e in range(50)]
        assert values[4] == pytest.approx(1.0)  # end of the 5-epoch warm-up
        assert all(a < b or b == pytest.approx(1.0) for a, b in zip(values[:4], values[1:5]))
        assert all(a >= b for a, b in zip(values[4:], values[5:]))
        assert values[-1] < 0.01

    def test_no_warmup_fraction(self):
        assert learning_rate(0, 1.0, 10, 0.0) == pytest.approx(1.0)


class TestDeterminismAndResume:
    def test_identical_runs_are_byte_identical(self, tmp_path):
        config = tiny_config(seed=5)
        paths = []
        for name in ("runA", "runB"):
            result = pretrain(config, tmp_path / name)
            paths.append((result.metrics_path, result.checkpoint_path))
        assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
        assert paths[0][1].read_bytes() == paths[1][1].read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a = pretrain(tiny_config(seed=1), tmp_path / "a")
        b = pretrain(tiny_config(seed=2), tmp_path / "b")
        assert a.metrics_path.read_bytes() != b.metrics_path.read_bytes()

    def test_resume_continues_without_step_discontinuity(self, tmp_path):
        short = tiny_config(seed=7, max_epochs=2)
        first = pretrain(short, tmp_path / "run")
        steps_before = [r["step"] for r in load_metrics(first.metrics_path)]
        extended = dataclasses.replace(
            short, schedule=dataclasses.replace(short.schedule, max_epochs=4)
        )
        second = pretrain(extended, tmp_path / "run", resume=first.checkpoint_path)
        records = load_metrics(second.metrics_path)
        steps = [r["step"] for r in records]
        assert steps == list(range(len(steps)))
        assert len(steps) == 2 * len(steps_before)
        assert sorted({r["epoch"] for r in records}) == [0, 1, 2, 3]

    def test_resume_rejects_different_config(self, tmp_path):
        first = pretrain(tiny_config(seed=1, max_epochs=2), tmp_path / "x")
        other = tiny_config(seed=2, max_epochs=4)
        with pytest.raises(ValueError, match="different run config"):
            pretrain(other, tmp_path / "y", resume=first.checkpoint_path)

    def test_metrics_header_holds_full_config(self, tmp_path):
        config = tiny_config(seed=3)
        result = pretrain(config, tmp_path / "run")
        assert load_metrics_header(result.metrics_path) == config.to_dict()

    def test_checkpoint_carries_config_and_counters(self, tmp_path):
        config = tiny_config(seed=4, max_epochs=2)
        result = pretrain(config, tmp_path / "run")
        payload = load_checkpoint(result.checkpoint_path)
        assert payload["config"] == config.to_dict()
        assert payload["epoch"] == 2
        assert payload["global_step"] == len(load_metrics(result.metrics_path))


class TestCollapseGuard:
    def test_fully_eliminated_epoch_aborts(self, tmp_path):
        # the surviving band sits at the antipodal extreme no fused pair reaches
        config = tiny_config(loss=LossConfig(temperature=0.5, lambda_low=-1.0, lambda_high=-0.99))
        with pytest.raises(CollapseError, match="off-self"):
            pretrain(config, tmp_path / "collapse")


class TestCli:
    def write_config(self, tmp_path, config=None):
        path = tmp_path / "config.json"
        save_config(config or tiny_config(), path)
        return path

    def test_build_data(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        code = main(["build-data", "--config", str(cfg), "--out", str(tmp_path / "data")])
        assert code == 0
        profile, samples = read_manifest(tmp_path / "data" / "manifest.json")
        assert profile.counts == (30, 24, 19, 15)
        assert len(samples) == 88

    def test_pretrain_evaluate_and_plots(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        checkpoint = out / "checkpoint.pt"
        assert checkpoint.exists()

        eval_out = tmp_path / "eval"
        assert main(["evaluate", "knn", "--checkpoint", str(checkpoint), "--out", str(eval_out)]) == 0
        report = json.loads((eval_out / "report_knn.json").read_text())
        assert 0.0 <= report["report"]["overall_acc"] <= 1.0
        assert main(["evaluate", "linear", "--checkpoint", str(checkpoint), "--out", str(eval_out)]) == 0

        # identical checkpoint evaluated twice gives an identical report
        eval_again = tmp_path / "eval2"
        assert main(["evaluate", "knn", "--checkpoint", str(checkpoint), "--out", str(eval_again)]) == 0
        assert (eval_out / "report_knn.json").read_bytes() == (eval_again / "report_knn.json").read_bytes()

        fig = tmp_path / "elim.png"
        assert main(["plot", "--input", str(out / "metrics.jsonl"), "--kind", "elimination_curve",
                     "--out", str(fig)]) == 0
        values = json.loads((tmp_path / "elim.png.values.json").read_text())
        logged = [r["elimination_rate"] for r in load_metrics(out / "metrics.jsonl")]
        assert values["elimination_rate"] == logged

        knn_fig = tmp_path / "knn.png"
        assert main(["plot", "--input", str(out / "metrics.jsonl"), "--kind", "knn_curve",
                     "--out", str(knn_fig)]) == 0
        assert knn_fig.exists()

    def test_invalid_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"method": "mttv"}))
        assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_collapse_exits_3(self, tmp_path):
        cfg = self.write_config(
            tmp_path, tiny_config(loss=LossConfig(temperature=0.5, lambda_low=-1.0, lambda_high=-0.99))
        )
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_missing_checkpoint_exits_2(self, tmp_path):
        code = main(["evaluate", "knn", "--checkpoint", str(tmp_path / "nope.pt"),
                     "--out", str(tmp_path / "e")])
        assert code == 2

    def test_plot_on_empty_log_fails_without_file(self, tmp_path):
        empty = tmp_path / "metrics.jsonl"
        empty.write_text("")
        fig = tmp_path / "curve.png"
        assert main(["plot", "--input", str(empty), "--kind", "elimination_curve",
                     "--out", str(fig)]) == 1
        assert not fig.exists()

    def test_analyze_options(self, tmp_path):
        config = tiny_config(max_epochs=1)
        cfg = self.write_config(tmp_path, config)
        out = tmp_path / "analysis"
        assert main(["analyze-options", "--config", str(cfg), "--out", str(out)]) == 0
        comparison = json.loads((out / "comparison.json").read_text())
        names = set(comparison["variants"])
        assert names == {"mttv_option1", "mttv_option2", "mttv_option3", "nt_xent_aa", "nt_xent_na"}
        ratios = comparison["variants"]["mttv_option1"]["info_ratios"]["anchor_ratios"]
        assert ratios[0] == pytest.approx(1 / 1.8)
        assert comparison["variants"]["nt_xent_aa"]["info_ratios"] is None

        fig = tmp_path / "options.png"
        assert main(["plot", "--input", str(out / "comparison.json"), "--kind", "option_compare",
                     "--out", str(fig)]) == 0
        assert fig.exists()

    def test_seed_override_changes_run(self, tmp_path):
        cfg = self.write_config(tmp_path)
        main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "s1"), "--seed", "11"])
        main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "s2"), "--seed", "12"])
        a = load_metrics_header(tmp_path / "s1" / "metrics.jsonl")
        assert a["seed"] == 11
        assert (tmp_path / "s1" / "metrics.jsonl").read_bytes() != (tmp_path / "s2" / "metrics.jsonl").read_bytes()

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "mttv.cli", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        for command in ("build-data", "pretrain", "evaluate", "analyze-options", "plot"):
            assert command in proc.stdout
