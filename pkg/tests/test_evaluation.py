"""KNN and linear probes, group metrics, and the metrics stream."""

import json

import numpy as np
import pytest
import torch

from mttv.data import LabeledDataset, build_exponential_counts
from mttv.encoders import EncoderSpec, build_encoder, parameter_fingerprint
from mttv.evaluation import (
    FeatureBank,
    GroupPartition,
    RunTracker,
    compute_feature_bank,
    group_partition,
    group_report,
    knn_evaluate,
    linear_probe,
    load_metrics,
    load_metrics_header,
)
from mttv.views import NormalizationStats

from oracles import knn_predict_oracle


def unit_rows(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def cluster_data(per_class, num_classes=3, dim=5, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for cls in range(num_classes):
        center = np.zeros(dim)
        center[cls] = 1.0
        feats.append(center + spread * rng.standard_normal((per_class, dim)))
        labels.append(np.full(per_class, cls))
    return unit_rows(np.concatenate(feats)), np.concatenate(labels)


class TestGroupPartition:
    def test_ten_classes(self):
        profile = build_exponential_counts(5000, 10, 0.01)
        part = group_partition(profile)
        assert part.frequent == (0, 1, 2, 3)
        assert part.medium == (4, 5, 6)
        assert part.rare == (7, 8, 9)

    def test_hundred_classes(self):
        profile = build_exponential_counts(500, 100, 0.01)
        part = group_partition(profile)
        assert len(part.frequent) == 34 and len(part.medium) == 33 and len(part.rare) == 33

    def test_uniform_counts_split_by_index(self):
        part = group_partition(np.array([7, 7, 7, 7, 7, 7]))
        assert part.frequent == (0, 1) and part.medium == (2, 3) and part.rare == (4, 5)

    def test_rejects_two_classes(self):
        with pytest.raises(ValueError, match="at least 3"):
            group_partition(np.array([10, 5]))

    def test_partition_must_cover_classes(self):
        with pytest.raises(ValueError, match="exactly once"):
            GroupPartition(frequent=(0,), medium=(1,), rare=(1,))


class TestGroupReport:
    def test_overall_equals_weighted_recombination(self):
        rng = np.random.default_rng(4)
        y_true = rng.integers(0, 6, size=400)
        y_pred = np.where(rng.random(400) < 0.6, y_true, rng.integers(0, 6, size=400))
        part = group_partition(np.bincount(y_true, minlength=6))
        report = group_report(y_true, y_pred, part)
        per_class_acc = []
        weights = []
        for cls in range(6):
            mask = y_true == cls
            per_class_acc.append((y_pred[mask] == cls).mean())
            weights.append(mask.sum())
        recombined = np.average(per_class_acc, weights=weights)
        assert report.overall_acc == pytest.approx(recombined, abs=1e-9)

    def test_std_is_over_exactly_three_group_values(self):
        y_true = np.array([0, 0, 1, 1, 2, 2])
        y_pred = np.array([0, 0, 1, 0, 0, 0])
        part = GroupPartition(frequent=(0,), medium=(1,), rare=(2,))
        report = group_report(y_true, y_pred, part)
        assert report.std == pytest.approx(np.std([1.0, 0.5, 0.0]))


class TestKnnEvaluate:
    def test_bank_equals_test_with_k_one(self):
        feats, labels = cluster_data(per_class=8, seed=1)
        bank = FeatureBank(feats, labels)
        report = knn_evaluate(bank, feats, labels, k=1)
        assert report.overall_acc == 1.0

    def test_separated_clusters_are_perfect(self):
        feats, labels = cluster_data(per_class=30, spread=0.02, seed=2)
        test_feats, test_labels = cluster_data(per_class=10, spread=0.02, seed=3)
        report = knn_evaluate(FeatureBank(feats, labels), test_feats, test_labels, k=5)
        assert report.overall_acc == 1.0 and report.rare_acc == 1.0

    def test_single_class_bank_predicts_that_class(self):
        rng = np.random.default_rng(5)
        bank = FeatureBank(unit_rows(rng.standard_normal((20, 4))), np.zeros(20, dtype=int))
        test = unit_rows(rng.standard_normal((10, 4)))
        part = GroupPartition(frequent=(0,), medium=(1,), rare=(2,))
        report = knn_evaluate(bank, test, np.zeros(10, dtype=int), k=3, partition=part)
        assert report.overall_acc == 1.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            m = int(rng.integers(20, 120))
            bank_feats = unit_rows(rng.standard_normal((m, 6)))
            bank_labels = rng.integers(0, 4, size=m)
            test_feats = rng.standard_normal((25, 6))
            k = int(rng.integers(1, min(m, 31)))
            expected = knn_predict_oracle(bank_feats.tolist(), bank_labels.tolist(), test_feats.tolist(), k)
            bank = FeatureBank(bank_feats, bank_labels)
            part = group_partition(np.bincount(bank_labels, minlength=4))
            got = knn_evaluate(bank, test_feats, np.array(expected), k=k, partition=part)
            # predicting exactly the oracle labels means accuracy 1 against them
            assert got.overall_acc == 1.0

    def test_k_bounds(self):
        feats, labels = cluster_data(per_class=4)
        bank = FeatureBank(feats, labels)
        with pytest.raises(ValueError, match="k must be"):
            knn_evaluate(bank, feats, labels, k=0)
        with pytest.raises(ValueError, match="k must be"):
            knn_evaluate(bank, feats, labels, k=len(bank) + 1)

    def test_bank_validation(self):
        with pytest.raises(ValueError, match="unit-normalized"):
            FeatureBank(np.ones((3, 2)), np.zeros(3, dtype=int))
        with pytest.raises(ValueError, match="empty"):
            FeatureBank(np.ones((0, 2)), np.zeros(0, dtype=int))


class TestLinearProbe:
    def make_sets(self, separation=6.0, n=40, dim=8, seed=0):
        rng = np.random.default_rng(seed)
        def sample(count):
            xs, ys = [], []
            for cls in range(2):
                center = np.zeros(dim)
                center[cls] = separation
                xs.append(center + rng.standard_normal((count, dim)))
                ys.append(np.full(count, cls))
            return LabeledDataset(np.concatenate(xs), np.concatenate(ys))
        return sample(n), sample(n // 2)

    def setup_method(self):
        self.spec = EncoderSpec(
            backbone="small_mlp", input_shape=(1, 1, 8), hidden_width=16,
            embedding_dim=12, projection_dim=6,
        )
        self.stats = NormalizationStats(mean=(0.0,), std=(1.0,))
        self.partition = GroupPartition(frequent=(0,), medium=(1,), rare=())

    def test_separable_classes_reach_perfect_accuracy(self):
        train, test = self.make_sets()
        encoder = build_encoder(self.spec, seed=0)
        report = linear_probe(
            encoder, train, test, self.stats, epochs=150, lr=0.05, seed=0,
            partition=self.partition,
        )
        assert report.overall_acc == 1.0

    def test_zero_epochs_is_chance_level(self):
        rng = np.random.default_rng(1)
        train = LabeledDataset(rng.standard_normal((200, 8)), rng.integers(0, 10, 200))
        test = LabeledDataset(rng.standard_normal((500, 8)), rng.integers(0, 10, 500))
        encoder = build_encoder(
            EncoderSpec(backbone="small_mlp", input_shape=(1, 1, 8), hidden_width=16,
                        embedding_dim=12, projection_dim=6),
            seed=1,
        )
        accs = [
            linear_probe(encoder, train, test, self.stats, epochs=0, seed=s,
                         partition=group_partition(np.bincount(train.labels, minlength=10))).overall_acc
            for s in range(3)
        ]
        assert np.mean(accs) == pytest.approx(0.1, abs=0.05)

    def test_encoder_parameters_untouched(self):
        train, test = self.make_sets(seed=2)
        encoder = build_encoder(self.spec, seed=2)
        before = parameter_fingerprint(encoder)
        linear_probe(encoder, train, test, self.stats, epochs=5, seed=0, partition=self.partition)
        assert parameter_fingerprint(encoder) == before


class TestFeatureExtraction:
    def test_bank_rows_are_unit_norm(self):
        rng = np.random.default_rng(7)
        ds = LabeledDataset(rng.standard_normal((30, 8)), rng.integers(0, 3, 30))
        encoder = build_encoder(
            EncoderSpec(backbone="small_mlp", input_shape=(1, 1, 8), hidden_width=16,
                        embedding_dim=12, projection_dim=6),
            seed=3,
        )
        bank = compute_feature_bank(encoder, ds, NormalizationStats(mean=(0.0,), std=(1.0,)))
        assert np.allclose(np.linalg.norm(bank.features, axis=1), 1.0, atol=1e-6)
        assert np.array_equal(bank.labels, ds.labels)


class TestRunTracker:
    def test_records_roundtrip_with_header(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        tracker = RunTracker(path, header={"seed": 7})
        tracker.append({"step": 0, "loss": 1.5})
        tracker.append({"step": 1, "loss": 1.25})
        assert load_metrics_header(path) == {"seed": 7}
        records = load_metrics(path)
        assert [r["step"] for r in records] == [0, 1]
        assert records[1]["loss"] == 1.25

    def test_empty_run_has_empty_log(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        RunTracker(path, header={"seed": 0})
        assert load_metrics(path) == []

    def test_steps_must_increase(self, tmp_path):
        tracker = RunTracker(tmp_path / "m.jsonl", header={})
        tracker.append({"step": 3})
        with pytest.raises(ValueError, match="advance"):
            tracker.append({"step": 3})

    def test_resume_continues_step_checking(self, tmp_path):
        path = tmp_path / "m.jsonl"
        tracker = RunTracker(path, header={})
        tracker.append({"step": 0})
        tracker.append({"step": 1})
        resumed = RunTracker(path, resume=True)
        with pytest.raises(ValueError, match="advance"):
            resumed.append({"step": 1})
        resumed.append({"step": 2})
        assert [r["step"] for r in load_metrics(path)] == [0, 1, 2]

    def test_identical_runs_write_identical_bytes(self, tmp_path):
        paths = []
        for name in ("x", "y"):
            path = tmp_path / name / "metrics.jsonl"
            path.parent.mkdir()
            tracker = RunTracker(path, header={"seed": 1})
            for step in range(5):
                tracker.append({"step": step, "loss": 1.0 / (step + 1), "knn_acc": None})
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
