"""Frozen-representation evaluation and training-dynamics tracking.

KNN probing votes over the cosine-nearest rows of a feature bank; the linear
probe trains one affine layer on frozen features. Both report accuracy
overall and per frequency group (Frequent / Medium / Rare terciles of the
training-count ranking) plus the spread across groups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ClassCountProfile, LabeledDataset
from .encoders import Encoder, parameter_fingerprint
from .views import NormalizationStats, normalized_view


@dataclass(frozen=True)
class FeatureBank:
    """Unit-normalized feature rows with their class labels."""

    features: np.ndarray  # (M, D), rows unit-norm
    labels: np.ndarray  # (M,)

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be a matrix")
        if len(self.features) != len(self.labels):
            raise ValueError("one label per feature row required")
        if len(self.features) == 0:
            raise ValueError("empty feature bank")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("bank rows must be unit-normalized")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class GroupPartition:
    """Class ids split into Frequent / Medium / Rare by training count."""

    frequent: tuple[int, ...]
    medium: tuple[int, ...]
    rare: tuple[int, ...]

    def __post_init__(self) -> None:
        groups = (*self.frequent, *self.medium, *self.rare)
        if sorted(groups) != list(range(len(groups))):
            raise ValueError("groups must cover every class exactly once")


@dataclass(frozen=True)
class GroupReport:
    overall_acc: float
    frequent_acc: float
    medium_acc: float
    rare_acc: float
    std: float

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "frequent_acc": self.frequent_acc,
            "medium_acc": self.medium_acc,
            "rare_acc": self.rare_acc,
            "std": self.std,
        }


def group_partition(profile: ClassCountProfile | np.ndarray) -> GroupPartition:
    """Split classes into three near-equal groups by descending training count.

    Remainder classes go to the earlier groups; ties keep class-id order.
    """
    counts = np.asarray(profile.counts if isinstance(profile, ClassCountProfile) else profile)
    k = len(counts)
    if k < 3:
        raise ValueError(f"need at least 3 classes to form groups, got {k}")
    order = sorted(range(k), key=lambda cls: (-counts[cls], cls))
    base, rem = divmod(k, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    bounds = np.cumsum([0] + sizes)
    return GroupPartition(
        frequent=tuple(order[bounds[0] : bounds[1]]),
        medium=tuple(order[bounds[1] : bounds[2]]),
        rare=tuple(order[bounds[2] : bounds[3]]),
    )


def group_report(
    y_true: np.ndarray, y_pred: np.ndarray, partition: GroupPartition
) -> GroupReport:
    """Accuracies overall and per group; std is over the three group values."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    correct = y_true == y_pred
    accs = []
    for group in (partition.frequent, partition.medium, partition.rare):
        mask = np.isin(y_true, group)
        accs.append(float(correct[mask].mean()) if mask.any() else 0.0)
    return GroupReport(
        overall_acc=float(correct.mean()),
        frequent_acc=accs[0],
        medium_acc=accs[1],
        rare_acc=accs[2],
        std=float(np.std(accs)),
    )


def knn_evaluate(
    bank: FeatureBank,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    k: int = 200,
    partition: GroupPartition | None = None,
) -> GroupReport:
    """Classify each test row by majority vote of its k cosine-nearest bank rows.

    Ties are broken toward the class with the higher summed similarity. The
    group partition defaults to the bank's own label counts.
    """
    if k < 1 or k > len(bank):
        raise ValueError(f"k must be in [1, {len(bank)}], got {k}")
    test_features = np.asarray(test_features, dtype=np.float64)
    norms = np.linalg.norm(test_features, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm test rows have no cosine neighbors")
    sims = (test_features / norms) @ bank.features.T  # (T, M)
    num_classes = int(bank.labels.max()) + 1
    top = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
    rows = np.repeat(np.arange(len(test_features)), k)
    neighbor_labels = bank.labels[top].ravel()
    votes = np.zeros((len(test_features), num_classes))
    weight = np.zeros((len(test_features), num_classes))
    np.add.at(votes, (rows, neighbor_labels), 1.0)
    np.add.at(weight, (rows, neighbor_labels), sims[rows, top.ravel()])
    # lexicographic argmax: vote count first, summed similarity second; the
    # shifted tie term stays below 0.5 so it can never overturn a vote.
    score = votes + (weight + k) / (4.0 * k + 4.0)
    predictions = np.argmax(score, axis=1)
    if partition is None:
        partition = group_partition(np.bincount(bank.labels, minlength=num_classes))
    return group_report(np.asarray(test_labels), predictions, partition)


def extract_features(
    encoder: Encoder,
    dataset: LabeledDataset,
    stats: NormalizationStats,
    layer: str = "backbone",
    batch_size: int = 512,
    target_shape=None,
) -> np.ndarray:
    """Run normalized views through the frozen encoder; no gradient, no shuffling."""
    if layer not in ("backbone", "projection"):
        raise ValueError(f"layer must be 'backbone' or 'projection', got {layer!r}")
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            rows = torch.as_tensor(dataset.features[start : start + batch_size], dtype=dtype)
            if rows.ndim == 2:
                rows = rows.view(rows.shape[0], 1, 1, -1)
            images = normalized_view(rows, stats.mean, stats.std, target_shape)
            out = encoder.features(images) if layer == "backbone" else encoder(images)
            chunks.append(out.cpu().numpy())
    encoder.train(was_training)
    return np.concatenate(chunks).astype(np.float64)


def compute_feature_bank(
    encoder: Encoder,
    dataset: LabeledDataset,
    stats: NormalizationStats,
    layer: str = "backbone",
    target_shape=None,
) -> FeatureBank:
    feats = extract_features(encoder, dataset, stats, layer, target_shape=target_shape)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("encoder produced a zero feature row")
    return FeatureBank(feats / norms, dataset.labels.copy())


def linear_probe(
    encoder: Encoder,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    stats: NormalizationStats,
    epochs: int = 100,
    lr: float = 0.005,
    batch_size: int = 256,
    seed: int = 0,
    partition: GroupPartition | None = None,
    layer: str = "backbone",
    target_shape=None,
) -> GroupReport:
    """Train one affine layer on frozen features; the encoder is never touched.

    Cross entropy, SGD with cosine learning-rate decay and no warm-up.
    """
    before = parameter_fingerprint(encoder)
    train_x = extract_features(encoder, train_set, stats, layer, target_shape=target_shape)
    test_x = extract_features(encoder, test_set, stats, layer, target_shape=target_shape)
    num_classes = max(train_set.num_classes, test_set.num_classes)

    torch.manual_seed(seed)
    head = nn.Linear(train_x.shape[1], num_classes).double()
    optimizer = torch.optim.SGD(head.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss()
    features = torch.as_tensor(train_x)
    labels = torch.as_tensor(train_set.labels)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        for grp in optimizer.param_groups:
            grp["lr"] = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(features))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            optimizer.zero_grad()
            loss = criterion(head(features[batch]), labels[batch])
            loss.backward()
            optimizer.step()

    with torch.no_grad():
        predictions = head(torch.as_tensor(test_x)).argmax(dim=1).numpy()
    if parameter_fingerprint(encoder) != before:
        raise RuntimeError("linear probe mutated encoder parameters")
    if partition is None:
        partition = group_partition(np.bincount(train_set.labels, minlength=num_classes))
    return group_report(test_set.labels, predictions, partition)


class RunTracker:
    """Append-only metrics stream: one JSON record per line, steps increasing."""

    def __init__(self, path, header: dict | None = None, resume: bool = False):
        self.path = Path(path)
        self._last_step = -1
        if resume and self.path.exists():
            records = load_metrics(self.path)
            if records:
                self._last_step = records[-1]["step"]
        elif header is not None:
            self.path.write_text(json.dumps({"header": header}, sort_keys=True) + "\n")
        else:
            self.path.write_text("")

    def append(self, record: dict) -> None:
        step = record.get("step")
        if not isinstance(step, int):
            raise ValueError("record needs an integer 'step'")
        if step <= self._last_step:
            raise ValueError(f"step {step} does not advance past {self._last_step}")
        self._last_step = step
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_metrics(path) -> list[dict]:
    """Per-step records of a metrics file, header line excluded."""
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        if "header" not in payload:
            records.append(payload)
    return records


def load_metrics_header(path) -> dict | None:
    for line in Path(path).read_text().splitlines():
        if line.strip():
            payload = json.loads(line)
            return payload.get("header")
    return None
