"""Long-tailed dataset construction.

Builds per-class count profiles (exponential / Pareto / uniform), stratified
subsamples of labeled datasets, and a synthetic Gaussian-cluster dataset that
serves as the default desk-scale data source so nothing needs downloading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import brentq


class DistributionKind(str, Enum):
    EXPONENTIAL = "exponential"
    PARETO = "pareto"
    UNIFORM = "uniform"


def _round_half_even(x: float) -> int:
    return int(np.round(x))


@dataclass(frozen=True)
class ClassCountProfile:
    """Per-class sample counts of a long-tailed split, head class first.

    `imbalance_ratio` is the requested min/max count ratio; the realized
    ratio may differ by up to one count in the tail class due to rounding.
    """

    num_classes: int
    counts: tuple[int, ...]
    imbalance_ratio: float
    distribution_kind: DistributionKind

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.counts) != self.num_classes:
            raise ValueError(
                f"counts has {len(self.counts)} entries for {self.num_classes} classes"
            )
        if any(c < 1 for c in self.counts):
            raise ValueError("every class must keep at least one sample")
        if any(a < b for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError("counts must be non-increasing from head to tail")
        if not 0.0 < self.imbalance_ratio <= 1.0:
            raise ValueError(f"imbalance ratio must be in (0, 1], got {self.imbalance_ratio}")
        realized = min(self.counts) / max(self.counts)
        if abs(realized - self.imbalance_ratio) > 1.0 / max(self.counts):
            raise ValueError(
                f"realized min/max ratio {realized:.6f} is not within rounding "
                f"slack of requested {self.imbalance_ratio:.6f}"
            )

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "counts": list(self.counts),
            "imbalance_ratio": self.imbalance_ratio,
            "distribution_kind": self.distribution_kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCountProfile":
        return cls(
            num_classes=int(d["num_classes"]),
            counts=tuple(int(c) for c in d["counts"]),
            imbalance_ratio=float(d["imbalance_ratio"]),
            distribution_kind=DistributionKind(d["distribution_kind"]),
        )


@dataclass(frozen=True)
class SubsampleSpec:
    """Stratified subsampling: keep round(s * count) samples per class."""

    s: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 < self.s <= 1.0:
            raise ValueError(f"subsampling ratio must be in (0, 1], got {self.s}")


@dataclass(frozen=True)
class SyntheticLTConfig:
    """Gaussian-cluster stand-in for a long-tailed image dataset.

    Class k is an isotropic Gaussian (std `within_cluster_std`) around a
    dedicated axis direction scaled by `cluster_separation`, so the class
    counts follow the exponential profile with ratio `r`.
    """

    num_classes: int = 10
    feature_dim: int = 16
    cluster_separation: float = 3.0
    within_cluster_std: float = 1.0
    r: float = 0.01
    n_max: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_dim < self.num_classes:
            raise ValueError(
                f"cluster centers use one axis per class: feature_dim "
                f"{self.feature_dim} < num_classes {self.num_classes}"
            )
        if self.cluster_separation < 0:
            raise ValueError("cluster_separation must be nonnegative")
        if self.within_cluster_std <= 0:
            raise ValueError("within_cluster_std must be positive")
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"imbalance ratio must be in (0, 1], got {self.r}")
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")


@dataclass
class LabeledDataset:
    """Feature rows plus integer class labels; the unit the pipeline emits."""

    features: np.ndarray  # (N, ...) float
    labels: np.ndarray  # (N,) int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels length mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def build_exponential_counts(n_max: int, num_classes: int, r: float) -> ClassCountProfile:
    """Exponential long-tail profile: counts[k] = round(n_max * r^(k/(K-1))).

    The head class keeps n_max samples and the tail class about n_max * r;
    rounding is half-to-even. Raises if the tail would round to zero.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"imbalance ratio must be in (0, 1], got {r}")
    counts = tuple(
        _round_half_even(n_max * r ** (k / (num_classes - 1))) for k in range(num_classes)
    )
    if min(counts) < 1:
        raise ValueError(
            f"r={r} with n_max={n_max} rounds the tail class to zero samples"
        )
    kind = DistributionKind.UNIFORM if r == 1.0 else DistributionKind.EXPONENTIAL
    return ClassCountProfile(num_classes, counts, r, kind)


def build_pareto_counts(n_max: int, num_classes: int, alpha: float) -> ClassCountProfile:
    """Power-law long-tail profile: counts[k] = max(1, round(n_max * (k+1)^-a)).

    The exponent a is solved numerically so that the continuous head-to-tail
    ratio num_classes^-a equals alpha (alpha=0.004 gives a 250:1 ratio).
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"head-to-tail ratio must be in (0, 1], got {alpha}")
    if alpha == 1.0:
        exponent = 0.0
    else:
        exponent = brentq(lambda a: num_classes ** (-a) - alpha, 0.0, 64.0)
    counts = tuple(
        max(1, _round_half_even(n_max * (k + 1) ** (-exponent))) for k in range(num_classes)
    )
    kind = DistributionKind.UNIFORM if alpha == 1.0 else DistributionKind.PARETO
    return ClassCountProfile(num_classes, counts, alpha, kind)


def stratified_subsample(dataset: LabeledDataset, spec: SubsampleSpec) -> LabeledDataset:
    """Keep round(s * count) uniformly chosen samples per class.

    Preserves the normalized count shape within rounding and never reorders
    classes by frequency. Rejects ratios that would empty a class.
    """
    rng = np.random.default_rng(spec.seed)
    counts = dataset.class_counts()
    if np.any(counts == 0):
        raise ValueError("dataset has empty classes")
    keep: list[np.ndarray] = []
    for cls, count in enumerate(counts):
        target = _round_half_even(spec.s * count)
        if target < 1:
            raise ValueError(
                f"s={spec.s} drops class {cls} (count {count}) to zero samples"
            )
        idx = np.flatnonzero(dataset.labels == cls)
        chosen = rng.choice(idx, size=target, replace=False)
        keep.append(np.sort(chosen))
    order = np.concatenate(keep)
    order.sort()
    return LabeledDataset(dataset.features[order], dataset.labels[order])


def _cluster_centers(config: SyntheticLTConfig) -> np.ndarray:
    centers = np.zeros((config.num_classes, config.feature_dim))
    for k in range(config.num_classes):
        centers[k, k] = config.cluster_separation
    return centers


def _sample_clusters(
    centers: np.ndarray, counts: tuple[int, ...] | np.ndarray, std: float, rng: np.random.Generator
) -> LabeledDataset:
    rows = []
    labels = []
    for k, count in enumerate(counts):
        rows.append(centers[k] + std * rng.standard_normal((count, centers.shape[1])))
        labels.append(np.full(count, k, dtype=np.int64))
    return LabeledDataset(np.concatenate(rows).astype(np.float64), np.concatenate(labels))


def generate_synthetic_lt(config: SyntheticLTConfig) -> LabeledDataset:
    """Long-tailed Gaussian-cluster training set; bit-identical under a seed."""
    profile = build_exponential_counts(config.n_max, config.num_classes, config.r)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    return _sample_clusters(_cluster_centers(config), profile.counts, config.within_cluster_std, rng)


def generate_synthetic_eval(config: SyntheticLTConfig, per_class: int = 50) -> LabeledDataset:
    """Balanced held-out split from the same cluster centers as the training set."""
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    counts = (per_class,) * config.num_classes
    return _sample_clusters(_cluster_centers(config), counts, config.within_cluster_std, rng)


def write_manifest(path: str | Path, dataset: LabeledDataset, profile: ClassCountProfile) -> None:
    """Persist (sample-id, label) pairs plus the count profile as JSON."""
    realized = dataset.class_counts()
    if tuple(int(c) for c in realized) != profile.counts:
        raise ValueError("dataset class counts do not match the profile")
    payload = {
        "profile": profile.to_dict(),
        "samples": [[i, int(label)] for i, label in enumerate(dataset.labels)],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> tuple[ClassCountProfile, list[tuple[int, int]]]:
    payload = json.loads(Path(path).read_text())
    profile = ClassCountProfile.from_dict(payload["profile"])
    samples = [(int(i), int(label)) for i, label in payload["samples"]]
    return profile, samples


def load_cifar(
    root: str | Path, num_classes: int = 10, train: bool = True, download: bool = False
) -> LabeledDataset:
    """CIFAR-10/100 as float arrays in [0, 1]; requires a local copy by default."""
    from torchvision import datasets

    cls = {10: datasets.CIFAR10, 100: datasets.CIFAR100}[num_classes]
    ds = cls(root=str(root), train=train, download=download)
    features = np.asarray(ds.data, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0
    return LabeledDataset(features, np.asarray(ds.targets, dtype=np.int64))


def apply_profile(dataset: LabeledDataset, profile: ClassCountProfile, seed: int) -> LabeledDataset:
    """Trim a balanced dataset down to a long-tailed profile, head class first."""
    counts = dataset.class_counts()
    if len(counts) != profile.num_classes:
        raise ValueError("profile and dataset class count mismatch")
    if np.any(counts < np.asarray(profile.counts)):
        raise ValueError("profile requests more samples than some class has")
    rng = np.random.default_rng(seed)
    keep = []
    for cls, target in enumerate(profile.counts):
        idx = np.flatnonzero(dataset.labels == cls)
        keep.append(np.sort(rng.choice(idx, size=target, replace=False)))
    order = np.concatenate(keep)
    order.sort()
    return LabeledDataset(dataset.features[order], dataset.labels[order])
