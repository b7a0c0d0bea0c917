"""Fused-pair contrastive core.

Fusion of representation pairs (sum or concat), cosine similarity matrices,
the NT-Xent baseline, the thresholded fused-pair loss that zeroes extreme
similarities before the softmax, the mutual-information lower bound, and the
information-volume bookkeeping behind the three pairing options.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor


class FusionKind(str, Enum):
    SUM = "sum"
    CONCAT = "concat"


@dataclass(frozen=True)
class LossConfig:
    """Temperature, similarity thresholds, and fusion kind for the loss."""

    temperature: float = 0.5
    lambda_low: float = 0.1
    lambda_high: float = 0.9
    fusion: FusionKind = FusionKind.SUM

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not -1.0 <= self.lambda_low < self.lambda_high <= 1.0:
            raise ValueError(
                f"need -1 <= lambda_low < lambda_high <= 1, got "
                f"[{self.lambda_low}, {self.lambda_high}]"
            )

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "lambda_low": self.lambda_low,
            "lambda_high": self.lambda_high,
            "fusion": self.fusion.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            temperature=float(d["temperature"]),
            lambda_low=float(d["lambda_low"]),
            lambda_high=float(d["lambda_high"]),
            fusion=FusionKind(d["fusion"]),
        )


@dataclass
class FusedPairBatch:
    """Fused query/key rows; row i of each side is the positive pair."""

    queries: Tensor  # (N, D')
    keys: Tensor  # (N, D')

    def __post_init__(self) -> None:
        if self.queries.ndim != 2 or self.keys.ndim != 2:
            raise ValueError("queries and keys must be 2-D matrices")
        if self.queries.shape != self.keys.shape:
            raise ValueError(
                f"queries {tuple(self.queries.shape)} and keys "
                f"{tuple(self.keys.shape)} must have equal shape"
            )

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass(frozen=True)
class InfoVolumeModel:
    """Information volume retained by each view kind, on a [0, 1] scale.

    A lossless (invertible) view keeps volume 1; a lossy augmented view keeps
    less. The volume of a fused pair is the sum of its operands' volumes.
    """

    v_normalized: float = 1.0
    v_augmented: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.v_augmented <= 1.0:
            raise ValueError("augmented volume must be in [0, 1]")
        if not 0.0 <= self.v_normalized <= 1.0:
            raise ValueError("normalized volume must be in [0, 1]")


@dataclass(frozen=True)
class InfoRatios:
    """Anchor-attributable information ratio of each fused operand."""

    anchor_ratios: tuple[float, float]
    shared_capacity: float


def fuse(a: Tensor, b: Tensor, op: FusionKind) -> Tensor:
    """Combine two representations: elementwise sum or concatenation."""
    if op == FusionKind.SUM:
        if a.shape[-1] != b.shape[-1]:
            raise ValueError(
                f"sum fusion needs equal dims, got {a.shape[-1]} and {b.shape[-1]}"
            )
        return a + b
    if op == FusionKind.CONCAT:
        return torch.cat([a, b], dim=-1)
    raise ValueError(f"unknown fusion kind {op!r}")


def build_fused_pairs(
    anchor_norm: Tensor,
    counter_aug: Tensor,
    anchor_aug: Tensor,
    counter_norm: Tensor,
    op: FusionKind,
) -> FusedPairBatch:
    """Cross-image, cross-view fusion: q = anchor_norm (*) counter_aug and
    k = anchor_aug (*) counter_norm, the canonical option-1 pairing."""
    shapes = {t.shape for t in (anchor_norm, counter_aug, anchor_aug, counter_norm)}
    if len(shapes) != 1:
        raise ValueError(f"all four representation matrices must share a shape, got {shapes}")
    return FusedPairBatch(
        queries=fuse(anchor_norm, counter_aug, op),
        keys=fuse(anchor_aug, counter_norm, op),
    )


def option_pairs(
    img1_view1: Tensor,
    img1_view2: Tensor,
    img2_view1: Tensor,
    img2_view2: Tensor,
    option: int,
    op: FusionKind,
) -> tuple[Tensor, Tensor]:
    """The three ways of grouping four representations into two fused operands.

    Option 1 crosses both images and view kinds, option 2 crosses images
    within a view kind, option 3 fuses the two views of each image.
    """
    shapes = {t.shape for t in (img1_view1, img1_view2, img2_view1, img2_view2)}
    if len(shapes) != 1:
        raise ValueError(f"all four representation matrices must share a shape, got {shapes}")
    if option == 1:
        return fuse(img1_view1, img2_view2, op), fuse(img1_view2, img2_view1, op)
    if option == 2:
        return fuse(img1_view1, img2_view1, op), fuse(img1_view2, img2_view2, op)
    if option == 3:
        return fuse(img1_view1, img1_view2, op), fuse(img2_view1, img2_view2, op)
    raise ValueError(f"option must be 1, 2 or 3, got {option}")


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between the rows of two matrices."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    norm_a = a.norm(dim=-1, keepdim=True)
    norm_b = b.norm(dim=-1, keepdim=True)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise ValueError("cosine similarity is undefined for zero-norm rows")
    return (a / norm_a) @ (b / norm_b).T


def threshold_mask(similarities: Tensor, lambda_low: float, lambda_high: float) -> Tensor:
    """Zero every similarity outside the closed interval [lambda_low, lambda_high].

    The indicator is a constant during backpropagation: surviving entries keep
    their gradient, zeroed entries get none.
    """
    if lambda_low >= lambda_high:
        raise ValueError(f"need lambda_low < lambda_high, got {lambda_low} >= {lambda_high}")
    similarities = torch.as_tensor(similarities)
    with torch.no_grad():
        keep = (similarities >= lambda_low) & (similarities <= lambda_high)
    return similarities * keep.to(similarities.dtype)


def elimination_rate(
    similarities: Tensor,
    lambda_low: float,
    lambda_high: float,
    exclude_diagonal: bool = False,
) -> float:
    """Fraction of counted entries falling outside [lambda_low, lambda_high].

    With `exclude_diagonal`, self-similarities of a square matrix are not
    counted (the training loop tracks off-self entries only).
    """
    similarities = torch.as_tensor(similarities)
    outside = (similarities < lambda_low) | (similarities > lambda_high)
    if exclude_diagonal:
        if similarities.shape[0] != similarities.shape[1]:
            raise ValueError("exclude_diagonal requires a square matrix")
        off_diag = ~torch.eye(similarities.shape[0], dtype=torch.bool)
        outside = outside[off_diag]
    total = outside.numel()
    if total == 0:
        return 0.0
    return float(outside.sum().item()) / total


def nt_xent_loss(views: Tensor, positives: Tensor, temperature: float) -> Tensor:
    """Temperature-scaled contrastive cross entropy over a set of views.

    `positives[i]` is the index of view i's unique positive partner; the
    denominator runs over every other view. Returns the mean over anchors.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    views = torch.as_tensor(views)
    positives = torch.as_tensor(positives, dtype=torch.long)
    n = views.shape[0]
    if positives.shape != (n,):
        raise ValueError("positives must assign one partner per view")
    idx = torch.arange(n)
    if (positives == idx).any() or not (positives[positives] == idx).all():
        raise ValueError("positives must be a self-inverse pairing without fixed points")
    logits = cosine_similarity_matrix(views, views) / temperature
    logits = logits.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    return (torch.logsumexp(logits, dim=1) - logits[idx, positives]).mean()


def mttv_loss(batch: FusedPairBatch, cfg: LossConfig) -> Tensor:
    """Thresholded contrastive loss over the 2N fused queries and keys.

    Stacks [q_1..q_N, k_1..k_N], computes the full cosine matrix, zeroes
    extreme similarities, and scores each anchor against its partner with the
    denominator running over the other 2N-1 items. A masked positive keeps a
    zero logit rather than dropping out of the loss.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    items = torch.cat([batch.queries, batch.keys], dim=0)
    sims = cosine_similarity_matrix(items, items)
    masked = threshold_mask(sims, cfg.lambda_low, cfg.lambda_high)
    logits = masked / cfg.temperature
    idx = torch.arange(2 * n)
    partners = (idx + n) % (2 * n)
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    return (torch.logsumexp(logits, dim=1) - logits[idx, partners]).mean()


def mi_lower_bound(loss: float | Tensor, n: int) -> float:
    """Lower bound on the mutual information between the fused pair streams:
    log(N) minus the contrastive loss."""
    if n < 1:
        raise ValueError(f"batch size must be at least 1, got {n}")
    return math.log(n) - float(loss)


def info_ratios(option: int, model: InfoVolumeModel = InfoVolumeModel()) -> InfoRatios:
    """Anchor-information ratio of each fused operand under a pairing option.

    Option 1 splits anchor content across both operands, option 2 attributes
    half of each operand to the anchor, option 3 concentrates all anchor
    content in one operand and none in the other; the shared capacity is the
    smaller of the two ratios.
    """
    v_n, v_a = model.v_normalized, model.v_augmented
    if option == 1:
        ratios = (v_n / (v_n + v_a), v_a / (v_a + v_n))
    elif option == 2:
        ratios = (0.5, 0.5)
    elif option == 3:
        ratios = (1.0, 0.0)
    else:
        raise ValueError(f"option must be 1, 2 or 3, got {option}")
    return InfoRatios(anchor_ratios=ratios, shared_capacity=min(ratios))
