"""View construction: one invertible and one lossy transform per image.

The normalized view is resize plus per-channel standardization and can be
undone exactly given the statistics. The augmented view runs a configurable
chain of stochastic transforms and ends with the same standardization, so
both views share one input scale. Counterparts are paired within a batch by
a derangement, never pairing an image with itself.

All randomness flows through explicit generators: numpy for index-level
sampling, torch for tensor-level transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass
class ImageBatch:
    """Raw images (N, C, H, W) plus integer class labels."""

    images: Tensor
    labels: Tensor

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel affine statistics of the training data."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must cover the same channels")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive per channel, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=tuple(float(v) for v in d["mean"]), std=tuple(float(v) for v in d["std"]))


def dataset_stats(images: Tensor) -> NormalizationStats:
    """Per-channel mean/std over a stack of images, for the normalized view."""
    images = torch.as_tensor(images)
    if images.ndim != 4:
        raise ValueError("expected (N, C, H, W)")
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-8)
    return NormalizationStats(
        mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std)
    )


@dataclass(frozen=True)
class TransformSpec:
    """One stochastic transform: kind, application probability, magnitudes."""

    kind: str
    probability: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _TRANSFORMS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "probability": self.probability, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(kind=d["kind"], probability=float(d["probability"]), params=dict(d["params"]))


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered stochastic transform chain applied before standardization."""

    transforms: tuple[TransformSpec, ...] = ()

    def to_dict(self) -> dict:
        return {"transforms": [t.to_dict() for t in self.transforms]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(transforms=tuple(TransformSpec.from_dict(t) for t in d["transforms"]))


def identity_policy() -> AugmentationPolicy:
    return AugmentationPolicy(transforms=())


def default_image_policy(size: int = 32) -> AugmentationPolicy:
    """The standard contrastive recipe: crop, flip, jitter, grayscale, blur."""
    return AugmentationPolicy(
        transforms=(
            TransformSpec("random_resized_crop", 1.0, {"scale": [0.2, 1.0], "ratio": [0.75, 4.0 / 3.0]}),
            TransformSpec("horizontal_flip", 0.5),
            TransformSpec(
                "color_jitter", 0.8, {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4}
            ),
            TransformSpec("random_grayscale", 0.2),
            TransformSpec("gaussian_blur", 0.5, {"sigma": [0.1, 2.0], "kernel_size": 2 * (size // 20) + 3}),
        )
    )


def default_vector_policy(
    dropout_p: float = 0.3, noise_sigma: float = 0.8, scale_range: tuple[float, float] = (0.7, 1.3)
) -> AugmentationPolicy:
    """Lossy recipe for flat feature vectors shaped as (1, 1, D) images."""
    return AugmentationPolicy(
        transforms=(
            TransformSpec("feature_dropout", 1.0, {"p": dropout_p}),
            TransformSpec("gaussian_noise", 1.0, {"sigma": noise_sigma}),
            TransformSpec("random_scale", 1.0, {"range": list(scale_range)}),
        )
    )


@dataclass
class ViewQuadruple:
    """The four transformed inputs for one anchor/counterpart pairing."""

    anchor_norm: Tensor
    anchor_aug: Tensor
    counter_norm: Tensor
    counter_aug: Tensor
    anchor_index: int
    counterpart_index: int

    def __post_init__(self) -> None:
        if self.anchor_index == self.counterpart_index:
            raise ValueError("anchor cannot be its own counterpart")


# ---------------------------------------------------------------------------
# transforms: every implementation is batched over (N, C, H, W) and draws a
# fixed number of random tensors so the generator stream stays reproducible
# whether or not individual samples end up transformed.
# ---------------------------------------------------------------------------


def _uniform(n: int, lo: float, hi: float, g: torch.Generator, dtype: torch.dtype) -> Tensor:
    return torch.rand(n, generator=g, dtype=dtype) * (hi - lo) + lo


def _horizontal_flip(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    return x.flip(-1)

def _gaussian_noise(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    sigma = float(params.get("sigma", 0.1))
    return x + sigma * torch.randn(x.shape, generator=g, dtype=x.dtype)


def _feature_dropout(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    p = float(params.get("p", 0.2))
    keep = (torch.rand(x.shape, generator=g, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep


def _random_scale(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    lo, hi = params.get("range", (0.8, 1.2))
    factors = _uniform(x.shape[0], float(lo), float(hi), g, x.dtype)
    return x * factors.view(-1, 1, 1, 1)


def _color_jitter(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    n = x.shape[0]
    out = x
    for key, op in (("brightness", "mul"), ("contrast", "blend_mean"), ("saturation", "blend_gray")):
        amount = float(params.get(key, 0.0))
        factors = _uniform(n, max(0.0, 1.0 - amount), 1.0 + amount, g, x.dtype).view(-1, 1, 1, 1)
        if amount == 0.0:
            continue
        if op == "mul":
            out = out * factors
        elif op == "blend_mean":
            mean = out.mean(dim=(1, 2, 3), keepdim=True)
            out = (out - mean) * factors + mean
        elif op == "blend_gray" and x.shape[1] == 3:
            gray = _luma(out)
            out = out * factors + gray * (1.0 - factors)
    return out


def _luma(x: Tensor) -> Tensor:
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * weights).sum(dim=1, keepdim=True).expand_as(x)


def _random_grayscale(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    if x.shape[1] != 3:
        return x
    return _luma(x)


def _gaussian_blur(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    lo, hi = params.get("sigma", (0.1, 2.0))
    kernel_size = int(params.get("kernel_size", 5))
    if kernel_size % 2 != 1:
        raise ValueError("blur kernel size must be odd")
    n, c, h, w = x.shape
    sigma = _uniform(n, float(lo), float(hi), g, x.dtype)
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=x.dtype)
    kernel = torch.exp(-(coords**2) / (2.0 * sigma.view(-1, 1) ** 2))
    kernel = kernel / kernel.sum(dim=1, keepdim=True)
    weight = kernel.repeat_interleave(c, dim=0)  # one kernel per (sample, channel)
    y = x.reshape(1, n * c, h, w)
    if w > 1:
        pad = min(half, w - 1)
        trimmed = weight[:, half - pad : half + pad + 1]
        trimmed = trimmed / trimmed.sum(dim=1, keepdim=True)
        y = F.pad(y, (pad, pad, 0, 0), mode="reflect")
        y = F.conv2d(y, trimmed.view(n * c, 1, 1, -1), groups=n * c)
    if h > 1:
        pad = min(half, h - 1)
        trimmed = weight[:, half - pad : half + pad + 1]
        trimmed = trimmed / trimmed.sum(dim=1, keepdim=True)
        y = F.pad(y, (0, 0, pad, pad), mode="reflect")
        y = F.conv2d(y, trimmed.view(n * c, 1, -1, 1), groups=n * c)
    return y.reshape(n, c, h, w)


def _random_resized_crop(x: Tensor, params: dict, g: torch.Generator) -> Tensor:
    scale_lo, scale_hi = params.get("scale", (0.2, 1.0))
    n, c, h, w = x.shape
    if h == 1:
        return _crop_resize_rows(x, float(scale_lo), float(scale_hi), g)
    ratio_lo, ratio_hi = params.get("ratio", (0.75, 4.0 / 3.0))
    area = _uniform(n, float(scale_lo), float(scale_hi), g, torch.float64) * (h * w)
    log_ratio = _uniform(n, float(np.log(ratio_lo)), float(np.log(ratio_hi)), g, torch.float64)
    pos = torch.rand(n, 2, generator=g, dtype=torch.float64)
    out = torch.empty_like(x)
    for i in range(n):
        ratio = float(torch.exp(log_ratio[i]))
        crop_w = int(np.clip(round(float(torch.sqrt(area[i] * ratio))), 1, w))
        crop_h = int(np.clip(round(float(torch.sqrt(area[i] / ratio))), 1, h))
        top = int(pos[i, 0] * (h - crop_h + 1))
        left = int(pos[i, 1] * (w - crop_w + 1))
        patch = x[i : i + 1, :, top : top + crop_h, left : left + crop_w]
        out[i] = F.interpolate(patch, size=(h, w), mode="bilinear", align_corners=False)[0]
    return out


def _crop_resize_rows(x: Tensor, scale_lo: float, scale_hi: float, g: torch.Generator) -> Tensor:
    """Batched crop-and-resize along the last axis for (N, C, 1, W) inputs."""
    n, c, h, w = x.shape
    frac = _uniform(n, scale_lo, scale_hi, g, torch.float64)
    lengths = (frac * w).round().clamp(min=2.0, max=float(w))
    starts = (torch.rand(n, generator=g, dtype=torch.float64) * (w - lengths + 1.0)).floor()
    grid = torch.arange(w, dtype=torch.float64)
    src = starts[:, None] + grid[None, :] * (lengths[:, None] - 1.0) / (w - 1.0)
    lo = src.floor().long().clamp(0, w - 1)
    hi = (lo + 1).clamp(max=w - 1)
    t = (src - lo.to(src.dtype)).to(x.dtype)
    flat = x[:, :, 0, :]
    left = flat.gather(-1, lo[:, None, :].expand(n, c, w))
    right = flat.gather(-1, hi[:, None, :].expand(n, c, w))
    blended = (1.0 - t[:, None, :]) * left + t[:, None, :] * right
    return blended.reshape(n, c, 1, w)


_TRANSFORMS: dict[str, Callable[[Tensor, dict, torch.Generator], Tensor]] = {
    "random_resized_crop": _random_resized_crop,
    "horizontal_flip": _horizontal_flip,
    "color_jitter": _color_jitter,
    "random_grayscale": _random_grayscale,
    "gaussian_blur": _gaussian_blur,
    "gaussian_noise": _gaussian_noise,
    "feature_dropout": _feature_dropout,
    "random_scale": _random_scale,
}


def _as_batch(image: Tensor) -> tuple[Tensor, bool]:
    image = torch.as_tensor(image)
    if image.ndim == 3:
        return image.unsqueeze(0), True
    if image.ndim == 4:
        return image, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {tuple(image.shape)}")


def _standardize(images: Tensor, mean, std, target_shape=None) -> Tensor:
    c = images.shape[1]
    mean = torch.as_tensor(mean, dtype=images.dtype)
    std = torch.as_tensor(std, dtype=images.dtype)
    if mean.numel() != c or std.numel() != c:
        raise ValueError(f"stats cover {mean.numel()} channels, images have {c}")
    if (std <= 0).any():
        raise ValueError("std must be positive per channel")
    if target_shape is not None and tuple(images.shape[1:]) != tuple(target_shape):
        if target_shape[0] != c:
            raise ValueError("cannot resize across channel counts")
        images = F.interpolate(
            images, size=tuple(target_shape[1:]), mode="bilinear", align_corners=False
        )
    return (images - mean.view(1, c, 1, 1)) / std.view(1, c, 1, 1)


def normalized_view(image: Tensor, mean, std, target_shape=None) -> Tensor:
    """Invertible view: resize to the training shape, then standardize."""
    batch, single = _as_batch(image)
    out = _standardize(batch, mean, std, target_shape)
    return out[0] if single else out


def denormalize_view(image: Tensor, mean, std) -> Tensor:
    """Undo the per-channel affine transform of `normalized_view`."""
    batch, single = _as_batch(image)
    c = batch.shape[1]
    mean = torch.as_tensor(mean, dtype=batch.dtype).view(1, c, 1, 1)
    std = torch.as_tensor(std, dtype=batch.dtype).view(1, c, 1, 1)
    out = batch * std + mean
    return out[0] if single else out


def augmented_view(
    image: Tensor,
    policy: AugmentationPolicy,
    mean,
    std,
    rng: torch.Generator,
    target_shape=None,
) -> Tensor:
    """Lossy view: run the policy's transform chain, then standardize.

    With an empty policy this reduces to `normalized_view`. Each transform
    draws its per-sample application mask and parameters from `rng` in a
    fixed order, so equal generator states give identical outputs.
    """
    batch, single = _as_batch(image)
    out = batch
    for spec in policy.transforms:
        mask = torch.rand(out.shape[0], generator=rng, dtype=torch.float64) < spec.probability
        transformed = _TRANSFORMS[spec.kind](out, spec.params, rng)
        out = torch.where(mask.view(-1, 1, 1, 1), transformed, out)
    out = _standardize(out, mean, std, target_shape)
    return out[0] if single else out


def sample_counterparts(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform derangement of 0..N-1: every anchor gets a distinct counterpart."""
    if batch_size < 2:
        raise ValueError(f"need at least 2 items to pair, got {batch_size}")
    idx = np.arange(batch_size)
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == idx):
            return perm


def make_view_quadruples(
    batch: ImageBatch,
    pairing: np.ndarray,
    policy: AugmentationPolicy,
    stats: NormalizationStats,
    rng: torch.Generator,
    target_shape=None,
) -> list[ViewQuadruple]:
    """Build the four views for every anchor/counterpart pair of a batch.

    Each image is normalized once and augmented once per step; the
    counterpart views reuse the per-image transforms through the pairing.
    """
    n = len(batch)
    pairing = np.asarray(pairing)
    if sorted(pairing.tolist()) != list(range(n)) or np.any(pairing == np.arange(n)):
        raise ValueError("pairing must be a derangement of the batch indices")
    norm = normalized_view(batch.images, stats.mean, stats.std, target_shape)
    aug = augmented_view(batch.images, policy, stats.mean, stats.std, rng, target_shape)
    return [
        ViewQuadruple(
            anchor_norm=norm[i],
            anchor_aug=aug[i],
            counter_norm=norm[pairing[i]],
            counter_aug=aug[pairing[i]],
            anchor_index=i,
            counterpart_index=int(pairing[i]),
        )
        for i in range(n)
    ]
