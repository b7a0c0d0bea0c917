"""Encoders and the online/target momentum pair.

The reference backbone is a small MLP so the whole suite runs in seconds;
ResNet-18/50 plug in through the same spec for image-scale runs. Every
backbone feeds a projection head of three linear layers with three batch
normalization units and two rectifier activations. The target encoder is
never touched by gradients: it tracks the online encoder by exponential
moving average, batch-norm statistics included.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .views import ViewQuadruple

BACKBONES = ("small_mlp", "resnet18", "resnet50")
_RESNET_DIMS = {"resnet18": 512, "resnet50": 2048}


@dataclass(frozen=True)
class EncoderSpec:
    backbone: str = "small_mlp"
    input_shape: tuple[int, int, int] = (1, 1, 16)
    hidden_width: int = 128
    embedding_dim: int = 64
    projection_dim: int = 32

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.backbone in _RESNET_DIMS and self.embedding_dim != _RESNET_DIMS[self.backbone]:
            raise ValueError(
                f"{self.backbone} emits {_RESNET_DIMS[self.backbone]}-dim features, "
                f"got embedding_dim={self.embedding_dim}"
            )
        for name in ("hidden_width", "embedding_dim", "projection_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "input_shape": list(self.input_shape),
            "hidden_width": self.hidden_width,
            "embedding_dim": self.embedding_dim,
            "projection_dim": self.projection_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            backbone=d["backbone"],
            input_shape=tuple(int(v) for v in d["input_shape"]),
            hidden_width=int(d["hidden_width"]),
            embedding_dim=int(d["embedding_dim"]),
            projection_dim=int(d["projection_dim"]),
        )


class _SmallMLP(nn.Module):
    """Flatten plus two hidden rectified layers; the desk-scale backbone."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        c, h, w = spec.input_shape
        self.in_features = c * h * w
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(self.in_features, spec.hidden_width),
            nn.ReLU(inplace=True),
            nn.Linear(spec.hidden_width, spec.hidden_width),
            nn.ReLU(inplace=True),
            nn.Linear(spec.hidden_width, spec.embedding_dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:].numel() != self.in_features:
            raise ValueError(
                f"expected (N, C, H, W) with {self.in_features} values per image, "
                f"got {tuple(x.shape)}"
            )
        return self.net(x)


def _projection_head(embedding_dim: int, projection_dim: int) -> nn.Module:
    return nn.Sequential(
        nn.Linear(embedding_dim, embedding_dim),
        nn.BatchNorm1d(embedding_dim),
        nn.ReLU(inplace=True),
        nn.Linear(embedding_dim, embedding_dim),
        nn.BatchNorm1d(embedding_dim),
        nn.ReLU(inplace=True),
        nn.Linear(embedding_dim, projection_dim),
        nn.BatchNorm1d(projection_dim),
    )


class Encoder(nn.Module):
    """Backbone plus projection head; `features` skips the head."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.backbone == "small_mlp":
            self.backbone = _SmallMLP(spec)
        else:
            from torchvision import models

            factory = {"resnet18": models.resnet18, "resnet50": models.resnet50}[spec.backbone]
            net = factory(weights=None)
            net.fc = nn.Identity()
            self.backbone = net
        self.projection = _projection_head(spec.embedding_dim, spec.projection_dim)

    def features(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.projection(self.backbone(x))


def build_encoder(spec: EncoderSpec, seed: int | None = None) -> Encoder:
    if seed is not None:
        torch.manual_seed(seed)
    return Encoder(spec)


def encode(encoder: Encoder, images: Tensor) -> Tensor:
    """Project a batch of images to raw (pre-normalization) embeddings."""
    return encoder(torch.as_tensor(images))


class QuadrupleEmbeddings(NamedTuple):
    """Projected views: the online encoder sees (anchor normalized,
    counterpart augmented), the target encoder the other two."""

    anchor_norm: Tensor  # encoder_q
    counter_aug: Tensor  # encoder_q
    anchor_aug: Tensor  # encoder_k, no gradient
    counter_norm: Tensor  # encoder_k, no gradient


class MomentumPair(nn.Module):
    """Gradient-trained online encoder and its EMA-tracked target twin.

    The target starts as an exact copy, never receives gradients, and stays
    in evaluation mode so its batch-norm buffers change only through
    `ema_update`.
    """

    def __init__(self, spec: EncoderSpec, momentum: float = 0.9, seed: int | None = None):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum = momentum
        self.encoder_q = build_encoder(spec, seed)
        self.encoder_k = Encoder(spec)
        self.encoder_k.load_state_dict(self.encoder_q.state_dict())
        for p in self.encoder_k.parameters():
            p.requires_grad_(False)
        self.encoder_k.eval()

    def train(self, mode: bool = True) -> "MomentumPair":
        super().train(mode)
        self.encoder_k.eval()
        return self

    @torch.no_grad()
    def ema_update(self) -> None:
        m = self.momentum
        q_state = dict(self.encoder_q.state_dict())
        for name, tensor_k in self.encoder_k.state_dict().items():
            tensor_q = q_state[name]
            if tensor_k.dtype.is_floating_point:
                tensor_k.copy_(m * tensor_k + (1.0 - m) * tensor_q)
            else:
                tensor_k.copy_(tensor_q)  # step counters are not averaged

    def forward_quadruple(self, quads: list[ViewQuadruple]) -> QuadrupleEmbeddings:
        anchor_norm = torch.stack([q.anchor_norm for q in quads])
        anchor_aug = torch.stack([q.anchor_aug for q in quads])
        counter_norm = torch.stack([q.counter_norm for q in quads])
        counter_aug = torch.stack([q.counter_aug for q in quads])
        z_anchor_norm = self.encoder_q(anchor_norm)
        z_counter_aug = self.encoder_q(counter_aug)
        with torch.no_grad():
            z_anchor_aug = self.encoder_k(anchor_aug)
            z_counter_norm = self.encoder_k(counter_norm)
        return QuadrupleEmbeddings(z_anchor_norm, z_counter_aug, z_anchor_aug, z_counter_norm)


def ema_update(pair: MomentumPair) -> MomentumPair:
    """Blend the target parameters toward the online ones: k <- m*k + (1-m)*q."""
    pair.ema_update()
    return pair


def forward_quadruple(pair: MomentumPair, quads: list[ViewQuadruple]) -> QuadrupleEmbeddings:
    return pair.forward_quadruple(quads)


def parameter_fingerprint(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; equal iff states are bit-equal."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, payload: dict) -> None:
    """Serialize a checkpoint dict; identical payloads give identical bytes."""
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, weights_only=False)
