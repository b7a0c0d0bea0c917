"""Run configuration: every knob of a pretraining run, fully serialized.

Configs are JSON files; all defaults are written out explicitly so a stored
config or checkpoint never depends on implicit behavior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import LossConfig
from .data import SyntheticLTConfig
from .encoders import EncoderSpec
from .views import AugmentationPolicy, default_image_policy, default_vector_policy


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


DATA_SOURCES = ("synthetic", "cifar10", "cifar100")
METHODS = ("mttv", "nt_xent")
VIEW_MODES = ("na", "aa")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    synthetic: SyntheticLTConfig = field(default_factory=SyntheticLTConfig)
    subsample_s: float = 1.0
    subsample_seed: int = 0
    eval_per_class: int = 50
    lt_r: float = 0.01  # profile ratio for image sources
    root: str | None = None  # local dataset root for image sources

    def __post_init__(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"source must be one of {DATA_SOURCES}, got {self.source!r}")
        if not 0.0 < self.subsample_s <= 1.0:
            raise ConfigError(f"subsample ratio must be in (0, 1], got {self.subsample_s}")
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class must be positive")
        if self.source != "synthetic" and self.root is None:
            raise ConfigError(f"source {self.source!r} needs a local dataset root")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "synthetic": vars(self.synthetic).copy(),
            "subsample_s": self.subsample_s,
            "subsample_seed": self.subsample_seed,
            "eval_per_class": self.eval_per_class,
            "lt_r": self.lt_r,
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            source=d["source"],
            synthetic=SyntheticLTConfig(**d["synthetic"]),
            subsample_s=float(d["subsample_s"]),
            subsample_seed=int(d["subsample_seed"]),
            eval_per_class=int(d["eval_per_class"]),
            lt_r=float(d["lt_r"]),
            root=d.get("root"),
        )


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain stochastic gradient descent on the online encoder."""

    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("optimizer momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "momentum": self.momentum}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(lr=float(d["lr"]), weight_decay=float(d["weight_decay"]), momentum=float(d["momentum"]))


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warm-up over the first tenth of training, then cosine decay."""

    max_epochs: int = 200
    warmup_frac: float = 0.10
    knn_every: int = 0  # epochs between KNN probes; 0 = final only
    knn_k: int = 200
    checkpoint_every: int = 0  # 0 = final checkpoint only
    linear_epochs: int = 100

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup fraction must be in [0, 1)")
        if self.knn_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("probe and checkpoint intervals must be nonnegative")
        if self.knn_k < 1 or self.linear_epochs < 0:
            raise ConfigError("knn_k must be positive and linear_epochs nonnegative")

    def to_dict(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "warmup_frac": self.warmup_frac,
            "knn_every": self.knn_every,
            "knn_k": self.knn_k,
            "checkpoint_every": self.checkpoint_every,
            "linear_epochs": self.linear_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(
            max_epochs=int(d["max_epochs"]),
            warmup_frac=float(d["warmup_frac"]),
            knn_every=int(d["knn_every"]),
            knn_k=int(d["knn_k"]),
            checkpoint_every=int(d["checkpoint_every"]),
            linear_epochs=int(d["linear_epochs"]),
        )


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augmentation: AugmentationPolicy = field(default_factory=default_vector_policy)
    method: str = "mttv"
    views: str = "na"
    option: int = 1
    batch_size: int = 128
    ema_momentum: float = 0.9
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.views not in VIEW_MODES:
            raise ConfigError(f"views must be one of {VIEW_MODES}, got {self.views!r}")
        if self.option not in (1, 2, 3):
            raise ConfigError(f"option must be 1, 2 or 3, got {self.option}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 to pair counterparts")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("EMA momentum must be in [0, 1]")
        if self.data.source == "synthetic":
            expected = (1, 1, self.data.synthetic.feature_dim)
            if tuple(self.encoder.input_shape) != expected:
                raise ConfigError(
                    f"encoder input shape {tuple(self.encoder.input_shape)} does not "
                    f"match synthetic feature layout {expected}"
                )

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "encoder": self.encoder.to_dict(),
            "loss": self.loss.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "schedule": self.schedule.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "method": self.method,
            "views": self.views,
            "option": self.option,
            "batch_size": self.batch_size,
            "ema_momentum": self.ema_momentum,
            "seed": self.seed,
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(
                data=DataConfig.from_dict(d["data"]),
                encoder=EncoderSpec.from_dict(d["encoder"]),
                loss=LossConfig.from_dict(d["loss"]),
                optimizer=OptimizerConfig.from_dict(d["optimizer"]),
                schedule=ScheduleConfig.from_dict(d["schedule"]),
                augmentation=AugmentationPolicy.from_dict(d["augmentation"]),
                method=d["method"],
                views=d["views"],
                option=int(d["option"]),
                batch_size=int(d["batch_size"]),
                ema_momentum=float(d["ema_momentum"]),
                seed=int(d["seed"]),
                deterministic=bool(d["deterministic"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid run config: {exc}") from exc


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(payload)


def toy_preset(seed: int = 0, max_epochs: int = 200) -> RunConfig:
    """Desk-scale synthetic preset: trains in seconds on a laptop CPU.

    The augmentation is deliberately harsh (most of the class signal is
    destroyed in a lossy view) so that retaining one invertible view per
    image measurably changes what the encoder can learn about tail classes.
    """
    synthetic = SyntheticLTConfig(
        num_classes=10,
        feature_dim=16,
        cluster_separation=4.0,
        within_cluster_std=1.0,
        r=0.01,
        n_max=500,
        seed=seed,
    )
    return RunConfig(
        data=DataConfig(source="synthetic", synthetic=synthetic),
        encoder=EncoderSpec(
            backbone="small_mlp",
            input_shape=(1, 1, synthetic.feature_dim),
            hidden_width=128,
            embedding_dim=64,
            projection_dim=32,
        ),
        loss=LossConfig(temperature=0.2, lambda_low=0.1, lambda_high=0.9),
        optimizer=OptimizerConfig(lr=0.3),
        # majority vote needs k below the tail-class bank count to be able
        # to predict rare classes at this scale
        schedule=ScheduleConfig(max_epochs=max_epochs, knn_k=5),
        augmentation=default_vector_policy(dropout_p=0.6, noise_sigma=1.2),
        batch_size=128,
        seed=seed,
    )


def cifar_preset(num_classes: int = 10, root: str = "data", seed: int = 0) -> RunConfig:
    """Image-scale preset mirroring the documented CIFAR-LT recipe."""
    return RunConfig(
        data=DataConfig(
            source=f"cifar{num_classes}", synthetic=SyntheticLTConfig(), lt_r=0.01, root=root
        ),
        encoder=EncoderSpec(
            backbone="resnet18",
            input_shape=(3, 32, 32),
            embedding_dim=512,
            projection_dim=128,
        ),
        loss=LossConfig(temperature=0.5, lambda_low=0.1, lambda_high=0.9),
        optimizer=OptimizerConfig(lr=3.0, weight_decay=1e-4, momentum=0.9),
        schedule=ScheduleConfig(max_epochs=2000, knn_every=50, checkpoint_every=100),
        augmentation=default_image_policy(size=32),
        batch_size=1024,
        ema_momentum=0.9,
        seed=seed,
    )
