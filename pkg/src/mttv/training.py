"""Pretraining loop, checkpoint evaluation, and pairing-option analysis.

One process owns the model. Per batch: draw a counterpart derangement, build
the four views, encode (online encoder gets anchor-normalized and
counterpart-augmented, target encoder the other two), fuse, score with the
thresholded loss, backpropagate into the online encoder only, step, then EMA
the target. All randomness is keyed by (seed, epoch, stream), so a resumed
run continues exactly where the checkpoint stopped.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import core, views
from .config import RunConfig
from .data import (
    LabeledDataset,
    SubsampleSpec,
    apply_profile,
    build_exponential_counts,
    generate_synthetic_eval,
    generate_synthetic_lt,
    load_cifar,
    stratified_subsample,
)
from .encoders import MomentumPair, load_checkpoint, save_checkpoint
from .evaluation import (
    GroupPartition,
    GroupReport,
    RunTracker,
    compute_feature_bank,
    extract_features,
    group_partition,
    knn_evaluate,
    linear_probe,
    load_metrics,
)
from .views import ImageBatch, NormalizationStats, dataset_stats


class NumericsError(RuntimeError):
    """Non-finite loss or other numeric failure (CLI exit code 3)."""


class CollapseError(NumericsError):
    """Every off-self similarity was eliminated for a full epoch."""


@dataclass
class PretrainResult:
    config: RunConfig
    checkpoint_path: Path
    metrics_path: Path
    final_report: GroupReport | None
    final_loss: float


def learning_rate(epoch: int, base_lr: float, max_epochs: int, warmup_frac: float = 0.10) -> float:
    """Linear warm-up over the first `warmup_frac` of epochs, then cosine decay."""
    warmup = int(round(warmup_frac * max_epochs))
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    span = max(1, max_epochs - warmup)
    progress = (epoch - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def configure_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def load_datasets(config: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Training (long-tailed) and evaluation (balanced) splits per the config."""
    data = config.data
    if data.source == "synthetic":
        train = generate_synthetic_lt(data.synthetic)
        eval_set = generate_synthetic_eval(data.synthetic, data.eval_per_class)
    else:
        num_classes = {"cifar10": 10, "cifar100": 100}[data.source]
        full = load_cifar(data.root, num_classes, train=True)
        counts = full.class_counts()
        profile = build_exponential_counts(int(counts.min()), num_classes, data.lt_r)
        train = apply_profile(full, profile, seed=config.seed)
        eval_set = load_cifar(data.root, num_classes, train=False)
    if data.subsample_s < 1.0:
        train = stratified_subsample(train, SubsampleSpec(data.subsample_s, data.subsample_seed))
    return train, eval_set


def _as_images(rows: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    tensor = torch.as_tensor(rows, dtype=dtype)
    if tensor.ndim == 2:
        return tensor.view(tensor.shape[0], 1, 1, -1)
    if tensor.ndim == 4:
        return tensor
    raise ValueError(f"expected (N, D) or (N, C, H, W) features, got {tuple(tensor.shape)}")


def _epoch_streams(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator, torch.Generator]:
    shuffle = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1]))
    pairing = np.random.default_rng(np.random.SeedSequence([seed, epoch, 2]))
    aug_seed = int(np.random.SeedSequence([seed, epoch, 3]).generate_state(1)[0])
    gen = torch.Generator()
    gen.manual_seed(aug_seed)
    return shuffle, pairing, gen


def _training_quadruples(
    batch: ImageBatch,
    pairing: np.ndarray,
    config: RunConfig,
    stats: NormalizationStats,
    gen: torch.Generator,
) -> list[views.ViewQuadruple]:
    shape = config.encoder.input_shape
    if config.views == "na":
        return views.make_view_quadruples(batch, pairing, config.augmentation, stats, gen, shape)
    # aa ablation: the invertible slots carry a second independent augmentation
    first = views.augmented_view(batch.images, config.augmentation, stats.mean, stats.std, gen, shape)
    second = views.augmented_view(batch.images, config.augmentation, stats.mean, stats.std, gen, shape)
    return [
        views.ViewQuadruple(
            anchor_norm=first[i],
            anchor_aug=second[i],
            counter_norm=first[pairing[i]],
            counter_aug=second[pairing[i]],
            anchor_index=i,
            counterpart_index=int(pairing[i]),
        )
        for i in range(len(batch))
    ]


def _batch_loss(
    pair: MomentumPair, quads: list[views.ViewQuadruple], config: RunConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss and the pre-mask similarity matrix of the current batch."""
    if config.method == "mttv":
        z = pair.forward_quadruple(quads)
        left, right = core.option_pairs(
            z.anchor_norm, z.anchor_aug, z.counter_norm, z.counter_aug,
            option=config.option, op=config.loss.fusion,
        )
        fused = core.FusedPairBatch(left, right)
        items = torch.cat([fused.queries, fused.keys], dim=0)
        sims = core.cosine_similarity_matrix(items, items)
        return core.mttv_loss(fused, config.loss), sims.detach()
    # plain NT-Xent baseline on unfused views, no thresholding; symmetrized so
    # the online encoder receives gradients from both views of each image
    first = torch.stack([q.anchor_norm for q in quads])
    second = torch.stack([q.anchor_aug for q in quads])
    n = first.shape[0]
    partners = (torch.arange(2 * n) + n) % (2 * n)
    tau = config.loss.temperature
    with torch.no_grad():
        k_second = pair.encoder_k(second)
        k_first = pair.encoder_k(first)
    items = torch.cat([pair.encoder_q(first), k_second], dim=0)
    swapped = torch.cat([pair.encoder_q(second), k_first], dim=0)
    loss = 0.5 * (
        core.nt_xent_loss(items, partners, tau) + core.nt_xent_loss(swapped, partners, tau)
    )
    sims = core.cosine_similarity_matrix(items, items)
    return loss, sims.detach()


def _knn_probe(
    pair: MomentumPair,
    train: LabeledDataset,
    eval_set: LabeledDataset,
    stats: NormalizationStats,
    config: RunConfig,
    partition: GroupPartition,
) -> GroupReport:
    bank = compute_feature_bank(
        pair.encoder_q, train, stats, target_shape=config.encoder.input_shape
    )
    test_feats = extract_features(
        pair.encoder_q, eval_set, stats, target_shape=config.encoder.input_shape
    )
    k = min(config.schedule.knn_k, len(bank))
    return knn_evaluate(bank, test_feats, eval_set.labels, k=k, partition=partition)


def _checkpoint_payload(
    config: RunConfig, pair: MomentumPair, optimizer, epoch: int, step: int
) -> dict:
    return {
        "format": 1,
        "config": config.to_dict(),
        "epoch": epoch,
        "global_step": step,
        "encoder_q": pair.encoder_q.state_dict(),
        "encoder_k": pair.encoder_k.state_dict(),
        "optimizer": optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }


def pretrain(config: RunConfig, out_dir, resume=None) -> PretrainResult:
    """Run the full pretraining loop; emits a metrics log and checkpoints.

    Aborts with `NumericsError` on a non-finite loss, and with
    `CollapseError` when thresholding eliminated every off-self similarity
    for an entire epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_determinism(config.deterministic)

    train, eval_set = load_datasets(config)
    if len(train) < config.batch_size:
        raise ValueError(
            f"batch size {config.batch_size} exceeds training set size {len(train)}"
        )
    stats = dataset_stats(_as_images(train.features))
    partition = group_partition(train.class_counts())

    pair = MomentumPair(config.encoder, config.ema_momentum, seed=config.seed)
    optimizer = torch.optim.SGD(
        pair.encoder_q.parameters(),
        lr=config.optimizer.lr,
        momentum=config.optimizer.momentum,
        weight_decay=config.optimizer.weight_decay,
    )

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    start_epoch = 0
    global_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        stored = dict(payload["config"])
        current = config.to_dict()
        # scheduling knobs may change on resume (e.g. extending a run); the
        # scientific configuration must match exactly
        stored.pop("schedule", None)
        reference = {k: v for k, v in current.items() if k != "schedule"}
        if stored != reference:
            raise ValueError("checkpoint was produced by a different run config")
        pair.encoder_q.load_state_dict(payload["encoder_q"])
        pair.encoder_k.load_state_dict(payload["encoder_k"])
        optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        start_epoch = payload["epoch"]
        global_step = payload["global_step"]
        tracker = RunTracker(metrics_path, resume=True)
    else:
        tracker = RunTracker(metrics_path, header=config.to_dict())

    schedule = config.schedule
    steps_per_epoch = len(train) // config.batch_size
    report: GroupReport | None = None
    final_loss = float("nan")

    for epoch in range(start_epoch, schedule.max_epochs):
        lr = learning_rate(epoch, config.optimizer.lr, schedule.max_epochs, schedule.warmup_frac)
        for grp in optimizer.param_groups:
            grp["lr"] = lr
        shuffle_rng, pairing_rng, gen = _epoch_streams(config.seed, epoch)
        order = shuffle_rng.permutation(len(train))
        epoch_fully_eliminated = steps_per_epoch > 0

        for step_in_epoch in range(steps_per_epoch):
            idx = order[step_in_epoch * config.batch_size : (step_in_epoch + 1) * config.batch_size]
            batch = ImageBatch(
                images=_as_images(train.features[idx]),
                labels=torch.as_tensor(train.labels[idx]),
            )
            pairing = views.sample_counterparts(len(batch), pairing_rng)
            quads = _training_quadruples(batch, pairing, config, stats, gen)
            loss, sims = _batch_loss(pair, quads, config)
            elim = core.elimination_rate(
                sims, config.loss.lambda_low, config.loss.lambda_high, exclude_diagonal=True
            )
            if not torch.isfinite(loss):
                raise NumericsError(
                    f"non-finite loss at step {global_step}: similarity "
                    f"min={sims.min():.4f} max={sims.max():.4f} mean={sims.mean():.4f}, "
                    f"elimination rate {elim:.3f}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            pair.ema_update()

            final_loss = float(loss.detach())
            epoch_fully_eliminated &= elim == 1.0
            record = {
                "step": global_step,
                "epoch": epoch,
                "loss": final_loss,
                "elimination_rate": elim,
                "mi_lower_bound": core.mi_lower_bound(final_loss, len(batch)),
                "lr": lr,
                "knn_acc": None,
            }
            last_of_epoch = step_in_epoch == steps_per_epoch - 1
            probing = last_of_epoch and (
                epoch == schedule.max_epochs - 1
                or (schedule.knn_every > 0 and (epoch + 1) % schedule.knn_every == 0)
            )
            if probing:
                report = _knn_probe(pair, train, eval_set, stats, config, partition)
                record["knn_acc"] = report.overall_acc
            tracker.append(record)
            global_step += 1

        if epoch_fully_eliminated:
            raise CollapseError(
                f"every off-self similarity fell outside "
                f"[{config.loss.lambda_low}, {config.loss.lambda_high}] for all of epoch {epoch}"
            )
        if schedule.checkpoint_every > 0 and (epoch + 1) % schedule.checkpoint_every == 0:
            stamped = out_dir / f"checkpoint_epoch_{epoch + 1:04d}.pt"
            save_checkpoint(
                stamped, _checkpoint_payload(config, pair, optimizer, epoch + 1, global_step)
            )
        if epoch == schedule.max_epochs - 1:
            save_checkpoint(
                checkpoint_path, _checkpoint_payload(config, pair, optimizer, epoch + 1, global_step)
            )

    return PretrainResult(
        config=config,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        final_report=report,
        final_loss=final_loss,
    )


def evaluate_checkpoint(checkpoint_path, mode: str, out_path=None) -> GroupReport:
    """KNN or linear probe of a stored checkpoint's online encoder."""
    if mode not in ("knn", "linear"):
        raise ValueError(f"mode must be 'knn' or 'linear', got {mode!r}")
    payload = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(payload["config"])
    configure_determinism(config.deterministic)
    train, eval_set = load_datasets(config)
    stats = dataset_stats(_as_images(train.features))
    partition = group_partition(train.class_counts())
    pair = MomentumPair(config.encoder, config.ema_momentum, seed=config.seed)
    pair.encoder_q.load_state_dict(payload["encoder_q"])
    if mode == "knn":
        report = _knn_probe(pair, train, eval_set, stats, config, partition)
    else:
        report = linear_probe(
            pair.encoder_q,
            train,
            eval_set,
            stats,
            epochs=config.schedule.linear_epochs,
            seed=config.seed,
            partition=partition,
            target_shape=config.encoder.input_shape,
        )
    if out_path is not None:
        Path(out_path).write_text(
            json.dumps({"mode": mode, "report": report.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
    return report


ANALYSIS_VARIANTS = (
    ("mttv_option1", {"method": "mttv", "option": 1}),
    ("mttv_option2", {"method": "mttv", "option": 2}),
    ("mttv_option3", {"method": "mttv", "option": 3}),
    ("nt_xent_aa", {"method": "nt_xent", "views": "aa"}),
    ("nt_xent_na", {"method": "nt_xent", "views": "na"}),
)


def analyze_options(config: RunConfig, out_dir) -> dict:
    """Short pretraining per pairing option plus the NT-Xent view ablation.

    Emits each variant's anchor-information ratios, final KNN report, and the
    per-step loss / information-bound curves behind the option comparison.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comparison: dict = {"variants": {}}
    for name, overrides in ANALYSIS_VARIANTS:
        variant_cfg = dataclasses.replace(config, **overrides)
        result = pretrain(variant_cfg, out_dir / name)
        records = load_metrics(result.metrics_path)
        entry = {
            "report": result.final_report.to_dict() if result.final_report else None,
            "final_loss": result.final_loss,
            "loss_curve": [r["loss"] for r in records],
            "mi_curve": [r["mi_lower_bound"] for r in records],
            "info_ratios": None,
        }
        if variant_cfg.method == "mttv":
            ratios = core.info_ratios(variant_cfg.option)
            entry["info_ratios"] = {
                "anchor_ratios": list(ratios.anchor_ratios),
                "shared_capacity": ratios.shared_capacity,
            }
        comparison["variants"][name] = entry
    (out_dir / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True) + "\n")
    return comparison
