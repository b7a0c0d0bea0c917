"""Figures backing the training-dynamics and option-comparison analyses.

Every plot also writes `<image>.values.json` with the exact series it drew,
so rendered curves can be checked against the logged data.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import load_metrics

PLOT_KINDS = ("knn_curve", "elimination_curve", "option_compare")


def _write_values(out_path: Path, values: dict) -> None:
    out_path.with_suffix(out_path.suffix + ".values.json").write_text(
        json.dumps(values, indent=2, sort_keys=True) + "\n"
    )


def _save(fig, out_path: Path) -> None:
    fig.savefig(out_path, dpi=120, metadata={"Software": "mttv"} if out_path.suffix == ".png" else None)
    plt.close(fig)


def plot_knn_curve(log_path, out_path) -> Path:
    records = [r for r in load_metrics(log_path) if r.get("knn_acc") is not None]
    if not records:
        raise ValueError(f"no KNN records in {log_path}")
    out_path = Path(out_path)
    steps = [r["step"] for r in records]
    accs = [r["knn_acc"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, accs, marker="o")
    ax.set_xlabel("step")
    ax.set_ylabel("KNN top-1 accuracy")
    ax.set_title("KNN probe during pretraining")
    fig.tight_layout()
    _save(fig, out_path)
    _write_values(out_path, {"step": steps, "knn_acc": accs})
    return out_path


def plot_elimination_curve(log_path, out_path) -> Path:
    records = load_metrics(log_path)
    if not records:
        raise ValueError(f"no records in {log_path}")
    out_path = Path(out_path)
    steps = [r["step"] for r in records]
    rates = [r["elimination_rate"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, rates)
    ax.set_xlabel("step")
    ax.set_ylabel("eliminated similarity fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("Extreme-similarity elimination during training")
    fig.tight_layout()
    _save(fig, out_path)
    _write_values(out_path, {"step": steps, "elimination_rate": rates})
    return out_path


def plot_option_compare(comparison_path, out_path) -> Path:
    payload = json.loads(Path(comparison_path).read_text())
    variants = payload.get("variants", {})
    if not variants:
        raise ValueError(f"no variants in {comparison_path}")
    out_path = Path(out_path)
    names = sorted(variants)
    accs = [
        variants[n]["report"]["overall_acc"] if variants[n].get("report") else float("nan")
        for n in names
    ]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(range(len(names)), accs)
    ax1.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax1.set_ylabel("final KNN accuracy")
    for name in names:
        curve = variants[name].get("mi_curve") or []
        ax2.plot(range(len(curve)), curve, label=name)
    ax2.set_xlabel("step")
    ax2.set_ylabel("information lower bound")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out_path)
    _write_values(
        out_path,
        {
            "names": names,
            "final_knn_acc": accs,
            "mi_curves": {n: variants[n].get("mi_curve") for n in names},
        },
    )
    return out_path


def plot(input_path, kind: str, out_path) -> Path:
    if kind == "knn_curve":
        return plot_knn_curve(input_path, out_path)
    if kind == "elimination_curve":
        return plot_elimination_curve(input_path, out_path)
    if kind == "option_compare":
        return plot_option_compare(input_path, out_path)
    raise ValueError(f"kind must be one of {PLOT_KINDS}, got {kind!r}")
