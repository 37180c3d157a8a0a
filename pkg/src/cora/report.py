"""Report emission: CSV/JSON artifacts and matplotlib figures.

Every rendering function takes plain rows/dicts so it can be tested without
running training. Figures are written straight to files (Agg backend).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Full-scale reference results (Amazon-Book backbone runs) for the target-set
# ablation, shown beside desk-scale numbers for context only; nothing at this
# scale is expected to match them.
FULL_SCALE_REFERENCE = {
    "qkvof": {"auc": 0.8141, "uauc": 0.6068},
    "qkvo": {"auc": 0.8179, "uauc": 0.6262},
    "qkv": {"auc": 0.7741, "uauc": 0.5747},
    "qko": {"auc": 0.8091, "uauc": 0.5949},
    "qk": {"auc": 0.7685, "uauc": 0.5644},
}


def write_csv(path, rows: list[dict], fieldnames: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_curves_csv(path, curves: list[dict]) -> None:
    fields = list(curves[0].keys()) if curves else ["epoch", "loss", "valid_auc"]
    write_csv(path, curves, fields)


def plot_curves(path, curves: list[dict], title: str = "training") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [c["epoch"] for c in curves]
    losses = [c.get("loss", c.get("train_loss")) for c in curves]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, losses, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    if curves and ("valid_auc" in curves[0] or "val_auc" in curves[0]):
        aucs = [c.get("valid_auc", c.get("val_auc")) for c in curves]
        ax2 = ax1.twinx()
        ax2.plot(epochs, aucs, color="tab:red", label="valid AUC")
        ax2.set_ylabel("valid AUC", color="tab:red")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_json(path, report) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")


def write_manifest(path, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


# -- ablation ------------------------------------------------------------------------

ABLATION_FIELDS = ["variant", "seed", "split", "auc", "uauc", "n"]


def write_ablation_csv(path, rows: list[dict]) -> None:
    write_csv(path, rows, ABLATION_FIELDS)


def summarize_ablation(rows: list[dict], variants: list[str]) -> list[dict]:
    """Collapse per-seed 'all'-split rows into mean±std per variant, with the
    full-scale reference columns attached where known."""
    out = []
    for variant in variants:
        aucs = [r["auc"] for r in rows
                if r["variant"] == variant and r["split"] == "all" and r["auc"] is not None]
        uaucs = [r["uauc"] for r in rows
                 if r["variant"] == variant and r["split"] == "all" and r["uauc"] is not None]
        ref = FULL_SCALE_REFERENCE.get(variant, {})
        out.append({
            "variant": variant,
            "auc_mean": float(np.mean(aucs)) if aucs else None,
            "auc_std": float(np.std(aucs)) if aucs else None,
            "uauc_mean": float(np.mean(uaucs)) if uaucs else None,
            "uauc_std": float(np.std(uaucs)) if uaucs else None,
            "n_seeds": len(aucs),
            "ref_auc": ref.get("auc"),
            "ref_uauc": ref.get("uauc"),
        })
    return out


SUMMARY_FIELDS = ["variant", "auc_mean", "auc_std", "uauc_mean", "uauc_std",
                  "n_seeds", "ref_auc", "ref_uauc"]


def write_ablation_summary(path, summary: list[dict]) -> None:
    write_csv(path, summary, SUMMARY_FIELDS)


def format_ablation_table(summary: list[dict]) -> str:
    lines = [f"{'variant':<8} {'auc':>16} {'uauc':>16} {'ref_auc':>8} {'ref_uauc':>9}"]
    for row in summary:
        if row["auc_mean"] is None:
            continue
        auc_s = f"{row['auc_mean']:.4f}±{row['auc_std']:.4f}"
        uauc_s = ("-" if row["uauc_mean"] is None
                  else f"{row['uauc_mean']:.4f}±{row['uauc_std']:.4f}")
        ref_a = "-" if row["ref_auc"] is None else f"{row['ref_auc']:.4f}"
        ref_u = "-" if row["ref_uauc"] is None else f"{row['ref_uauc']:.4f}"
        lines.append(f"{row['variant']:<8} {auc_s:>16} {uauc_s:>16} {ref_a:>8} {ref_u:>9}")
    return "\n".join(lines)


def plot_ablation(path, summary: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r for r in summary if r["auc_mean"] is not None]
    names = [r["variant"] for r in rows]
    means = [r["auc_mean"] for r in rows]
    stds = [r["auc_std"] or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_ylabel("test AUC (mean ± std)")
    ax.set_title("delta target-set ablation")
    lo = min(means) - (max(stds) if stds else 0) - 0.02
    ax.set_ylim(max(0.0, lo), 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_warm_cold(path, report) -> None:
    """Grouped bars of AUC/UAUC for the overall/warm/cold slices."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups = [("all", report.overall), ("warm", report.warm), ("cold", report.cold)]
    groups = [(n, g) for n, g in groups if g is not None and g.n > 0]
    names = [n for n, _ in groups]
    aucs = [g.auc if g.auc is not None else 0.0 for _, g in groups]
    uaucs = [g.uauc if g.uauc is not None else 0.0 for _, g in groups]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.18, aucs, width=0.36, label="AUC", color="tab:blue")
    ax.bar(x + 0.18, uaucs, width=0.36, label="UAUC", color="tab:orange")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("warm/cold slices")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_logits_csv(path, logits: np.ndarray, lengths=None) -> None:
    """Per-position logits, one row per (sample, position), vocab as columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    logits = np.asarray(logits)
    b, length, vocab = logits.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "position"] + [f"logit_{j}" for j in range(vocab)])
        for s in range(b):
            stop = int(lengths[s]) if lengths is not None else length
            for pos in range(stop):
                writer.writerow([s, pos] + [repr(float(v)) for v in logits[s, pos]])
