"""Figure rendering for sweep outputs. Files only; no interactive backends."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

VARIANT_STYLES = {
    "vfe": dict(color="tab:red", marker="o"),
    "vl-vfe": dict(color="tab:purple", marker="s"),
    "deep-jscc": dict(color="tab:blue", marker="^"),
    "quantization": dict(color="tab:green", marker="d"),
}


def _style(variant):
    return VARIANT_STYLES.get(variant, dict(color="tab:gray", marker="x"))


def rate_distortion_figure(records, out_path) -> Path:
    """Accuracy versus communication latency, one curve per variant."""
    groups = defaultdict(list)
    for r in records:
        groups[r.variant].append(r)
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    for variant, rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.latency_ms)
        ax.errorbar(
            [r.latency_ms for r in rows],
            [r.accuracy_pct for r in rows],
            yerr=[2 * r.accuracy_se for r in rows],
            label=variant,
            capsize=2,
            **_style(variant),
        )
    ax.set_xlabel("communication latency (ms)")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def dynamic_channel_figure(records, out_path) -> Path:
    """Latency and error rate as functions of the channel PSNR."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.variant, r.estimator_mode)].append(r)
    fig, (ax_lat, ax_err) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for (variant, mode), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.psnr_db)
        label = variant if mode == "known" else f"{variant} ({mode})"
        style = _style(variant)
        ax_lat.plot([r.psnr_db for r in rows], [r.latency_ms for r in rows], label=label, **style)
        ax_err.errorbar(
            [r.psnr_db for r in rows],
            [100.0 - r.accuracy_pct for r in rows],
            yerr=[2 * r.accuracy_se for r in rows],
            label=label,
            capsize=2,
            **style,
        )
    ax_lat.set_xlabel("PSNR (dB)")
    ax_lat.set_ylabel("latency (ms)")
    ax_lat.grid(alpha=0.3)
    ax_err.set_xlabel("PSNR (dB)")
    ax_err.set_ylabel("error rate (%)")
    ax_err.grid(alpha=0.3)
    ax_err.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def importance_histogram_figure(gamma, threshold, out_path, title=None) -> Path:
    """Distribution of per-dimension importance against the pruning threshold."""
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.bar(range(len(gamma)), sorted(gamma, reverse=True), width=0.9, color="tab:blue")
    ax.axhline(threshold, color="tab:red", linestyle="--", label=f"threshold {threshold:g}")
    ax.set_xlabel("dimension (sorted)")
    ax.set_ylabel("importance")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
