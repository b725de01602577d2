"""Matplotlib renderings of sweep, pruning and robustness results."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "svg.hashsalt": "neuraleq",  # stable element ids across runs
}
MARKERS = "osd^v<>ph*"


def _save(fig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp" + path.suffix)
    fig.savefig(tmp, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    os.replace(tmp, path)


def plot_ber_curves(points, path, title: str = "") -> None:
    """Log-scale BER vs SNR, one line per equalizer; zero-error points are dropped."""
    curves: dict = {}
    for p in points:
        curves.setdefault(p.equalizer_id, []).append(p)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        for i, (label, pts) in enumerate(curves.items()):
            pts = sorted((p for p in pts if p.bit_errors > 0), key=lambda p: p.snr_db)
            if not pts:
                continue
            ax.semilogy([p.snr_db for p in pts], [p.ber for p in pts],
                        marker=MARKERS[i % len(MARKERS)], ms=4, label=label)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("BER")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_layer_sparsity(report, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = range(len(report.layer_labels))
        for it in report.iterations:
            ax.plot(x, it.layer_sparsity, marker="o", ms=3,
                    label=f"iter {it.iteration} ({it.global_sparsity:.0%})")
        ax.set_xticks(list(x))
        ax.set_xticklabels(report.layer_labels, rotation=60, fontsize=7)
        ax.set_xlabel("layer (left to right)")
        ax.set_ylabel("sparsity")
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        _save(fig, path)


def plot_normalized_ber(report, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        xs = [0.0] + [it.global_sparsity for it in report.iterations]
        ys = [1.0] + [it.normalized_ber for it in report.iterations]
        ax.plot(xs, ys, marker="o", ms=4)
        ax.axhline(1.0, color="k", lw=0.6)
        ax.set_xlabel("sparsity")
        ax.set_ylabel("normalized BER")
        fig.tight_layout()
        _save(fig, path)


def plot_robustness(rows, path) -> None:
    by_eq: dict = {}
    for r in rows:
        by_eq.setdefault(r.equalizer, []).append(r)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, (label, rs) in enumerate(by_eq.items()):
            rs = sorted(rs, key=lambda r: r.p)
            ax.errorbar([100 * r.p for r in rs], [r.mean_ber for r in rs],
                        yerr=[r.std_ber for r in rs], marker=MARKERS[i], ms=4,
                        capsize=3, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("skew p (% of main cursor)")
        ax.set_ylabel("mean BER")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
