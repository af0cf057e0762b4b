"""Report figures rendered to files (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["plot_improvement_curves", "plot_empirical_scaling"]


def plot_improvement_curves(rows: list[dict], limits: tuple[float, float],
                            out_path, note: str = "") -> str:
    """Closed-form train/infer improvement vs history length, with limits."""
    ns = [r["n"] for r in rows]
    train = [r["train_improvement"] for r in rows]
    infer = [r["infer_improvement"] for r in rows]
    train_lim, infer_lim = limits
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2), sharex=True)
    for ax, ys, lim, label in ((axes[0], train, train_lim, "training"),
                               (axes[1], infer, infer_lim, "inference")):
        ax.semilogx(ns, ys, lw=1.8)
        ax.axhline(lim, ls="--", color="crimson", lw=1.0)
        ax.annotate(f"limit {lim:g}", xy=(ns[0], lim),
                    xytext=(0, -12), textcoords="offset points",
                    color="crimson", fontsize=9)
        ax.set_xlabel("history length n")
        ax.set_ylabel(f"{label} improvement (x)")
        ax.grid(alpha=0.3, which="both")
    fig.suptitle(f"compressed vs title prompts {note}".strip())
    fig.tight_layout()
    out_path = str(Path(out_path))
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_empirical_scaling(rows: list[dict], out_path) -> str:
    """Measured per-step FLOP proxy and wall time vs history length."""
    modes = sorted({r["mode"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    for key, ax, label in (("flop_proxy", axes[0], "matmul FLOP proxy"),
                           ("wall_seconds", axes[1], "wall seconds")):
        for mode in modes:
            sub = sorted((r for r in rows if r["mode"] == mode),
                         key=lambda r: r["n"])
            ax.loglog([r["n"] for r in sub], [r[key] for r in sub],
                      marker="o", label=mode)
        ax.set_xlabel("history length n")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3, which="both")
        ax.legend()
    fig.suptitle("measured per-step cost by prompt mode")
    fig.tight_layout()
    out_path = str(Path(out_path))
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
