"""Figures rendered next to the TSV reports. Uses the Agg backend only."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(rows, path) -> Path:
    """Probe accuracy (mean with std bars) against the swept value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [r.value for r in rows]
        ax.errorbar(
            xs,
            [100 * r.result.mean for r in rows],
            yerr=[100 * r.result.std for r in rows],
            marker="o",
            capsize=3,
        )
        param = rows[0].param if rows else ""
        if param == "beta" and all(x > 0 for x in xs):
            ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel("test accuracy (%)")
        return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Seconds per loss evaluation against node count, one line per subgraph size."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k in sorted({r.k for r in rows}):
            sel = sorted((r for r in rows if r.k == k), key=lambda r: r.nodes)
            ax.plot([r.nodes for r in sel], [r.loss_seconds for r in sel], marker="o", label=f"k={k}")
        ax.set_xlabel("nodes")
        ax.set_ylabel("seconds per loss")
        ax.legend()
        return _save(fig, path)


def plot_trace(trace, path) -> Path:
    """Total loss and KL term per iteration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = [r["iteration"] for r in trace]
        ax.plot(it, [r["loss"] for r in trace], label="loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(it, [r["kl"] for r in trace], color="tab:orange", lw=0.8, label="KL")
        ax2.set_ylabel("KL")
        ax2.grid(False)
        fig.legend(loc="upper right")
        return _save(fig, path)


def plot_search(trials, path) -> Path:
    """Validation accuracy per random-search trial, with the running best."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = [r["trial"] for r in trials]
        v = [100 * r["val_accuracy"] for r in trials]
        best, run = [], -1.0
        for x in v:
            run = max(run, x)
            best.append(run)
        ax.plot(t, v, "o", label="trial")
        ax.step(t, best, where="post", label="best so far")
        ax.set_xlabel("trial")
        ax.set_ylabel("val accuracy (%)")
        ax.legend()
        return _save(fig, path)
