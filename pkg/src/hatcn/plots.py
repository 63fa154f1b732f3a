"""SVG figures: explanation overlay, class-mean relevance and depth sweep."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable ids and no timestamp, so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "hatcn"
_META = {"Date": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_explanation(path, values, freq, segments, window=None, title: str = "") -> None:
    """Series with its relevance frequency and the extracted segments shaded."""
    values = np.asarray(values)
    freq = np.asarray(freq)
    fig, ax = plt.subplots(figsize=(9, 3.5))
    t = np.arange(values.size)
    ax.plot(t, values, color="black", lw=1.0, label="strength")
    for k, (a, b) in enumerate(segments):
        ax.axvspan(a, b, color="tab:red", alpha=0.25, label="segment" if k == 0 else None)
    if window is not None:
        ax.axvline(window[0], color="tab:green", ls="--", lw=1, label="relaxation window")
        ax.axvline(window[1], color="tab:green", ls="--", lw=1)
    ax.set_xlabel("time step")
    ax.set_ylabel("normalized strength")
    ax2 = ax.twinx()
    ax2.plot(np.arange(freq.size), freq, color="tab:blue", lw=1.0, label="frequency")
    ax2.set_ylabel("relevance frequency")
    handles = ax.get_legend_handles_labels()
    more = ax2.get_legend_handles_labels()
    ax.legend(handles[0] + more[0], handles[1] + more[1], loc="upper right", fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def plot_class_frequency(path, curves: dict, windows: dict | None = None) -> None:
    """Mean relevance frequency per class; ``curves`` maps a class name to a vector."""
    fig, ax = plt.subplots(figsize=(9, 3.5))
    colors = ["tab:red", "tab:blue", "tab:orange", "tab:purple"]
    for k, (name, curve) in enumerate(curves.items()):
        c = colors[k % len(colors)]
        ax.plot(np.arange(len(curve)), curve, color=c, label=str(name))
        if windows and name in windows:
            a, b = windows[name]
            ax.axvspan(a, b, color=c, alpha=0.1)
    ax.set_xlabel("time step")
    ax.set_ylabel("mean relevance frequency")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_depth_sweep(path, rows) -> None:
    """Accuracy and wall-clock time against depth.

    ``rows`` are dicts with keys variant, depth, accuracy_mean, accuracy_std, seconds.
    """
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for variant in sorted({r["variant"] for r in rows}):
        sel = sorted((r for r in rows if r["variant"] == variant), key=lambda r: r["depth"])
        d = [r["depth"] for r in sel]
        ax1.errorbar(d, [r["accuracy_mean"] for r in sel], yerr=[r["accuracy_std"] for r in sel],
                     marker="o", capsize=3, label=variant)
        ax2.plot(d, [r["seconds"] for r in sel], marker="o", label=variant)
    ax1.set_xlabel("hidden layers")
    ax1.set_ylabel("accuracy")
    ax2.set_xlabel("hidden layers")
    ax2.set_ylabel("training time (s)")
    ax1.legend(fontsize=8)
    ax2.legend(fontsize=8)
    _save(fig, path)
