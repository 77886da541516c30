"""SVG figures for run logs and comparisons."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sim import RunLog, _label  # noqa: E402

_STYLE = {
    "svg.hashsalt": "rpcbf",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.3,
}


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def _barrier_axes(ax, logs: list[RunLog]):
    for lg in logs:
        k = np.array([r.k for r in lg.records])
        if not k.size:
            continue
        h = np.array([r.h for r in lg.records])
        b = np.array([r.bound for r in lg.records])
        (line,) = ax.plot(k, h, label=_label(lg.meta))
        ax.plot(k, b, ls="--", lw=0.9, color=line.get_color(), alpha=0.7)
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("time step k")
    ax.set_ylabel("barrier value (dashed: bound)")
    ax.legend(loc="upper right", fontsize=8)


def _state_bounds(lg: RunLog, i: int):
    """Box bounds of state i if X has an axis-aligned row for it."""
    X = lg.X
    if X is None:
        return None, None
    lo = hi = None
    for a, b in zip(X.A, X.b):
        nz = np.flatnonzero(a)
        if nz.size == 1 and nz[0] == i:
            if a[i] > 0:
                hi = b / a[i]
            else:
                lo = b / a[i]
    return lo, hi


def plot_run(log: RunLog) -> str:
    """Barrier value with its bound, and each state against its limits."""
    xs = log.states
    n = xs.shape[1] if xs.ndim == 2 else 0
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(n + 1, 1, figsize=(6.5, 1.6 * (n + 1) + 0.6), sharex=True)
        axes = np.atleast_1d(axes)
        _barrier_axes(axes[0], [log])
        m = log.meta
        axes[0].set_title(f"{m['scenario']} | {_label(m)} | seed {m['seed']} | {m['policy']}")
        k = np.arange(len(xs))
        for i in range(n):
            ax = axes[i + 1]
            ax.plot(k, xs[:, i], color="C0")
            lo, hi = _state_bounds(log, i)
            for lim in (lo, hi):
                if lim is not None:
                    ax.axhline(lim, color="k", ls=":", lw=0.9)
            ax.set_ylabel(f"x{i}")
        axes[-1].set_xlabel("time step k")
        fig.tight_layout()
        return _svg(fig)


def plot_compare(logs: list[RunLog]) -> str:
    """Overlay of barrier trajectories and their bounds, plus the state
    envelope (componentwise max |x_i| relative to its limit)."""
    with plt.rc_context(_STYLE):
        fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(6.5, 6.0), sharex=True)
        _barrier_axes(ax0, logs)
        m = logs[0].meta
        ax0.set_title(f"{m['scenario']} | seed {m['seed']} | {m['policy']}")
        for lg in logs:
            xs = lg.states
            if not len(xs):
                continue
            ratios = []
            for i in range(xs.shape[1]):
                lo, hi = _state_bounds(lg, i)
                if lo is not None and hi is not None:
                    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
                    ratios.append(np.abs(xs[:, i] - mid) / half)
            if ratios:
                ax1.plot(np.arange(len(xs)), np.max(ratios, axis=0), label=_label(lg.meta))
        ax1.axhline(1.0, color="k", ls=":", lw=0.9)
        ax1.set_yscale("log")
        ax1.set_ylabel("max normalised |x_i|")
        ax1.set_xlabel("time step k")
        ax1.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        return _svg(fig)
