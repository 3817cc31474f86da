"""SVG figures for the command-line experiments (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "backaction"
_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_fig2(path, t, mean, stderr, rate_a, fit_window, fp=None, passage=None,
              rate_b=None):
    """Two panels: mean P_e against time (log scale) with the fitted
    asymptote dashed, and threshold P_e against mean first-passage time."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    pos = mean > 0
    ax1.semilogy(t[pos], mean[pos], lw=1.2, label="Monte Carlo")
    if fp is not None:
        ax1.semilogy(fp[0], fp[1], lw=1, alpha=0.7, label="Fokker-Planck")
    if rate_a is not None and np.any(pos):
        lo, hi = fit_window
        sel = pos & (t >= lo) & (t <= hi)
        if np.any(sel):
            anchor = np.exp(np.mean(np.log(mean[sel]) + rate_a * t[sel]))
            tt = np.linspace(lo, hi, 50)
            ax1.semilogy(tt, anchor * np.exp(-rate_a * tt), "k--", lw=1,
                         label=f"rate {rate_a:.3f}")
    ax1.set_xlabel("time (1/kappa)")
    ax1.set_ylabel("<P_e>")
    ax1.legend(fontsize=8)
    if passage is not None:
        th, mt = passage
        ok = np.isfinite(mt)
        ax2.semilogy(mt[ok], th[ok], "o-", ms=3, lw=1)
        if rate_b is not None and np.any(ok):
            x = mt[ok]
            anchor = np.exp(np.mean(np.log(th[ok]) + rate_b * x))
            xx = np.linspace(x.min(), x.max(), 50)
            ax2.semilogy(xx, anchor * np.exp(-rate_b * xx), "k--", lw=1,
                         label=f"rate {rate_b:.3f}")
            ax2.legend(fontsize=8)
    ax2.set_xlabel("mean first-passage time (1/kappa)")
    ax2.set_ylabel("target P_e")
    _save(fig, path)


def plot_fig3(path, gammas, curves):
    """Steady-state error against noise strength, one line per protocol.

    `curves` maps a label to ``(mean, stderr)`` arrays over `gammas`.
    """
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    first = next(iter(curves))
    m, e = curves[first]
    ax1.errorbar(gammas, m, yerr=e, fmt="o-", ms=3, lw=1)
    ax1.set_xscale("log")
    ax1.set_yscale("log")
    ax1.set_title(first, fontsize=9)
    for label, (m, e) in curves.items():
        ax2.errorbar(gammas, m, yerr=e, fmt="o-", ms=3, lw=1, label=label)
    ax2.set_xscale("log")
    ax2.set_yscale("log")
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.set_xlabel("gamma / kappa")
        ax.set_ylabel("<P_e> steady state")
    _save(fig, path)


def plot_quantiles(path, t, median, lower, upper, reference=None):
    """Median P_e with an interquartile band (log scale)."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    floor = 1e-300
    ax.fill_between(t, np.maximum(lower, floor), np.maximum(upper, floor), alpha=0.3,
                    label="interquartile")
    ax.semilogy(t, np.maximum(median, floor), lw=1.2, label="median")
    if reference is not None:
        ax.semilogy(reference[0], np.maximum(reference[1], floor), "k--", lw=1,
                    label=reference[2])
    ax.set_xlabel("time (1/kappa)")
    ax.set_ylabel("P_e")
    ax.legend(fontsize=8)
    _save(fig, path)
