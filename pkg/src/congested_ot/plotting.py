"""Figures for the dipole scaling experiment (written to files, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.ticker import FormatStrFormatter, LogLocator, NullFormatter
import numpy as np

from .dipoles import ScalingResult


def plot_scaling(result: ScalingResult, path) -> None:
    """Two panels: ``norm**p`` against separation on the finest grid (log-log,
    with the fitted and the predicted slope), and the norm of each separation
    against the number of cells per axis."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4.0))

    fine = sorted(result.finest)
    s = np.array([r[0] for r in fine])
    E = np.array([r[3] for r in fine])
    ax1.loglog(s, E, "o", color="k", label=f"h = 1/{round(1 / fine[0][1])}")
    if result.slope is not None:
        tail = s[: min(3, s.size)]
        c = np.polyfit(np.log(s[:3]), np.log(E[:3]), 1)
        ax1.loglog(tail, np.exp(np.polyval(c, np.log(tail))), "-", color="C0",
                   label=f"fit, slope {result.slope:.3f}")
    ref = E[-1] * (s / s[-1]) ** result.target
    ax1.loglog(s, ref, "--", color="C1", label=f"slope {result.target:g}")
    ax1.set_xlabel("separation |a - b|")
    ax1.set_ylabel("norm$^p$")
    ax1.set_title(f"N = {result.N}, p = {result.p:g}")
    ax1.legend(frameon=False, fontsize=8)
    for axis in (ax1.xaxis, ax1.yaxis):
        axis.set_major_locator(LogLocator(subs=(1.0, 2.0, 5.0)))
        axis.set_major_formatter(FormatStrFormatter("%g"))
        axis.set_minor_formatter(NullFormatter())

    for sep in sorted({r[0] for r in result.rows}, reverse=True):
        pairs = result.refinement(sep)
        cells = [1.0 / h for h, _ in pairs]
        ax2.semilogx(cells, [n for _, n in pairs], "o-", label=f"s = {sep:g}")
    ax2.set_xscale("log", base=2)
    ax2.set_xlabel("cells per axis")
    ax2.set_ylabel("dual norm")
    ax2.legend(frameon=False, fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
