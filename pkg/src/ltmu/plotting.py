"""Figures for the eval report.  Uses the Agg backend so it runs headless."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {"font.size": 9, "axes.labelsize": 9, "legend.fontsize": 8, "figure.figsize": (4.5, 3.2),
      "axes.grid": True, "grid.alpha": 0.3, "savefig.dpi": 120}


def success_plot(path, thresholds, success, auc: float, label: str = "tracker"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(thresholds, success, lw=1.5, label=f"{label} [{auc:.3f}]")
        ax.set_xlabel("overlap threshold")
        ax.set_ylabel("success rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def f_threshold_plot(path, taus, pr, re, f):
    taus = np.asarray(taus)
    keep = np.isfinite(taus)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(taus[keep], np.asarray(pr)[keep], lw=1, label="Pr")
        ax.plot(taus[keep], np.asarray(re)[keep], lw=1, label="Re")
        ax.plot(taus[keep], np.asarray(f)[keep], lw=1.5, label="F")
        if keep.any():
            i = int(np.argmax(np.asarray(f)[keep]))
            ax.axvline(taus[keep][i], color="0.5", ls=":", lw=1)
        ax.set_xlabel("confidence threshold")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
