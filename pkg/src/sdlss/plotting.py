"""PNG figures written next to the CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def training_curve(rows, path, title=None):
    """Validation RE and L_G per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r.epoch for r in rows]
        ax.plot(ep, [r.val_re for r in rows], "o-", ms=3, label="val RE (dB)")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation RE (dB)")
        ax2 = ax.twinx()
        ax2.plot(ep, [r.loss_g for r in rows], "s--", ms=3, color="C1", label="$L_G$")
        ax2.set_ylabel("$L_G$")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def srec_rates(reports, path):
    """Violation rate vs m, with 2-SE bars and the analytic single-pair rate."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        m = np.array([r.m for r in reports])
        rate = np.array([r.empirical_rate for r in reports])
        se = np.array([r.std_err for r in reports])
        ax.errorbar(m, rate, yerr=2 * se, fmt="o-", ms=3, capsize=2, label="empirical")
        ax.plot(m, [r.bound_rate for r in reports], "k:", label="single pair, analytic")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("measurements m")
        ax.set_ylabel("violation rate")
        ax.set_title(f"S-REC violations, alpha = {reports[0].alpha:g}")
        ax.legend()
        return _save(fig, path)


def phase_curve(rows, path):
    """Median relative recovery error vs m with the interquartile band."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        m = [r.m for r in rows]
        ax.fill_between(m, [r.q25 for r in rows], [r.q75 for r in rows], alpha=0.25)
        ax.plot(m, [r.median_rel_err for r in rows], "o-", ms=3)
        ax.set_xlabel("measurements m")
        ax.set_ylabel("relative error")
        ax.set_yscale("log")
        return _save(fig, path)


def re_vs_sparsity(s_values, re_db, re_se, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.errorbar(s_values, re_db, yerr=re_se, fmt="o-", ms=3, capsize=2)
        ax.set_xscale("log")
        ax.set_xlabel("sparsity s")
        ax.set_ylabel("test RE (dB)")
        return _save(fig, path)


def region_counts(rows, path):
    """Counted regions against the closed form, one point per arrangement."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        closed = np.array([r["closed_form"] for r in rows])
        counted = np.array([r["count"] for r in rows])
        ax.plot(closed, counted, "o", ms=4)
        lim = [0, max(closed.max(), counted.max()) * 1.05]
        ax.plot(lim, lim, "k:", lw=1)
        ax.set_xlabel("closed-form count")
        ax.set_ylabel("enumerated cells")
        return _save(fig, path)
