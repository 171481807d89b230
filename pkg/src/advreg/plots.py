"""Deterministic SVG line charts and heatmaps.

Output is byte-stable across runs: no date metadata, fixed hash salt for
element ids, and a fixed text-to-path setting.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import SweepReport  # noqa: E402
from .trainer import RunLog  # noqa: E402

_RC = {"svg.hashsalt": "advreg", "svg.fonttype": "none", "figure.figsize": (6.4, 4.0)}


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    tmp.replace(path)


def plot_losses(log: RunLog, path: str | Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        t = [s.t for s in log.steps]
        ax.plot(t, [s.l_vqa for s in log.steps], label="l_vqa", lw=0.8)
        ax.plot(t, [s.l_adv for s in log.steps], label="l_adv", lw=0.8)
        ax.plot(t, [s.l_total for s in log.steps], label="l_total", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        _save(fig, path)


def plot_grad_norms(log: RunLog, path: str | Path) -> None:
    """Question-encoder gradient norms from each loss, with the GRL weight on a twin axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        t = [s.t for s in log.steps]
        ax.plot(t, [s.grad_norm_q_from_vqa for s in log.steps], label="|dl_vqa/dθ_q|", lw=0.8)
        ax.plot(t, [s.grad_norm_q_from_adv for s in log.steps], label="|dl_adv/dθ_q|", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("gradient norm")
        ax.legend(loc="upper left")
        twin = ax.twinx()
        twin.plot(t, [s.lambda_grl for s in log.steps], color="grey", ls=":", lw=0.8)
        twin.set_ylabel("λ_GRL")
        _save(fig, path)


def plot_scores(log: RunLog, path: str | Path) -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for split in dict.fromkeys(r.split for r in log.evals):
            t, y = log.eval_series(split)
            ax.plot(t, y, marker=".", label=split)
        if log.best_iteration is not None:
            ax.axvline(log.best_iteration, color="grey", ls=":", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("VQA score")
        if log.evals:
            ax.legend()
        _save(fig, path)


def plot_sweep(report: SweepReport, path: str | Path, baseline: float | None = None) -> None:
    """Test score per setting; a heatmap for delay/warmup grids, else one line per lambda_adv."""
    rows = [r for r in report.rows if r.status == "ok"]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if rows and not all(r.schedule.is_static for r in rows):
            _heatmap(fig, ax, rows, baseline)
        else:
            for lam in sorted({r.lambda_adv for r in rows}):
                pts = sorted((r.schedule.c, r.test_overall) for r in rows if r.lambda_adv == lam)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"λ_ADV={lam:g}")
            if any(r.schedule.c > 0 for r in rows):
                ax.set_xscale("symlog", linthresh=0.01)
            if baseline is not None and math.isfinite(baseline):
                ax.axhline(baseline, color="tab:blue", ls="--", lw=1.0, label="baseline")
            ax.set_xlabel("λ_GRL")
            ax.set_ylabel("test VQA score")
            if rows or baseline is not None:
                ax.legend()
        _save(fig, path)


def _heatmap(fig, ax, rows, baseline) -> None:
    mus = sorted({r.schedule.mu for r in rows})
    ws = sorted({r.schedule.w for r in rows})
    grid = np.full((len(mus), len(ws)), np.nan)
    for r in rows:
        i, j = mus.index(r.schedule.mu), ws.index(r.schedule.w)
        cur = grid[i, j]
        grid[i, j] = r.test_overall if np.isnan(cur) else max(cur, r.test_overall)
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    cbar = fig.colorbar(im, ax=ax, label="test VQA score")
    if baseline is not None and math.isfinite(baseline):
        cbar.ax.axhline(baseline, color="tab:blue", ls="--", lw=1.5)
    _ticks(ax, mus, ws)
    ax.set_xlabel("warmup w")
    ax.set_ylabel("delay μ")


def _ticks(ax, mus: Sequence[int], ws: Sequence[int]) -> None:
    ax.set_xticks(range(len(ws)), [str(w) for w in ws])
    ax.set_yticks(range(len(mus)), [str(m) for m in mus])
