"""Mediation summaries from paired outcome/mediator posterior draws."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .kernel_basis import VoxelGrid

__all__ = [
    "MediationReport",
    "svme_draws",
    "nie_nde",
    "pip",
    "select_fdr",
    "select_pip",
    "selection_metrics",
    "region_summary",
    "build_report",
]


@dataclass
class MediationReport:
    svme_mean: np.ndarray
    svme_ci: np.ndarray
    pip: np.ndarray
    nie_mean: float
    nie_ci: tuple
    nde_mean: float
    nde_ci: tuple
    selected: set
    region_table: list
    svme_selected: np.ndarray
    threshold: float
    achieved_fdr: float | None = None
    mode: str = "pip"
    x: float = 1.0
    xprime: float = 0.0
    n_draws: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "x": self.x,
            "xprime": self.xprime,
            "n_draws": self.n_draws,
            "nie_mean": self.nie_mean,
            "nie_ci": list(self.nie_ci),
            "nde_mean": self.nde_mean,
            "nde_ci": list(self.nde_ci),
            "threshold": self.threshold,
            "achieved_fdr": self.achieved_fdr,
            "n_selected": len(self.selected),
            "selected": sorted(int(j) for j in self.selected),
            "region_table": self.region_table,
            **self.extra,
        }


def svme_draws(outcome_trace, mediator_trace, bases=None) -> np.ndarray:
    """Per-draw effect maps ``alpha_t(s_j) * beta_t(s_j)``.

    Draws are paired by index; the longer trace is truncated.
    """
    beta = outcome_trace.draws["beta"] if hasattr(outcome_trace, "draws") else outcome_trace
    alpha = mediator_trace.draws["alpha"] if hasattr(mediator_trace, "draws") else mediator_trace
    beta, alpha = np.atleast_2d(beta), np.atleast_2d(alpha)
    T = min(len(beta), len(alpha))
    if T == 0 or beta.size == 0 or alpha.size == 0:
        raise InvalidArgumentError("traces are empty")
    if beta.shape[1] != alpha.shape[1]:
        raise InvalidArgumentError("traces are on different grids")
    return alpha[:T] * beta[:T]


def nie_nde(svme_row, gamma: float, x: float, x2: float, grid: VoxelGrid | int):
    """Natural indirect and direct effects for a change of exposure ``x2 -> x``."""
    p = grid if isinstance(grid, (int, np.integer)) else grid.p
    svme_row = np.asarray(svme_row, dtype=np.float64)
    dx = x - x2
    return float(np.sum(svme_row) * dx / p), float(gamma * dx)


def pip(draws_col) -> float | np.ndarray:
    """Share of draws that are exactly nonzero; works column-wise on 2-D input."""
    draws_col = np.asarray(draws_col)
    if draws_col.shape[0] == 0:
        raise InvalidArgumentError("no draws")
    out = np.mean(draws_col != 0, axis=0)
    return float(out) if np.ndim(out) == 0 else out


def selection_metrics(selected, truth_support, p: int):
    """``(fdr, tpr, acc)`` of a voxel selection; fdr is 0 for an empty selection."""
    sel, tru = set(int(j) for j in selected), set(int(j) for j in truth_support)
    tp = len(sel & tru)
    fp = len(sel - tru)
    fn = len(tru - sel)
    tn = p - tp - fp - fn
    fdr = fp / len(sel) if sel else 0.0
    tpr = tp / len(tru) if tru else 1.0
    return fdr, tpr, (tp + tn) / p


def select_pip(pip_values, t0: float = 0.1) -> set:
    """Voxels whose inclusion probability exceeds ``t0``."""
    return set(np.flatnonzero(np.asarray(pip_values) > t0).tolist())


def select_fdr(pip_values, svme=None, truth=None, target_fdr: float = 0.1, t0: float = 0.1):
    """Inclusion-probability threshold selection.

    With ``truth`` (a boolean support mask or index collection) the threshold
    ``t`` is scanned over the distinct positive PIP values; voxels with
    ``pip >= t`` are selected and the smallest ``t`` whose true FDR is at most
    ``target_fdr`` wins. If none qualifies the largest ``t`` is used. Without
    truth, voxels with ``pip > t0`` are selected.

    Returns ``(t, selected, achieved_fdr)``; ``achieved_fdr`` is ``None``
    without truth or for an empty selection.
    """
    if not 0 < target_fdr < 1:
        raise InvalidArgumentError("target_fdr must be in (0, 1)")
    pv = np.asarray(pip_values, dtype=np.float64)
    p = len(pv)
    if truth is None:
        sel = select_pip(pv, t0)
        return t0, sel, None
    truth = np.asarray(truth)
    if truth.dtype == bool:
        support = set(np.flatnonzero(truth).tolist())
    else:
        support = set(int(j) for j in truth)
    cands = np.unique(pv[pv > 0])
    if len(cands) == 0:
        return 1.0, set(), None
    for t in cands:
        sel = set(np.flatnonzero(pv >= t).tolist())
        fdr, _, _ = selection_metrics(sel, support, p)
        if fdr <= target_fdr:
            return float(t), sel, fdr
    t = float(cands[-1])
    sel = set(np.flatnonzero(pv >= t).tolist())
    return t, sel, selection_metrics(sel, support, p)[0]


def region_summary(svme_mean, pip_values, selected, grid: VoxelGrid) -> list:
    """Per-region NIE split into positive and negative parts (all scaled by 1/p)."""
    svme_mean = np.asarray(svme_mean, dtype=np.float64)
    pip_values = np.asarray(pip_values, dtype=np.float64)
    p = grid.p
    sel = np.zeros(p, dtype=bool)
    sel[list(selected)] = True
    rows = []
    for r in range(grid.n_regions):
        idx = grid.region_indices(r)
        e = svme_mean[idx]
        pos = float(np.sum(e[e > 0])) / p
        neg = float(np.sum(e[e < 0])) / p
        rows.append({
            "region": r,
            "nie": pos + neg,
            "nie_pos": pos,
            "nie_neg": neg,
            "avg_pip": float(np.mean(pip_values[idx])),
            "n_active": int(np.sum(sel[idx])),
        })
    return rows


def _ci(x, level=0.95):
    lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return lo, hi


def build_report(outcome_trace, mediator_trace, grid: VoxelGrid, mode: str = "pip",
                 t0: float = 0.1, target_fdr: float = 0.1, truth=None,
                 x: float = 1.0, xprime: float = 0.0) -> MediationReport:
    """Full mediation summary.

    ``mode="pip"`` selects voxels with PIP above ``t0``; ``mode="fdr"`` needs
    ``truth`` and tunes the PIP threshold to ``target_fdr``. The selected
    effect map keeps the posterior mean on selected voxels and zero elsewhere.
    """
    E = svme_draws(outcome_trace, mediator_trace)
    T = len(E)
    gamma = np.asarray(outcome_trace.draws["gamma"])[:T]
    dx = x - xprime
    nie = E.sum(axis=1) * dx / grid.p
    nde = gamma * dx
    svme_mean = E.mean(axis=0)
    lo, hi = _ci(E)
    pv = pip(E)
    if mode == "fdr":
        if truth is None:
            raise InvalidArgumentError("fdr mode requires the true support")
        t, sel, achieved = select_fdr(pv, E, truth, target_fdr)
    elif mode == "pip":
        t, sel, achieved = t0, select_pip(pv, t0), None
    else:
        raise InvalidArgumentError(f"unknown selection mode {mode!r}")
    keep = np.zeros(grid.p, dtype=bool)
    keep[list(sel)] = True
    svme_sel = np.where(keep, svme_mean, 0.0)
    nie_lo, nie_hi = _ci(nie)
    nde_lo, nde_hi = _ci(nde)
    return MediationReport(
        svme_mean=svme_mean,
        svme_ci=np.column_stack([lo, hi]),
        pip=pv,
        nie_mean=float(nie.mean()),
        nie_ci=(float(nie_lo), float(nie_hi)),
        nde_mean=float(nde.mean()),
        nde_ci=(float(nde_lo), float(nde_hi)),
        selected=sel,
        region_table=region_summary(svme_mean, pv, sel, grid),
        svme_selected=svme_sel,
        threshold=float(t),
        achieved_fdr=achieved,
        mode=mode,
        x=float(x),
        xprime=float(xprime),
        n_draws=T,
    )
