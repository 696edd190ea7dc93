"""Experiment drivers: 2-fold threshold/kernel sensitivity and simulation replications."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .kernel_basis import KernelSpec, build_bases
from .mediation import build_report
from .sampler import SamplerConfig, run_mediator_chain, run_outcome_chain
from .sem_model import MediationDataset
from .simgen import SimDesign, generate, score_replication

__all__ = [
    "worker_count",
    "derive_seeds",
    "split_subjects",
    "predict_outcome",
    "sensitivity",
    "ReplicationPlan",
    "run_replication",
    "evaluate",
]


def worker_count(requested: int | None = None) -> int:
    """Worker processes to use, capped by ``BIMA_THREADS`` when set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("BIMA_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise InvalidArgumentError("BIMA_THREADS must be an integer") from exc
    return max(1, n)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent 63-bit child seeds, stable for a given ``(seed, count)`` prefix."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1)) for c in children]


def split_subjects(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 50/50 split of subject indices (both halves sorted)."""
    if n < 4:
        raise InvalidArgumentError("need at least 4 subjects for a 2-fold split")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def predict_outcome(trace, data: MediationDataset) -> np.ndarray:
    """Posterior-mean prediction of ``Y`` for the subjects in ``data``."""
    beta = trace.draws["beta"]
    gamma = trace.draws["gamma"]
    xi = trace.draws["xi"].reshape(len(gamma), -1)
    mean_beta = beta.mean(axis=0)
    pred = data.M @ mean_beta / data.p + gamma.mean() * data.X
    if data.q:
        pred = pred + data.C @ xi.mean(axis=0)
    return pred


def sensitivity(data: MediationDataset, nus, config: SamplerConfig, kernel: KernelSpec,
                rho_scales=(1.0,), cutoff_frac: float = 0.9, basis_frac: float | None = None,
                split_seed: int = 0) -> list[dict]:
    """Train/test MSE of outcome fits over a grid of thresholds and kernel scales.

    Subjects are split in half once; every grid point is fitted on the same
    training half and scored on both halves.
    """
    nus = [float(v) for v in nus]
    if not nus:
        raise InvalidArgumentError("need at least one threshold")
    train_idx, test_idx = split_subjects(data.n, split_seed)
    train, test = data.subset(train_idx), data.subset(test_idx)
    rows = []
    for scale in rho_scales:
        spec = kernel
        if float(scale) != 1.0:
            if kernel.family != "matern":
                raise InvalidArgumentError("kernel scale grids need the Matern family")
            spec = replace(kernel, rho=kernel.rho * float(scale),
                           per_region={r: (u, rho * float(scale))
                                       for r, (u, rho) in kernel.per_region.items()})
        bases = build_bases(data.grid, spec, cutoff_frac=cutoff_frac, basis_frac=basis_frac)
        for nu in nus:
            trace = run_outcome_chain(train, bases, replace(config, nu=nu))
            rows.append({
                "nu": nu,
                "rho_scale": float(scale),
                "train_mse": float(np.mean((train.Y - predict_outcome(trace, train)) ** 2)),
                "test_mse": float(np.mean((test.Y - predict_outcome(trace, test)) ** 2)),
            })
    return rows


@dataclass
class ReplicationPlan:
    """Everything needed to run one simulate -> fit -> mediate -> score pass.

    ``pattern="mix"`` alternates sparse (even replications) and dense (odd).
    """

    design: SimDesign = field(default_factory=SimDesign)
    kernel: KernelSpec | None = None
    basis_frac: float | None = None
    cutoff_frac: float = 0.9
    outcome: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(burnin_frac=0.7, thin=5, beta_only_frac=0.4))
    mediator: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(iters=5000, burnin_frac=0.9))
    target_fdr: float = 0.1
    pattern: str | None = None


def _pattern_for(plan: ReplicationPlan, index: int) -> str:
    pattern = plan.pattern or plan.design.pattern
    if pattern == "mix":
        return "dense" if index % 2 else "sparse"
    return pattern


def run_replication(plan: ReplicationPlan, seed: int, index: int = 0):
    """Return ``(report, truth, timings)`` for one replication."""
    design = replace(plan.design, seed=seed, pattern=_pattern_for(plan, index))
    data, truth = generate(design)
    kernel = plan.kernel or design.kernel
    basis_frac = plan.basis_frac if plan.basis_frac is not None else design.basis_frac
    bases = build_bases(data.grid, kernel, cutoff_frac=plan.cutoff_frac, basis_frac=basis_frac)
    seeds = derive_seeds(seed, 2)
    t0 = time.perf_counter()
    ot = run_outcome_chain(data, bases, replace(plan.outcome, seed=seeds[0]))
    t1 = time.perf_counter()
    mt = run_mediator_chain(data, bases, replace(plan.mediator, seed=seeds[1]))
    t2 = time.perf_counter()
    report = build_report(ot, mt, data.grid, mode="fdr", target_fdr=plan.target_fdr,
                          truth=truth.svme0 != 0)
    return report, truth, {"outcome_s": t1 - t0, "mediator_s": t2 - t1}


def _run_indexed(args):
    plan, seed, index = args
    return run_replication(plan, seed, index)


def evaluate(plan: ReplicationPlan, replications: int, seed: int = 0,
             workers: int | None = None):
    """Run replications (in parallel when allowed) and score them.

    Returns ``(summary, per_replication_rows, timings)``; ``summary`` is the
    output of :func:`score_replication`.
    """
    if replications < 1:
        raise InvalidArgumentError("replications must be positive")
    seeds = derive_seeds(seed, replications)
    jobs = [(plan, s, i) for i, s in enumerate(seeds)]
    nw = min(worker_count(workers), replications)
    if nw > 1:
        with ProcessPoolExecutor(nw) as ex:
            results = list(ex.map(_run_indexed, jobs))
    else:
        results = [_run_indexed(j) for j in jobs]
    reports = [r[0] for r in results]
    truths = [r[1] for r in results]
    rows = []
    for i, (rep, tr, _) in enumerate(results):
        s = score_replication([rep], [tr])
        rows.append({"replication": i, "seed": seeds[i], "pattern": _pattern_for(plan, i),
                     **{k: v[0] for k, v in s.items()}, "threshold": rep.threshold,
                     "nie": rep.nie_mean, "nde": rep.nde_mean})
    timings = [r[2] for r in results]
    return score_replication(reports, truths), rows, timings
