"""Posterior sampling for the outcome and mediator models.

Thresholded coefficients (``theta_beta``, ``theta_alpha``) are updated one
region at a time with MALA; everything else has a conjugate full conditional
and is Gibbs-sampled. Individual effects ``theta_eta`` are drawn from their
Gaussian full conditional restricted to the subspace orthogonal to the
exposure/confounder design.

Chains are deterministic functions of ``(data, bases, config)``: all
randomness comes from one ``numpy.random.Generator`` seeded by
``config.seed`` and is consumed in a fixed order.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .errors import (DivergenceError, IdentifiabilityError, InitializationFailed,
                     InvalidArgumentError, InvalidStateError, NumericalRankError)
from .kernel_basis import RegionBasis
from .sem_model import (MediationDataset, MediatorState, OutcomeState, Priors, coef_fields,
                        outcome_mean)
from .stgp import soft_threshold

log = logging.getLogger(__name__)

__all__ = [
    "SamplerConfig",
    "ChainTrace",
    "mala_step",
    "sample_mala",
    "adapt_step",
    "default_targets",
    "gibbs_gamma_xi",
    "gibbs_zeta",
    "gibbs_eta_constrained",
    "project_constraint",
    "gibbs_variances",
    "init_outcome",
    "init_mediator",
    "run_outcome_chain",
    "run_mediator_chain",
]


@dataclass
class SamplerConfig:
    """Chain length, schedule and tuning.

    ``step_init`` and ``target_accept`` may be a scalar (all regions) or a
    per-region list; ``None`` picks defaults. ``target_accept=None`` uses
    ``clamp(target_const / L_r, 0.2, 0.4)``.
    """

    iters: int = 20000
    burnin_frac: float = 0.5
    thin: int = 1
    seed: int = 0
    nu: float = 0.5
    step_init: float | list | None = None
    target_accept: float | list | None = None
    target_const: float = 20.0
    adapt_window: int = 100
    adapt_kappa: float = 0.5
    adapt_stop_frac: float = 0.8
    beta_only_frac: float = 0.0
    eta_update: str = "full"
    init: str = "gp"
    init_iters: int = 200
    lasso_alpha: float = 1e-3
    precond: str = "identity"
    theta_update: str = "mala"
    record_eta: bool = False
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidArgumentError("iters must be positive")
        if not 0 < self.burnin_frac < 1:
            raise InvalidArgumentError("burnin_frac must be in (0, 1)")
        if self.thin < 1:
            raise InvalidArgumentError("thin must be >= 1")
        if not 0 <= self.beta_only_frac < 1:
            raise InvalidArgumentError("beta_only_frac must be in [0, 1)")
        if self.nu < 0:
            raise InvalidArgumentError("nu must be non-negative")
        if self.eta_update not in ("full", "zero"):
            raise InvalidArgumentError("eta_update must be 'full' or 'zero'")
        if self.init not in ("gp", "lasso", "zero"):
            raise InvalidArgumentError("init must be 'gp', 'lasso' or 'zero'")
        if self.precond not in ("identity", "prior"):
            raise InvalidArgumentError("precond must be 'identity' or 'prior'")
        if self.theta_update not in ("mala", "gibbs"):
            raise InvalidArgumentError("theta_update must be 'mala' or 'gibbs'")
        if self.theta_update == "gibbs" and self.nu != 0:
            raise InvalidArgumentError("Gibbs updates of theta require nu = 0")
        if self.adapt_window < 1:
            raise InvalidArgumentError("adapt_window must be positive")
        self.seed = int(self.seed) % 2 ** 64

    @property
    def burnin(self) -> int:
        return int(self.burnin_frac * self.iters)

    @property
    def n_draws(self) -> int:
        return (self.iters - self.burnin) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        d = dict(d)
        if "priors" in d and isinstance(d["priors"], dict):
            d["priors"] = Priors(**d["priors"])
        return cls(**d)


@dataclass
class ChainTrace:
    """Post-burn-in, thinned draws plus sampler diagnostics.

    ``draws`` maps a parameter name to an array whose first axis indexes the
    recorded draw.
    """

    model: str
    draws: dict
    accept_rates: np.ndarray
    step_final: np.ndarray
    seed: int
    targets: np.ndarray
    config: dict
    region_L: list
    wall_time: float = 0.0

    @property
    def n_draws(self) -> int:
        return len(next(iter(self.draws.values())))

    def truncate(self, T: int) -> "ChainTrace":
        draws = {k: v[:T] for k, v in self.draws.items()}
        return ChainTrace(self.model, draws, self.accept_rates, self.step_final, self.seed,
                          self.targets, self.config, self.region_L, self.wall_time)


def default_targets(bases: Sequence[RegionBasis], const: float = 20.0) -> np.ndarray:
    return np.array([min(max(const / b.L, 0.2), 0.4) for b in bases])


def _per_region(value, n_regions: int, default: float) -> np.ndarray:
    if value is None:
        return np.full(n_regions, float(default))
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return np.full(n_regions, float(arr[0]))
    if arr.size != n_regions:
        raise InvalidArgumentError("per-region setting has the wrong length")
    return arr.copy()


# ---------------------------------------------------------------------------
# MALA


def _mala_core(theta, lp, grad, evaluate, step, rng, scale=None):
    """One MALA transition from a state whose log density and gradient are known.

    ``evaluate(theta) -> (logp, grad, aux)``. ``scale`` is an optional diagonal
    preconditioner (proposal covariance ``step^2 * diag(scale)``).
    Returns ``(theta, lp, grad, aux_or_None, accepted)``.
    """
    a = 1.0 if scale is None else scale
    h2 = step * step
    z = rng.standard_normal(theta.shape[0])
    mean_fwd = theta + 0.5 * h2 * a * grad
    prop = mean_fwd + step * np.sqrt(a) * z
    lp_new, grad_new, aux = evaluate(prop)
    u = rng.random()
    if not math.isfinite(lp_new):
        return theta, lp, grad, None, False
    mean_bwd = prop + 0.5 * h2 * a * grad_new
    log_q_fwd = -0.5 * float(np.sum(z * z))
    d = theta - mean_bwd
    log_q_bwd = -0.5 * float(np.sum(d * d / a)) / h2
    log_ratio = lp_new - lp + log_q_bwd - log_q_fwd
    if log_ratio >= 0 or u < math.exp(log_ratio):
        return prop, lp_new, grad_new, aux, True
    return theta, lp, grad, None, False


def mala_step(theta, logpost_fn: Callable, grad_fn: Callable, step: float,
              rng: np.random.Generator, scale=None):
    """One Metropolis-adjusted Langevin step.

    Proposes ``theta + step^2/2 * grad + step * z`` and accepts with the
    Metropolis-Hastings ratio that accounts for the asymmetric proposal.
    Returns ``(theta_new, accepted)``.
    """
    if not step > 0:
        raise InvalidArgumentError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    lp = logpost_fn(theta)
    if not math.isfinite(lp):
        raise InvalidStateError("log density is not finite at the current point")

    def evaluate(th):
        return logpost_fn(th), grad_fn(th), None

    new, _, _, _, acc = _mala_core(theta, lp, grad_fn(theta), evaluate, step, rng, scale)
    return new, acc


def adapt_step(step: float, recent_accept: float, target: float, kappa: float = 0.5) -> float:
    """Multiplicative step-size update toward a target acceptance rate."""
    return step * math.exp(kappa * (recent_accept - target))


class _Adapter:
    """Batch acceptance bookkeeping and step adaptation for R regions."""

    def __init__(self, steps, targets, config: SamplerConfig):
        self.steps = steps
        self.targets = targets
        self.window = config.adapt_window
        self.kappa = config.adapt_kappa
        self.stop = int(config.adapt_stop_frac * config.burnin)
        self.burnin = config.burnin
        self.batch = np.zeros(len(steps))
        self.post = np.zeros(len(steps))
        self.n_post = 0

    def record(self, r: int, accepted: bool):
        self.batch[r] += accepted

    def end_iteration(self, t: int):
        if t >= self.burnin:
            self.post += self.batch
            self.n_post += 1
            self.batch[:] = 0
        else:
            if (t + 1) % self.window == 0:
                if t < self.stop:
                    for r in range(len(self.steps)):
                        self.steps[r] = adapt_step(self.steps[r], self.batch[r] / self.window,
                                                   self.targets[r], self.kappa)
                self.batch[:] = 0
            if t + 1 == self.burnin:
                # a partial window must not leak into the post-burn-in rate
                self.batch[:] = 0

    def rates(self) -> np.ndarray:
        if self.n_post == 0:
            return np.full(len(self.steps), np.nan)
        return self.post / self.n_post


# ---------------------------------------------------------------------------
# conjugate pieces


def _inv_gamma(rng, shape: float, rate: float) -> float:
    return rate / rng.gamma(shape)


def _mvn_from_precision(rng, P, b):
    """Draw from N(P^-1 b, P^-1)."""
    try:
        L = linalg.cholesky(P, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalRankError("posterior precision is not positive definite") from exc
    mean = linalg.cho_solve((L, True), b)
    z = rng.standard_normal(len(b))
    return mean + linalg.solve_triangular(L.T, z, lower=False), mean


def gibbs_gamma_xi(state: OutcomeState, data: MediationDataset, bases, rng,
                   priors: Priors = Priors(), offset=None):
    """Joint draw of ``(gamma, xi)`` from its Gaussian full conditional.

    ``offset`` is the image contribution ``<beta, M_i>_p``; it is recomputed from
    ``state`` when omitted. Returns ``(gamma, xi)``.
    """
    if offset is None:
        offset = outcome_mean(state, data, bases) - state.gamma * data.X - data.C @ state.xi
    Xt = data.design
    z = data.Y - offset
    s2 = state.sigma2_Y
    P = Xt.T @ Xt / s2 + np.eye(Xt.shape[1]) / priors.sigma2_gamma0
    draw, _ = _mvn_from_precision(rng, P, Xt.T @ z / s2)
    return float(draw[0]), draw[1:].copy()


def gamma_xi_posterior(state: OutcomeState, data: MediationDataset, bases,
                       priors: Priors = Priors()):
    """Mean and covariance of the ``(gamma, xi)`` full conditional."""
    offset = outcome_mean(state, data, bases) - state.gamma * data.X - data.C @ state.xi
    Xt = data.design
    s2 = state.sigma2_Y
    P = Xt.T @ Xt / s2 + np.eye(Xt.shape[1]) / priors.sigma2_gamma0
    cov = linalg.inv(P)
    return cov @ (Xt.T @ (data.Y - offset)) / s2, cov


class _MediatorStats:
    """Sufficient statistics of the mediator likelihood.

    Everything the mediator updates need is a function of ``M^T [X, C]``,
    ``M_r Q_r`` and ``||M||^2``, so the full ``n x p`` image matrix is touched
    only once.
    """

    def __init__(self, data: MediationDataset, bases: Sequence[RegionBasis]):
        grid = data.grid
        self.idx = [grid.region_indices(b.region) for b in bases]
        D = data.design
        self.D = D
        self.DtD = D.T @ D
        MtD = data.M.T @ D
        self.MtD = [MtD[ix] for ix in self.idx]
        self.MQ = [data.M[:, ix] @ b.Q for ix, b in zip(self.idx, bases)]
        self.M2 = float(np.sum(data.M * data.M))
        self.n, self.q, self.p = data.n, data.q, data.p
        rank = np.linalg.matrix_rank(D)
        self.rank = int(rank)
        self._U = None
        if rank == D.shape[1]:
            self._U, _ = linalg.qr(D, mode="economic")

    def project(self, V: np.ndarray) -> np.ndarray:
        """Project the columns of ``V`` (``n x k``) onto the null space of ``D^T``."""
        if self._U is None:
            raise IdentifiabilityError("exposure/confounder design is rank deficient")
        return V - self._U @ (self._U.T @ V)


def project_constraint(design: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``V``'s columns onto ``{v : design^T v = 0}``."""
    design = np.asarray(design, dtype=np.float64)
    if design.ndim == 1:
        design = design[:, None]
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise IdentifiabilityError("design is rank deficient")
    U, _ = linalg.qr(design, mode="economic")
    V = np.asarray(V, dtype=np.float64)
    return V - U @ (U.T @ V)


def _zeta_conditional(state: MediatorState, stats: _MediatorStats, bases, r: int, k: int):
    """Mean and variance (per basis index) of ``theta_zeta[r][k]`` given the rest."""
    b = bases[r]
    ck = 1 + k  # column of C_k in the design
    DtD = stats.DtD
    alpha_r = soft_threshold(b.Q @ state.theta_alpha[r], state.nu_alpha)
    # Q^T sum_i C_ik (M_i - alpha X_i - sum_{k'!=k} zeta_k' C_ik' - eta_i)
    rhs = b.Q.T @ (stats.MtD[r][:, ck] - alpha_r * DtD[ck, 0])
    Z = state.theta_zeta[r]
    others = [kk for kk in range(stats.q) if kk != k]
    if others:
        rhs -= DtD[ck, [1 + kk for kk in others]] @ Z[others]
    rhs -= stats.D[:, ck] @ state.theta_eta[r]
    s2 = state.sigma2_M
    prec = DtD[ck, ck] / s2 + 1.0 / (state.sigma2_zeta * b.eigvals)
    var = 1.0 / prec
    return var * rhs / s2, var


def gibbs_zeta(state: MediatorState, data: MediationDataset, bases, region: int, k: int,
               rng, stats: _MediatorStats | None = None) -> np.ndarray:
    """Draw ``theta_zeta[region][k]`` from its Gaussian full conditional."""
    stats = stats or _MediatorStats(data, bases)
    mean, var = _zeta_conditional(state, stats, bases, region, k)
    return mean + np.sqrt(var) * rng.standard_normal(len(mean))


def _eta_conditional(state: MediatorState, stats: _MediatorStats, bases, r: int):
    """Unconstrained full conditional of ``theta_eta[r]`` (``n x L_r`` mean, ``L_r`` variances).

    Subjects are conditionally independent with common variance per basis
    index because ``Q_r^T Q_r = I``.
    """
    b = bases[r]
    alpha_r = soft_threshold(b.Q @ state.theta_alpha[r], state.nu_alpha)
    resid = stats.MQ[r] - np.outer(stats.D[:, 0], b.Q.T @ alpha_r)
    if stats.q:
        resid -= stats.D[:, 1:] @ state.theta_zeta[r]
    s2 = state.sigma2_M
    var = 1.0 / (1.0 / s2 + 1.0 / (state.sigma2_eta * b.eigvals))
    return resid * (var / s2), var


def gibbs_eta_constrained(state: MediatorState, data: MediationDataset, bases, region: int,
                          rng, l: int | None = None, stats: _MediatorStats | None = None):
    """Constrained draw of the individual-effect coefficients of one region.

    For each basis index the length-``n`` vector across subjects is drawn
    from its isotropic Gaussian full conditional and then projected onto the
    null space of ``[X, C]^T``; with isotropic covariance this projection is
    exactly the conditional law on the constraint hyperplane. Returns an
    ``n x L_r`` array, or a length-``n`` vector when ``l`` is given.
    """
    stats = stats or _MediatorStats(data, bases)
    mean, var = _eta_conditional(state, stats, bases, region)
    if l is not None:
        mean, var = mean[:, [l]], var[[l]]
    draw = mean + rng.standard_normal(mean.shape) * np.sqrt(var)
    draw = stats.project(draw)
    return draw[:, 0] if l is not None else draw


def _outcome_variance_params(state: OutcomeState, data, bases, priors, resid=None):
    if resid is None:
        resid = data.Y - outcome_mean(state, data, bases)
    a, b0 = priors.ig_shape, priors.ig_rate
    L = sum(bb.L for bb in bases)
    quad = sum(float(np.sum(t * t / bb.eigvals)) for t, bb in zip(state.theta_beta, bases))
    return {
        "sigma2_Y": (a + 0.5 * data.n, b0 + 0.5 * float(resid @ resid)),
        "sigma2_beta": (a + 0.5 * L, b0 + 0.5 * quad),
    }


def _mediator_ss(state: MediatorState, stats: _MediatorStats, bases) -> float:
    """Residual sum of squares of the mediator model from sufficient statistics."""
    total = stats.M2
    DtD = stats.DtD
    for r, b in enumerate(bases):
        alpha_r = soft_threshold(b.Q @ state.theta_alpha[r], state.nu_alpha)
        # fields per design column: alpha for X, zeta_k for C_k; shape (p_r, 1+q)
        F = np.column_stack([alpha_r, b.Q @ state.theta_zeta[r].T]) if stats.q else alpha_r[:, None]
        E = state.theta_eta[r]
        cross = float(np.sum(F * stats.MtD[r])) + float(np.sum(E * stats.MQ[r]))
        # sum_i ||F D_i + Q E_i||^2
        DE = stats.D.T @ E  # (1+q, L_r); zero when the constraint holds
        quad = float(np.sum((F.T @ F) * DtD)) + float(np.sum(E * E))
        quad += 2.0 * float(np.sum((b.Q.T @ F) * DE.T))
        total += quad - 2.0 * cross
    return max(total, 0.0)


def _mediator_variance_params(state: MediatorState, stats: _MediatorStats, bases, priors,
                              update_eta: bool = True):
    a, b0 = priors.ig_shape, priors.ig_rate
    L = sum(b.L for b in bases)
    qa = sum(float(np.sum(t * t / b.eigvals)) for t, b in zip(state.theta_alpha, bases))
    out = {
        "sigma2_M": (a + 0.5 * stats.n * stats.p, b0 + 0.5 * _mediator_ss(state, stats, bases)),
        "sigma2_alpha": (a + 0.5 * L, b0 + 0.5 * qa),
    }
    if update_eta:
        qe = sum(float(np.sum(e * e / b.eigvals)) for e, b in zip(state.theta_eta, bases))
        # the constrained coefficients live in an (n - rank) dimensional subspace
        out["sigma2_eta"] = (a + 0.5 * (stats.n - stats.rank) * L, b0 + 0.5 * qe)
    if stats.q:
        qz = sum(float(np.sum(z * z / b.eigvals)) for z, b in zip(state.theta_zeta, bases))
        out["sigma2_zeta"] = (a + 0.5 * stats.q * L, b0 + 0.5 * qz)
    return out


def variance_posteriors(state, data: MediationDataset, bases, priors: Priors = Priors(),
                        update_eta: bool = True) -> dict:
    """Inverse-gamma ``(shape, rate)`` of each variance's full conditional."""
    if isinstance(state, OutcomeState):
        return _outcome_variance_params(state, data, bases, priors)
    return _mediator_variance_params(state, _MediatorStats(data, bases), bases, priors,
                                     update_eta)


def gibbs_variances(state, data: MediationDataset, bases, rng, priors: Priors = Priors(),
                    update_eta: bool = True) -> dict:
    """Draw every variance of the model ``state`` belongs to.

    Returns a dict keyed by attribute name (``sigma2_Y``/``sigma2_beta`` for
    the outcome model; ``sigma2_M``, ``sigma2_alpha``, ``sigma2_eta``,
    ``sigma2_zeta`` for the mediator model).
    """
    params = variance_posteriors(state, data, bases, priors, update_eta)
    return {k: _inv_gamma(rng, *v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# working models and initialisation


class _OutcomeDesign:
    """Basis-projected design ``W = (M/p) Q`` used by the linear working model."""

    def __init__(self, data: MediationDataset, bases):
        grid = data.grid
        self.blocks = [grid.region_indices(b.region) for b in bases]
        Mt = data.M / data.p
        self.W = np.concatenate([Mt[:, ix] @ b.Q for ix, b in zip(self.blocks, bases)], axis=1)
        self.lam = np.concatenate([b.eigvals for b in bases])
        self.splits = np.cumsum([b.L for b in bases])[:-1]
        self.WtW = self.W.T @ self.W


def _linear_theta_draw(rng, design: _OutcomeDesign, data, state: OutcomeState):
    """Joint draw of all ``theta_beta`` under nu = 0 given ``(gamma, xi)``."""
    z = data.Y - state.gamma * data.X - data.C @ state.xi
    s2 = state.sigma2_Y
    P = design.WtW / s2 + np.diag(1.0 / (state.sigma2_beta * design.lam))
    draw, _ = _mvn_from_precision(rng, P, design.W.T @ z / s2)
    return np.split(draw, design.splits)


def _outcome_working_model(data, bases, rng, iters: int, priors: Priors):
    """Short Gibbs chain of the GP (unthresholded) outcome model; returns posterior means."""
    design = _OutcomeDesign(data, bases)
    D = data.design
    Wfull = np.concatenate([design.W, D], axis=1)
    G = Wfull.T @ Wfull
    L = design.W.shape[1]
    state = OutcomeState.zeros(bases, data.q, nu_beta=0.0)
    state.sigma2_Y = max(float(np.var(data.Y)), 1e-8)
    keep = max(iters // 2, 1)
    acc = None
    for t in range(iters):
        s2 = state.sigma2_Y
        prior_prec = np.concatenate([1.0 / (state.sigma2_beta * design.lam),
                                     np.full(D.shape[1], 1.0 / priors.sigma2_gamma0)])
        draw, _ = _mvn_from_precision(rng, G / s2 + np.diag(prior_prec), Wfull.T @ data.Y / s2)
        state.theta_beta = np.split(draw[:L], design.splits)
        state.gamma, state.xi = float(draw[L]), draw[L + 1:].copy()
        resid = data.Y - Wfull @ draw
        for k, v in _outcome_variance_params(state, data, bases, priors, resid).items():
            setattr(state, k, _inv_gamma(rng, *v))
        if t >= iters - keep:
            vec = np.concatenate([draw, [state.sigma2_Y, state.sigma2_beta]])
            acc = vec if acc is None else acc + vec
    mean = acc / keep
    return OutcomeState(np.split(mean[:L], design.splits), float(mean[L]),
                        mean[L + 1:L + 1 + data.q].copy(), float(mean[-2]), float(mean[-1]), 0.0)


def _lasso_init(data, bases, nu, alpha):
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.linear_model import Lasso

    design = np.concatenate([data.M / data.p, data.design], axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            fit = Lasso(alpha=alpha, fit_intercept=False, max_iter=10000).fit(design, data.Y)
        except ConvergenceWarning as exc:
            raise InitializationFailed("lasso did not converge") from exc
    coef = fit.coef_
    beta_hat = coef[:data.p]
    latent = beta_hat + np.sign(beta_hat) * nu
    theta = [b.Q.T @ latent[data.grid.region_indices(b.region)] for b in bases]
    resid = data.Y - design @ coef
    s2 = max(float(resid @ resid) / data.n, 1e-8)
    return OutcomeState(theta, float(coef[data.p]), coef[data.p + 1:].copy(), s2, 1.0, nu)


def init_outcome(data: MediationDataset, bases, strategy: str, rng, nu: float = 0.5,
                 config: SamplerConfig | None = None) -> tuple[OutcomeState, bool]:
    """Starting state for the outcome chain.

    ``strategy`` is ``"gp"`` (posterior means of a short Gibbs run of the
    unthresholded model), ``"lasso"`` (lasso estimate shifted outward by
    ``nu`` and projected on the bases) or ``"zero"``. Returns
    ``(state, fallback)``, where ``fallback`` is True when lasso failed and
    the zero state was used instead.
    """
    config = config or SamplerConfig(nu=nu)
    if strategy == "zero":
        return OutcomeState.zeros(bases, data.q, nu), False
    if strategy == "gp":
        state = _outcome_working_model(data, bases, rng, config.init_iters, config.priors)
        state.nu_beta = nu
        return state, False
    if strategy == "lasso":
        try:
            return _lasso_init(data, bases, nu, config.lasso_alpha), False
        except InitializationFailed:
            log.warning("lasso initialisation failed; starting from zero")
            return OutcomeState.zeros(bases, data.q, nu), True
    raise InvalidArgumentError(f"unknown init strategy {strategy!r}")


def _alpha_gibbs_linear(state: MediatorState, stats: _MediatorStats, bases, rng):
    """Conjugate draw of ``theta_alpha`` when ``alpha`` is an unthresholded GP."""
    sxx = stats.DtD[0, 0]
    s2 = state.sigma2_M
    for r, b in enumerate(bases):
        rhs = b.Q.T @ _alpha_suffstat(state, stats, bases, r)
        var = 1.0 / (sxx / s2 + 1.0 / (state.sigma2_alpha * b.eigvals))
        state.theta_alpha[r] = var * rhs / s2 + np.sqrt(var) * rng.standard_normal(b.L)


def _alpha_suffstat(state: MediatorState, stats: _MediatorStats, bases, r: int) -> np.ndarray:
    """``sum_i X_i (M_i - zeta C_i - eta_i)`` on region ``r``."""
    b = bases[r]
    out = stats.MtD[r][:, 0].copy()
    if stats.q:
        out -= b.Q @ (state.theta_zeta[r].T @ stats.DtD[1:, 0])
    out -= b.Q @ (stats.D[:, 0] @ state.theta_eta[r])
    return out


def _mediator_sweep_rest(state: MediatorState, stats: _MediatorStats, bases, rng,
                         priors: Priors, eta_full: bool):
    for r, b in enumerate(bases):
        for k in range(stats.q):
            mean, var = _zeta_conditional(state, stats, bases, r, k)
            state.theta_zeta[r][k] = mean + np.sqrt(var) * rng.standard_normal(b.L)
    if eta_full:
        for r, b in enumerate(bases):
            mean, var = _eta_conditional(state, stats, bases, r)
            draw = mean + rng.standard_normal(mean.shape) * np.sqrt(var)
            state.theta_eta[r] = stats.project(draw)
    params = _mediator_variance_params(state, stats, bases, priors, update_eta=eta_full)
    for k, v in params.items():
        setattr(state, k, _inv_gamma(rng, *v))


def init_mediator(data: MediationDataset, bases, strategy: str, rng, nu: float = 0.5,
                  config: SamplerConfig | None = None,
                  stats: _MediatorStats | None = None) -> MediatorState:
    """Starting state for the mediator chain (``"gp"`` working model or ``"zero"``)."""
    config = config or SamplerConfig(nu=nu)
    state = MediatorState.zeros(bases, data.n, data.q, nu)
    if strategy in ("zero", "lasso"):
        # lasso is an outcome-model strategy; the mediator falls back to zero
        return state
    stats = stats or _MediatorStats(data, bases)
    eta_full = config.eta_update == "full"
    state.nu_alpha = 0.0
    state.sigma2_M = max(float(np.var(data.M)), 1e-8)
    iters = config.init_iters
    keep = max(iters // 2, 1)
    snaps = []
    for t in range(iters):
        _alpha_gibbs_linear(state, stats, bases, rng)
        _mediator_sweep_rest(state, stats, bases, rng, config.priors, eta_full)
        if t >= iters - keep:
            snaps.append(state.copy())
    mean = MediatorState(
        [np.mean([s.theta_alpha[r] for s in snaps], axis=0) for r in range(len(bases))],
        [np.mean([s.theta_zeta[r] for s in snaps], axis=0) for r in range(len(bases))],
        [np.mean([s.theta_eta[r] for s in snaps], axis=0) for r in range(len(bases))],
        *(float(np.mean([getattr(s, k) for s in snaps]))
          for k in ("sigma2_M", "sigma2_alpha", "sigma2_eta", "sigma2_zeta")),
        nu_alpha=nu,
    )
    if not eta_full:
        mean.theta_eta = [np.zeros_like(e) for e in mean.theta_eta]
    return mean


# ---------------------------------------------------------------------------
# chains


def _curvature_step(hess: np.ndarray, scale=None) -> float:
    """MALA step from the largest curvature of a (preconditioned) Gaussian block.

    Uses the usual ``1.65 * d^(-1/6)`` scaling; adaptation refines it.
    """
    if scale is not None:
        s = np.sqrt(scale)
        hess = hess * s[:, None] * s[None, :]
    top = float(linalg.eigvalsh(hess, subset_by_index=[len(hess) - 1, len(hess) - 1])[0])
    return 1.65 * len(hess) ** (-1.0 / 6.0) / math.sqrt(max(top, 1e-300))


def _initial_steps(config: SamplerConfig, bases, hessians, scales) -> np.ndarray:
    if config.step_init is not None:
        return _per_region(config.step_init, len(bases), 0.0)
    return np.array([_curvature_step(H, sc) for H, sc in zip(hessians, scales)])


def _scales(config: SamplerConfig, bases, sigma2: float):
    if config.precond == "identity":
        return [None] * len(bases)
    return [b.eigvals * sigma2 for b in bases]


class _Recorder:
    def __init__(self, config: SamplerConfig):
        self.burnin = config.burnin
        self.thin = config.thin
        self.rows: dict[str, list] = {}

    def due(self, t: int) -> bool:
        return t >= self.burnin and (t - self.burnin + 1) % self.thin == 0

    def add(self, **values):
        for k, v in values.items():
            self.rows.setdefault(k, []).append(np.array(v, dtype=np.float64, copy=True))

    def arrays(self) -> dict:
        return {k: np.stack(v) for k, v in self.rows.items()}


def sample_mala(logpost_fn: Callable, grad_fn: Callable, theta0, config: SamplerConfig,
                rng: np.random.Generator | None = None, scale=None):
    """Adaptive MALA on an arbitrary differentiable log density.

    Uses the same schedule as the model chains: batch adaptation toward the
    target acceptance during the first ``adapt_stop_frac`` of burn-in, then
    thinned recording. ``config.step_init`` defaults to ``1.65 d^(-1/6)`` and
    the target to ``clamp(target_const / d, 0.2, 0.4)``.
    Returns ``(draws, accept_rate, final_step)``.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    theta = np.array(theta0, dtype=np.float64)
    d = theta.shape[0]
    steps = _per_region(config.step_init, 1, 1.65 * d ** (-1.0 / 6.0))
    targets = _per_region(config.target_accept, 1, min(max(config.target_const / d, 0.2), 0.4))
    adapter = _Adapter(steps, targets, config)
    recorder = _Recorder(config)

    def evaluate(th):
        return logpost_fn(th), grad_fn(th), None

    lp, grad = logpost_fn(theta), grad_fn(theta)
    if not math.isfinite(lp):
        raise InvalidStateError("log density is not finite at the starting point")
    for t in range(config.iters):
        theta, lp, grad, _, acc = _mala_core(theta, lp, grad, evaluate, steps[0], rng, scale)
        adapter.record(0, acc)
        adapter.end_iteration(t)
        if recorder.due(t):
            recorder.add(theta=theta)
    return recorder.arrays()["theta"], float(adapter.rates()[0]), float(steps[0])


def run_outcome_chain(data: MediationDataset, bases: Sequence[RegionBasis],
                      config: SamplerConfig, rng: np.random.Generator | None = None,
                      init_state: OutcomeState | None = None) -> ChainTrace:
    """Region-blocked MALA + Gibbs sampler for the outcome model.

    Each iteration visits regions in ascending order and makes one MALA move
    on that region's coefficients with the others held fixed. After the first
    ``beta_only_frac`` of iterations, ``(gamma, xi)`` and the variances are
    also Gibbs-updated every iteration.
    """
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if init_state is None:
        state, _ = init_outcome(data, bases, config.init, rng, config.nu, config)
    else:
        state = init_state.copy()
    state.nu_beta = config.nu
    nu = config.nu
    priors = config.priors
    p = data.p
    R = len(bases)
    blocks = [data.grid.region_indices(b.region) for b in bases]
    Mt = [np.ascontiguousarray(data.M[:, ix]) / p for ix in blocks]
    Q = [b.Q for b in bases]
    QT = [np.ascontiguousarray(b.Q.T) for b in bases]
    lam = [b.eigvals for b in bases]
    theta = [np.array(t, dtype=np.float64) for t in state.theta_beta]
    contrib = [Mt[r] @ soft_threshold(Q[r] @ theta[r], nu) for r in range(R)]
    other = state.gamma * data.X + data.C @ state.xi
    resid = data.Y - other - np.sum(contrib, axis=0)

    if config.step_init is None:
        hess = [(lambda W: W.T @ W)(Mt[r] @ Q[r]) / state.sigma2_Y
                + np.diag(1.0 / (lam[r] * state.sigma2_beta)) for r in range(R)]
    else:
        hess = [None] * R
    steps = _initial_steps(config, bases, hess, _scales(config, bases, state.sigma2_beta))
    targets = _per_region(config.target_accept, R, 0.0)
    if config.target_accept is None:
        targets = default_targets(bases, config.target_const)
    adapter = _Adapter(steps, targets, config)
    recorder = _Recorder(config)
    beta_only = int(config.beta_only_frac * config.iters)
    design = _OutcomeDesign(data, bases) if config.theta_update == "gibbs" else None

    for t in range(config.iters):
        s2, sb2 = state.sigma2_Y, state.sigma2_beta
        if design is not None:
            state.theta_beta = theta
            theta = _linear_theta_draw(rng, design, data, state)
            contrib = [Mt[r] @ (Q[r] @ theta[r]) for r in range(R)]
            resid = data.Y - other - np.sum(contrib, axis=0)
        else:
            scales = _scales(config, bases, sb2)
            for r in range(R):
                base = resid + contrib[r]
                Mr, Qr, QTr, lr = Mt[r], Q[r], QT[r], lam[r]

                def evaluate(th, Mr=Mr, Qr=Qr, QTr=QTr, lr=lr, base=base):
                    latent = Qr @ th
                    c = Mr @ soft_threshold(latent, nu)
                    e = base - c
                    g_vox = (np.abs(latent) >= nu) * (e @ Mr)
                    lp = -0.5 * float(e @ e) / s2 - 0.5 * float(np.sum(th * th / lr)) / sb2
                    grad = QTr @ g_vox / s2 - th / (lr * sb2)
                    return lp, grad, (c, e)

                th = theta[r]
                latent = Qr @ th
                lp = -0.5 * float(resid @ resid) / s2 - 0.5 * float(np.sum(th * th / lr)) / sb2
                if not math.isfinite(lp):
                    raise DivergenceError(f"outcome log-posterior diverged at iteration {t}")
                grad = QTr @ ((np.abs(latent) >= nu) * (resid @ Mr)) / s2 - th / (lr * sb2)
                th_new, _, _, aux, acc = _mala_core(th, lp, grad, evaluate, steps[r], rng,
                                                    scales[r])
                adapter.record(r, acc)
                if acc:
                    theta[r] = th_new
                    contrib[r], resid = aux
        if t >= beta_only:
            state.theta_beta = theta
            offset = np.sum(contrib, axis=0)
            state.gamma, state.xi = gibbs_gamma_xi(state, data, bases, rng, priors, offset)
            other = state.gamma * data.X + data.C @ state.xi
            resid = data.Y - other - offset
            for k, v in _outcome_variance_params(state, data, bases, priors, resid).items():
                setattr(state, k, _inv_gamma(rng, *v))
        adapter.end_iteration(t)
        if recorder.due(t):
            beta = np.zeros(p)
            for r in range(R):
                beta[blocks[r]] = soft_threshold(Q[r] @ theta[r], nu)
            recorder.add(theta_beta=np.concatenate(theta), beta=beta, gamma=state.gamma,
                         xi=state.xi, sigma2_Y=state.sigma2_Y, sigma2_beta=state.sigma2_beta,
                         sse=float(resid @ resid))
    state.theta_beta = theta
    return ChainTrace("outcome", recorder.arrays(), adapter.rates(), adapter.steps.copy(),
                      config.seed, targets, config.to_dict(), [b.L for b in bases],
                      time.perf_counter() - t0)


def run_mediator_chain(data: MediationDataset, bases: Sequence[RegionBasis],
                       config: SamplerConfig, rng: np.random.Generator | None = None,
                       init_state: MediatorState | None = None) -> ChainTrace:
    """Region-blocked MALA on ``theta_alpha`` plus Gibbs on the remaining parameters.

    With ``eta_update="zero"`` the individual effects stay at zero.
    """
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    stats = _MediatorStats(data, bases)
    eta_full = config.eta_update == "full"
    if eta_full and stats.rank < data.design.shape[1]:
        raise IdentifiabilityError("exposure/confounder design is rank deficient")
    if init_state is None:
        state = init_mediator(data, bases, config.init, rng, config.nu, config, stats)
    else:
        state = init_state.copy()
    if not eta_full:
        state.theta_eta = [np.zeros((data.n, b.L)) for b in bases]
    state.nu_alpha = nu = config.nu
    priors = config.priors
    R = len(bases)
    blocks = stats.idx
    sxx = stats.DtD[0, 0]

    hess = [np.diag(sxx / state.sigma2_M + 1.0 / (b.eigvals * state.sigma2_alpha))
            for b in bases]
    steps = _initial_steps(config, bases, hess, _scales(config, bases, state.sigma2_alpha))
    targets = default_targets(bases, config.target_const) if config.target_accept is None \
        else _per_region(config.target_accept, R, 0.0)
    adapter = _Adapter(steps, targets, config)
    recorder = _Recorder(config)

    for t in range(config.iters):
        s2, sa2 = state.sigma2_M, state.sigma2_alpha
        if config.theta_update == "gibbs":
            _alpha_gibbs_linear(state, stats, bases, rng)
        else:
            scales = _scales(config, bases, sa2)
            for r, b in enumerate(bases):
                bvec = _alpha_suffstat(state, stats, bases, r)
                Qr, lr = b.Q, b.eigvals

                def evaluate(th, Qr=Qr, lr=lr, bvec=bvec):
                    latent = Qr @ th
                    a = soft_threshold(latent, nu)
                    lp = -0.5 * (sxx * float(a @ a) - 2.0 * float(a @ bvec)) / s2
                    lp -= 0.5 * float(np.sum(th * th / lr)) / sa2
                    g_vox = (np.abs(latent) >= nu) * (bvec - sxx * a)
                    return lp, Qr.T @ g_vox / s2 - th / (lr * sa2), None

                th = state.theta_alpha[r]
                lp, grad, _ = evaluate(th)
                if not math.isfinite(lp):
                    raise DivergenceError(f"mediator log-posterior diverged at iteration {t}")
                th_new, _, _, _, acc = _mala_core(th, lp, grad, evaluate, steps[r], rng,
                                                  scales[r])
                adapter.record(r, acc)
                if acc:
                    state.theta_alpha[r] = th_new
        _mediator_sweep_rest(state, stats, bases, rng, priors, eta_full)
        adapter.end_iteration(t)
        if recorder.due(t):
            alpha = np.zeros(data.p)
            for r, b in enumerate(bases):
                alpha[blocks[r]] = soft_threshold(b.Q @ state.theta_alpha[r], nu)
            eta_all = np.concatenate(state.theta_eta, axis=1)
            row = dict(theta_alpha=np.concatenate(state.theta_alpha), alpha=alpha,
                       theta_zeta=np.concatenate(state.theta_zeta, axis=1),
                       sigma2_M=state.sigma2_M, sigma2_alpha=state.sigma2_alpha,
                       sigma2_eta=state.sigma2_eta, sigma2_zeta=state.sigma2_zeta,
                       eta_constraint=float(np.max(np.abs(stats.D.T @ eta_all), initial=0.0)))
            if config.record_eta:
                row["theta_eta"] = eta_all
            recorder.add(**row)
    return ChainTrace("mediator", recorder.arrays(), adapter.rates(), adapter.steps.copy(),
                      config.seed, targets, config.to_dict(), [b.L for b in bases],
                      time.perf_counter() - t0)
