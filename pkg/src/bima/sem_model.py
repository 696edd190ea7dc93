"""Outcome and mediator models: data containers, log-posteriors, gradients.

Outcome model (scalar on image)::

    Y_i = sum_j beta(s_j) M_i(s_j) / p + gamma X_i + xi' C_i + eps_Y

Mediator model (image on scalar)::

    M_i(s_j) = alpha(s_j) X_i + zeta(s_j)' C_i + eta_i(s_j) + eps_M

``beta`` and ``alpha`` are soft-thresholded GPs, ``zeta_k`` and ``eta_i``
plain GPs, all expanded on the per-region bases.

Log-posteriors include the full Gaussian likelihood and the quadratic parts of
the coefficient priors; prior normalising constants, which only depend on
variances, are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError
from .kernel_basis import RegionBasis, VoxelGrid
from .stgp import latent_field, soft_threshold, soft_threshold_grad

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Priors:
    """Hyperparameters: N(0, sigma2_gamma0) on gamma and xi, IG(shape, rate) on variances."""

    sigma2_gamma0: float = 100.0
    ig_shape: float = 1.0
    ig_rate: float = 1.0


@dataclass(frozen=True, eq=False)
class MediationDataset:
    Y: np.ndarray
    X: np.ndarray
    C: np.ndarray
    M: np.ndarray
    grid: VoxelGrid

    def __post_init__(self):
        Y = np.ascontiguousarray(self.Y, dtype=np.float64).ravel()
        X = np.ascontiguousarray(self.X, dtype=np.float64).ravel()
        n = Y.shape[0]
        C = np.asarray(self.C, dtype=np.float64)
        if C.size == 0:
            C = np.zeros((n, 0))
        C = np.ascontiguousarray(C.reshape(n, -1))
        M = np.ascontiguousarray(self.M, dtype=np.float64)
        if X.shape != (n,) or M.shape != (n, self.grid.p):
            raise InvalidArgumentError(
                f"inconsistent shapes: Y {Y.shape}, X {X.shape}, C {C.shape}, M {M.shape}, "
                f"p={self.grid.p}")
        if n < C.shape[1] + 2:
            raise InvalidArgumentError("need n >= q + 2 subjects")
        for name, arr in (("Y", Y), ("X", X), ("C", C), ("M", M)):
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} contains non-finite values")
        for name, arr in (("Y", Y), ("X", X), ("C", C), ("M", M)):
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def q(self) -> int:
        return self.C.shape[1]

    @property
    def p(self) -> int:
        return self.grid.p

    @property
    def design(self) -> np.ndarray:
        """Exposure and confounders side by side, ``(n, 1 + q)``."""
        return np.column_stack([self.X, self.C])

    def subset(self, rows) -> "MediationDataset":
        rows = np.asarray(rows)
        return MediationDataset(self.Y[rows], self.X[rows], self.C[rows], self.M[rows], self.grid)


@dataclass
class OutcomeState:
    theta_beta: list
    gamma: float
    xi: np.ndarray
    sigma2_Y: float = 1.0
    sigma2_beta: float = 1.0
    nu_beta: float = 0.5

    def copy(self) -> "OutcomeState":
        return replace(self, theta_beta=[t.copy() for t in self.theta_beta], xi=self.xi.copy())

    @classmethod
    def zeros(cls, bases: Sequence[RegionBasis], q: int, nu_beta: float = 0.5) -> "OutcomeState":
        return cls([np.zeros(b.L) for b in bases], 0.0, np.zeros(q), 1.0, 1.0, nu_beta)


@dataclass
class MediatorState:
    """Mediator-model parameters.

    ``theta_zeta[r]`` has shape ``(q, L_r)``; ``theta_eta[r]`` has shape ``(n, L_r)``.
    """

    theta_alpha: list
    theta_zeta: list
    theta_eta: list
    sigma2_M: float = 1.0
    sigma2_alpha: float = 1.0
    sigma2_eta: float = 1.0
    sigma2_zeta: float = 1.0
    nu_alpha: float = 0.5

    def copy(self) -> "MediatorState":
        return replace(
            self,
            theta_alpha=[t.copy() for t in self.theta_alpha],
            theta_zeta=[t.copy() for t in self.theta_zeta],
            theta_eta=[t.copy() for t in self.theta_eta],
        )

    @classmethod
    def zeros(cls, bases: Sequence[RegionBasis], n: int, q: int,
              nu_alpha: float = 0.5) -> "MediatorState":
        return cls(
            [np.zeros(b.L) for b in bases],
            [np.zeros((q, b.L)) for b in bases],
            [np.zeros((n, b.L)) for b in bases],
            nu_alpha=nu_alpha,
        )


def intensity_measure(M_row, grid: VoxelGrid) -> np.ndarray:
    """Per-voxel intensity measure ``M_i(s_j) * (1/p)``."""
    M_row = np.asarray(M_row, dtype=np.float64)
    if M_row.shape[-1] != grid.p:
        raise InvalidArgumentError("row length does not match the grid")
    return M_row / grid.p


def coef_fields(bases: Sequence[RegionBasis], grid: VoxelGrid, coefs: Sequence[np.ndarray]) -> np.ndarray:
    """Map per-region coefficient matrices ``(m, L_r)`` to voxel fields ``(m, p)``."""
    m = coefs[0].shape[0] if len(coefs) else 0
    out = np.zeros((m, grid.p))
    for b, c in zip(bases, coefs):
        if c.shape != (m, b.L):
            raise InvalidArgumentError(f"region {b.region}: coefficient shape {c.shape}")
        out[:, grid.region_indices(b.region)] = c @ b.Q.T
    return out


def _prior_quad(theta: Sequence[np.ndarray], bases: Sequence[RegionBasis], sigma2: float) -> float:
    # works for (L_r,) vectors and (m, L_r) stacks alike
    total = 0.0
    for t, b in zip(theta, bases):
        total += float(np.sum(np.asarray(t) ** 2 / b.eigvals))
    return -0.5 * total / sigma2


def _check_positive(**variances):
    for name, v in variances.items():
        if not (v > 0 and math.isfinite(v)):
            raise InvalidStateError(f"{name} must be positive, got {v}")


def beta_field(state: OutcomeState, data: MediationDataset, bases) -> np.ndarray:
    return soft_threshold(latent_field(bases, state.theta_beta, data.grid), state.nu_beta)


def outcome_mean(state: OutcomeState, data: MediationDataset, bases) -> np.ndarray:
    beta = beta_field(state, data, bases)
    return data.M @ beta / data.p + state.gamma * data.X + data.C @ state.xi


def outcome_logpost(state: OutcomeState, data: MediationDataset, bases,
                    priors: Priors = Priors()) -> float:
    _check_positive(sigma2_Y=state.sigma2_Y, sigma2_beta=state.sigma2_beta)
    resid = data.Y - outcome_mean(state, data, bases)
    s2 = state.sigma2_Y
    loglik = -0.5 * data.n * (_LOG_2PI + math.log(s2)) - 0.5 * float(resid @ resid) / s2
    lp = _prior_quad(state.theta_beta, bases, state.sigma2_beta)
    lp -= 0.5 * (state.gamma ** 2 + float(state.xi @ state.xi)) / priors.sigma2_gamma0
    return loglik + lp


def outcome_grad_theta(state: OutcomeState, data: MediationDataset, bases, region: int,
                       priors: Priors = Priors()) -> np.ndarray:
    """Gradient of :func:`outcome_logpost` with respect to ``theta_beta[region]``."""
    _check_positive(sigma2_Y=state.sigma2_Y, sigma2_beta=state.sigma2_beta)
    b = bases[region]
    theta = np.asarray(state.theta_beta[region])
    if theta.shape != (b.L,):
        raise InvalidArgumentError("coefficient length does not match the basis")
    idx = data.grid.region_indices(b.region)
    resid = data.Y - outcome_mean(state, data, bases)
    latent = b.Q @ theta
    dT = soft_threshold_grad(latent, state.nu_beta)
    g_vox = dT * (resid @ data.M[:, idx]) / data.p
    return b.Q.T @ g_vox / state.sigma2_Y - theta / (b.eigvals * state.sigma2_beta)


def alpha_field(state: MediatorState, data: MediationDataset, bases) -> np.ndarray:
    return soft_threshold(latent_field(bases, state.theta_alpha, data.grid), state.nu_alpha)


def mediator_mean(state: MediatorState, data: MediationDataset, bases) -> np.ndarray:
    alpha = alpha_field(state, data, bases)
    mean = np.outer(data.X, alpha)
    if data.q:
        mean += data.C @ coef_fields(bases, data.grid, state.theta_zeta)
    mean += coef_fields(bases, data.grid, state.theta_eta)
    return mean


def mediator_logpost(state: MediatorState, data: MediationDataset, bases) -> float:
    _check_positive(sigma2_M=state.sigma2_M, sigma2_alpha=state.sigma2_alpha,
                    sigma2_eta=state.sigma2_eta, sigma2_zeta=state.sigma2_zeta)
    resid = data.M - mediator_mean(state, data, bases)
    s2 = state.sigma2_M
    npts = resid.size
    loglik = -0.5 * npts * (_LOG_2PI + math.log(s2)) - 0.5 * float(np.sum(resid * resid)) / s2
    lp = _prior_quad(state.theta_alpha, bases, state.sigma2_alpha)
    lp += _prior_quad(state.theta_zeta, bases, state.sigma2_zeta)
    lp += _prior_quad(state.theta_eta, bases, state.sigma2_eta)
    return loglik + lp


def mediator_grad_theta_alpha(state: MediatorState, data: MediationDataset, bases,
                              region: int) -> np.ndarray:
    """Gradient of :func:`mediator_logpost` with respect to ``theta_alpha[region]``."""
    _check_positive(sigma2_M=state.sigma2_M, sigma2_alpha=state.sigma2_alpha)
    b = bases[region]
    theta = np.asarray(state.theta_alpha[region])
    if theta.shape != (b.L,):
        raise InvalidArgumentError("coefficient length does not match the basis")
    idx = data.grid.region_indices(b.region)
    resid = data.M[:, idx] - mediator_mean(state, data, bases)[:, idx]
    dT = soft_threshold_grad(b.Q @ theta, state.nu_alpha)
    g_vox = dT * (data.X @ resid)
    return b.Q.T @ g_vox / state.sigma2_M - theta / (b.eigvals * state.sigma2_alpha)
