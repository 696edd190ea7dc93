"""Synthetic mediation datasets with known sparse effect maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .kernel_basis import KernelSpec, VoxelGrid, build_bases
from .sem_model import MediationDataset
from .stgp import soft_threshold

__all__ = ["SimDesign", "SimTruth", "make_pattern", "generate", "score_replication"]

# target share of voxels covered by each field's support
_SUPPORT_FRAC = {"dense": 0.25, "sparse": 0.06}


@dataclass
class SimDesign:
    """Simulation settings.

    ``shape``/``blocks`` define a lattice split into equal regions, e.g.
    ``(20, 20)`` in ``(2, 2)`` blocks. ``alpha0``/``beta0`` are required for
    the ``"custom"`` pattern.

    ``eta_scale`` multiplies the prior sd of the individual-effect
    coefficients. Large values give the mediator images strong
    subject-to-subject variation, which is what makes ``beta`` learnable
    from a couple of hundred subjects.
    """

    n: int = 200
    shape: tuple = (20, 20)
    blocks: tuple = (2, 2)
    pattern: str = "sparse"
    sigma_Y: float = 0.1
    sigma_M: float = 1.0
    nu_true: float = 0.1
    gamma0: float = 0.5
    xi0: tuple = (0.5, -0.5)
    eta_scale: float = 20.0
    zeta_scale: float = 0.5
    amplitude: float = 1.0
    support_frac: float | None = None
    alpha_ratio: float = 1.15
    profile_power: float = 2.0
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec("matern", 0.2, 0.1))
    basis_frac: float = 0.2
    x_mode: str = "normal"
    seed: int = 0
    alpha0: np.ndarray | None = None
    beta0: np.ndarray | None = None

    def __post_init__(self):
        if self.n < len(self.xi0) + 2:
            raise InvalidArgumentError("n must be at least q + 2")
        if self.pattern not in ("dense", "sparse", "custom"):
            raise InvalidArgumentError(f"unknown pattern {self.pattern!r}")
        if self.pattern == "custom" and (self.alpha0 is None or self.beta0 is None):
            raise InvalidArgumentError("custom pattern needs alpha0 and beta0")
        if min(self.sigma_Y, self.sigma_M, self.eta_scale, self.nu_true) < 0:
            raise InvalidArgumentError("scales must be non-negative")
        if self.x_mode not in ("normal", "bernoulli"):
            raise InvalidArgumentError("x_mode must be 'normal' or 'bernoulli'")
        self.shape = tuple(int(s) for s in self.shape)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.xi0 = tuple(float(x) for x in self.xi0)

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid.lattice(self.shape, self.blocks)

    @property
    def q(self) -> int:
        return len(self.xi0)


@dataclass
class SimTruth:
    alpha0: np.ndarray
    beta0: np.ndarray
    svme0: np.ndarray
    gamma0: float
    xi0: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    theta_eta: list

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.svme0 != 0)


def _disk(lattice_pts, center, radius):
    d2 = np.sum((lattice_pts - center) ** 2, axis=1)
    return d2 <= radius * radius, np.sqrt(d2)


def make_pattern(grid: VoxelGrid, pattern: str, rng, nu_true: float = 0.5,
                 amplitude: float = 1.0, support_frac: float | None = None,
                 alpha_ratio: float = 1.15, profile_power: float = 2.0):
    """Sparse ``(alpha0, beta0)`` maps made of one disk per active region.

    Inside each disk the value is ``sign * (2 nu_true + amplitude * (1 - (d/r)^2))``
    so the magnitude never drops below ``2 nu_true`` on the support; outside
    the value is exactly zero. ``"dense"`` puts a disk in every region,
    ``"sparse"`` in half of them. The alpha disk is a slightly shifted copy of
    the beta disk with radius scaled by ``alpha_ratio``, so the two supports
    overlap.
    """
    if grid.shape is None:
        raise InvalidArgumentError("pattern generation needs a lattice grid")
    if pattern not in _SUPPORT_FRAC:
        raise InvalidArgumentError(f"unknown pattern {pattern!r}")
    frac = _SUPPORT_FRAC[pattern] if support_frac is None else float(support_frac)
    lattice = np.stack(np.unravel_index(np.arange(grid.p), grid.shape), axis=1).astype(float)
    R = grid.n_regions
    if pattern == "dense":
        active = np.arange(R)
    else:
        active = np.sort(rng.choice(R, size=max(1, R // 2), replace=False))
    alpha0, beta0 = np.zeros(grid.p), np.zeros(grid.p)
    floor = 2.0 * nu_true
    for r in active:
        idx = grid.region_indices(r)
        pts = lattice[idx]
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        area = frac * grid.p / len(active)
        # the two disk areas have geometric mean equal to the target area
        rb = math.sqrt(area / math.pi) / math.sqrt(alpha_ratio)
        ra = rb * alpha_ratio
        room = (hi - lo) / 2 - max(ra, rb) - 0.5
        if np.any(room < 0):
            raise InvalidArgumentError("pattern disks do not fit inside the region")
        center = (lo + hi) / 2 + rng.uniform(-1, 1, size=len(lo)) * np.minimum(room, 1.0) * 0.5
        offset = rng.uniform(-1, 1, size=len(lo)) * 0.15 * rb
        for out, c, rad in ((beta0, center, rb), (alpha0, center + offset, ra)):
            inside, dist = _disk(pts, c, rad)
            sign = rng.choice([-1.0, 1.0])
            vals = sign * (floor + amplitude * (1.0 - (dist / rad) ** profile_power))
            out[idx[inside]] = vals[inside]
    return alpha0, beta0


def generate(design: SimDesign):
    """Draw a dataset and its ground truth. Same design, same bits."""
    rng = np.random.default_rng(design.seed)
    grid = design.grid
    n, q, p = design.n, design.q, grid.p
    if design.pattern == "custom":
        alpha0 = np.asarray(design.alpha0, dtype=np.float64)
        beta0 = np.asarray(design.beta0, dtype=np.float64)
        if alpha0.shape != (p,) or beta0.shape != (p,):
            raise InvalidArgumentError("custom fields must have one value per voxel")
    else:
        alpha0, beta0 = make_pattern(grid, design.pattern, rng, design.nu_true,
                                     design.amplitude, design.support_frac,
                                     design.alpha_ratio, design.profile_power)
    bases = build_bases(grid, design.kernel, basis_frac=design.basis_frac)
    if design.x_mode == "normal":
        X = rng.standard_normal(n)
    else:
        X = rng.binomial(1, 0.5, size=n).astype(float)
    C = rng.standard_normal((n, q))
    D = np.column_stack([X, C])
    U, _ = np.linalg.qr(D)

    zeta = np.zeros((q, p))
    eta = np.zeros((n, p))
    theta_eta = []
    for b in bases:
        idx = grid.region_indices(b.region)
        sd = np.sqrt(b.eigvals)
        zeta[:, idx] = (design.zeta_scale * rng.standard_normal((q, b.L)) * sd) @ b.Q.T
        th = design.eta_scale * rng.standard_normal((n, b.L)) * sd
        th = th - U @ (U.T @ th)
        theta_eta.append(th)
        eta[:, idx] = th @ b.Q.T

    M = np.outer(X, alpha0) + C @ zeta + eta + design.sigma_M * rng.standard_normal((n, p))
    xi0 = np.array(design.xi0)
    Y = M @ beta0 / p + design.gamma0 * X + C @ xi0 + design.sigma_Y * rng.standard_normal(n)
    data = MediationDataset(Y, X, C, M, grid)
    truth = SimTruth(alpha0, beta0, alpha0 * beta0, design.gamma0, xi0, eta, zeta, theta_eta)
    return data, truth


def score_replication(reports, truths) -> dict:
    """Aggregate selection and estimation accuracy over replications.

    Returns ``{metric: (mean, sd)}`` with every metric multiplied by 100:
    ``fdr``, ``tpr``, ``acc`` and ``mse_activation`` (mean squared error of
    the reported effect map over the true support).
    """
    from .mediation import selection_metrics

    if len(reports) != len(truths) or not reports:
        raise InvalidArgumentError("need one truth per report")
    rows = []
    for rep, tr in zip(reports, truths):
        svme0 = tr.svme0 if isinstance(tr, SimTruth) else np.asarray(tr)
        if len(rep.svme_selected) != len(svme0):
            raise InvalidArgumentError("report and truth have different lengths")
        support = set(np.flatnonzero(svme0 != 0).tolist())
        fdr, tpr, acc = selection_metrics(rep.selected, support, len(svme0))
        on = np.flatnonzero(svme0 != 0)
        mse = float(np.mean((rep.svme_selected[on] - svme0[on]) ** 2)) if len(on) else 0.0
        rows.append((fdr, tpr, acc, mse))
    arr = 100.0 * np.array(rows)
    sd = arr.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(4)
    names = ("fdr", "tpr", "acc", "mse_activation")
    return {k: (float(m), float(s)) for k, m, s in zip(names, arr.mean(axis=0), sd)}
