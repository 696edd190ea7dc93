"""Covariance kernels on a voxel grid and truncated per-region eigenbases.

Each region of the grid gets its own dense kernel matrix. The leading
eigenvectors (re-orthonormalised with QR) and their eigenvalues give the
basis ``Q_r`` and the prior scales ``D_r`` used by every spatially varying
coefficient in the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, special

from .errors import DegenerateKernelError, InvalidArgumentError

__all__ = [
    "VoxelGrid",
    "KernelSpec",
    "RegionBasis",
    "matern_c",
    "kernel_eval",
    "kernel_matrix",
    "build_region_basis",
    "build_bases",
    "fit_kernel_params",
    "centroid_correlation",
]

# eigenpairs below this fraction of the largest eigenvalue are treated as null
_NULL_EIG_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Fixed design points in [0, 1]^d with a region partition.

    Regions are numbered ``0..R-1`` internally.
    """

    coords: np.ndarray
    region_of: np.ndarray
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim == 1:
            coords = coords[:, None]
        region_of = np.ascontiguousarray(self.region_of, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise InvalidArgumentError("coords must be a non-empty (p, d) array")
        if region_of.shape != (coords.shape[0],):
            raise InvalidArgumentError("region_of must have one entry per voxel")
        if not np.all(np.isfinite(coords)) or coords.min() < 0 or coords.max() > 1:
            raise InvalidArgumentError("coords must lie in [0, 1]^d")
        if region_of.min() < 0:
            raise InvalidArgumentError("region indices must be non-negative")
        counts = np.bincount(region_of)
        if np.any(counts == 0):
            raise InvalidArgumentError("every region index up to max must be non-empty")
        if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
            raise InvalidArgumentError("coords must be pairwise distinct")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "region_of", region_of)
        object.__setattr__(
            self, "_members", [np.flatnonzero(region_of == r) for r in range(len(counts))]
        )

    @classmethod
    def lattice(cls, shape: Sequence[int], blocks: Sequence[int]) -> "VoxelGrid":
        """Regular lattice over [0,1]^d split into equal rectangular regions.

        ``shape=(20, 20), blocks=(2, 2)`` gives 400 voxels in four 10x10 regions.
        Voxels are ordered row-major over ``shape``; regions row-major over
        ``blocks``.
        """
        shape = tuple(int(s) for s in shape)
        blocks = tuple(int(b) for b in blocks)
        if len(shape) != len(blocks) or any(s < 1 for s in shape):
            raise InvalidArgumentError("shape and blocks must have equal length")
        if any(b < 1 or s % b for s, b in zip(shape, blocks)):
            raise InvalidArgumentError("each block count must divide the grid side")
        axes = [np.linspace(0.0, 1.0, s) if s > 1 else np.zeros(1) for s in shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        idx = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
        block_idx = [i.ravel() // (s // b) for i, s, b in zip(idx, shape, blocks)]
        region_of = np.ravel_multi_index(block_idx, blocks)
        return cls(coords, region_of, shape)

    @property
    def p(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_regions(self) -> int:
        return len(self._members)

    @property
    def voxel_measure(self) -> Fraction:
        return Fraction(1, self.p)

    def region_indices(self, region: int) -> np.ndarray:
        """Voxel indices of ``region`` in ascending order."""
        return self._members[region]

    def region_sizes(self) -> list[int]:
        return [len(m) for m in self._members]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters.

    ``family`` is ``"matern"`` (smoothness ``u``, scale ``rho``) or
    ``"modified_se"`` (``a``, ``b``). ``per_region`` maps a region index to a
    ``(u, rho)`` override for the Matern family.
    """

    family: str = "matern"
    u: float = 0.2
    rho: float = 2.0
    a: float = 0.01
    b: float = 10.0
    per_region: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("matern", "modified_se"):
            raise InvalidArgumentError(f"unknown kernel family {self.family!r}")
        if self.family == "matern":
            for u, rho in [(self.u, self.rho), *self.per_region.values()]:
                if not (u > 0 and rho > 0):
                    raise InvalidArgumentError("Matern kernel needs u > 0 and rho > 0")
        elif not (self.b > 0 and self.a >= 0):
            raise InvalidArgumentError("modified SE kernel needs a >= 0 and b > 0")

    def for_region(self, region: int) -> "KernelSpec":
        if region in self.per_region:
            u, rho = self.per_region[region]
            return KernelSpec("matern", float(u), float(rho), self.a, self.b)
        return self

    def to_dict(self) -> dict:
        d = {"family": self.family}
        if self.family == "matern":
            d.update(u=self.u, rho=self.rho)
            if self.per_region:
                d["per_region"] = {str(k): list(v) for k, v in self.per_region.items()}
        else:
            d.update(a=self.a, b=self.b)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        per_region = {int(k): tuple(v) for k, v in d.get("per_region", {}).items()}
        kw = {k: d[k] for k in ("u", "rho", "a", "b") if k in d}
        return cls(family=d.get("family", "matern"), per_region=per_region, **kw)


@dataclass(frozen=True, eq=False)
class RegionBasis:
    region: int
    Q: np.ndarray
    eigvals: np.ndarray
    cutoff_frac: float
    kernel: KernelSpec | None = None
    trace: float = float("nan")

    @property
    def L(self) -> int:
        return self.Q.shape[1]

    @property
    def size(self) -> int:
        return self.Q.shape[0]


def matern_c(t, u: float):
    """Normalised Matern correlation ``C_u(t)``.

    ``C_u(t) = 2^(1-u)/Gamma(u) * (sqrt(2u) t)^u * K_u(sqrt(2u) t)`` with
    ``C_u(0) = 1``. Accepts scalars or arrays.
    """
    if not (u > 0 and math.isfinite(u)):
        raise InvalidArgumentError("u must be a positive finite number")
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t_arr)) or np.any(t_arr < 0):
        raise InvalidArgumentError("t must be finite and non-negative")
    x = math.sqrt(2.0 * u) * t_arr
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        # kve(u, x) = K_u(x) e^x; working in logs keeps large x finite
        log_c = (
            (1.0 - u) * math.log(2.0)
            - special.gammaln(u)
            + u * np.log(xp)
            + np.log(special.kve(u, xp))
            - xp
        )
        out[pos] = np.minimum(np.exp(log_c), 1.0)
    if np.ndim(t) == 0:
        return float(out)
    return out


def _check_point(s, dim: int | None) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.ndim != 1 or (dim is not None and s.shape[0] != dim):
        raise InvalidArgumentError("point dimension mismatch")
    return s


def kernel_eval(s, s2, spec: KernelSpec, dim: int | None = None) -> float:
    """Evaluate the kernel between two points.

    The Matern family takes the squared distance over ``rho`` as its
    argument: ``C_u(||s - s2||^2 / rho)``.
    """
    s = _check_point(s, dim)
    s2 = _check_point(s2, s.shape[0])
    d2 = float(np.sum((s - s2) ** 2))
    if spec.family == "matern":
        return matern_c(d2 / spec.rho, spec.u)
    return math.exp(-spec.a * (float(np.sum(s * s)) + float(np.sum(s2 * s2))) - spec.b * d2)


def kernel_matrix(coords: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Dense kernel matrix over the rows of ``coords``."""
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if spec.family == "matern":
        K = matern_c(d2 / spec.rho, spec.u)
    else:
        sq = np.sum(coords * coords, axis=1)
        K = np.exp(-spec.a * (sq[:, None] + sq[None, :]) - spec.b * d2)
    # d2 is symmetric up to rounding in the einsum; enforce it exactly
    return np.triu(K) + np.triu(K, 1).T


def _truncate(K: np.ndarray, cutoff_frac: float, n_basis: int | None):
    w, V = linalg.eigh(K)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    w = np.where(w > 0, w, 0.0)
    if w[0] <= 0:
        raise DegenerateKernelError("kernel matrix has no positive eigenvalues")
    keep = w > _NULL_EIG_RTOL * w[0]
    w, V = w[keep], V[:, keep]
    if n_basis is not None:
        L = min(int(n_basis), len(w))
    else:
        csum = np.cumsum(w)
        target = cutoff_frac * csum[-1] * (1.0 - 1e-12)
        L = int(np.searchsorted(csum, target, side="left")) + 1
        L = min(L, len(w))
    return w[:L], V[:, :L]


def _orthonormalize(V: np.ndarray) -> np.ndarray:
    Q, R = linalg.qr(V, mode="economic")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def basis_from_matrix(K: np.ndarray, cutoff_frac: float = 0.9, n_basis: int | None = None,
                      region: int = 0) -> RegionBasis:
    """Truncated orthonormal eigenbasis of an explicit symmetric matrix."""
    if not (0 < cutoff_frac <= 1):
        raise InvalidArgumentError("cutoff_frac must be in (0, 1]")
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or not np.allclose(K, K.T, rtol=0, atol=1e-12):
        raise InvalidArgumentError("kernel matrix must be square and symmetric")
    eigvals, V = _truncate(K, cutoff_frac, n_basis)
    return RegionBasis(region, _orthonormalize(V), eigvals, float(cutoff_frac),
                       trace=float(np.trace(K)))


def build_region_basis(grid: VoxelGrid, region: int, spec: KernelSpec,
                       cutoff_frac: float = 0.9, n_basis: int | None = None) -> RegionBasis:
    """Truncated eigenbasis of the kernel restricted to one region.

    By default keeps the smallest number of leading eigenpairs whose sum
    reaches ``cutoff_frac`` of the positive spectrum; ``n_basis`` fixes the
    count instead.
    """
    if not 0 <= region < grid.n_regions:
        raise InvalidArgumentError(f"region {region} out of range")
    rspec = spec.for_region(region)
    K = kernel_matrix(grid.coords[grid.region_indices(region)], rspec)
    basis = basis_from_matrix(K, cutoff_frac, n_basis, region)
    return RegionBasis(region, basis.Q, basis.eigvals, basis.cutoff_frac, rspec, basis.trace)


def build_bases(grid: VoxelGrid, spec: KernelSpec, cutoff_frac: float = 0.9,
                basis_frac: float | None = None) -> list[RegionBasis]:
    """Bases for every region in ascending order.

    ``basis_frac`` sets ``L_r = ceil(basis_frac * p_r)`` and overrides the
    eigenvalue cutoff.
    """
    bases = []
    for r, size in enumerate(grid.region_sizes()):
        n_basis = None if basis_frac is None else max(1, int(math.ceil(basis_frac * size)))
        bases.append(build_region_basis(grid, r, spec, cutoff_frac, n_basis))
    return bases


def fit_kernel_params(empirical_corr: np.ndarray, coords: np.ndarray,
                      grid_points: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Grid search for Matern ``(u, rho)`` best matching an empirical correlation.

    Minimises the Frobenius distance between the kernel-implied correlation on
    ``coords`` and ``empirical_corr``. Ties go to the smallest ``rho``, then the
    smallest ``u``.
    """
    points = sorted({(float(u), float(rho)) for u, rho in grid_points}, key=lambda ur: (ur[1], ur[0]))
    if not points:
        raise InvalidArgumentError("grid of kernel parameters is empty")
    C = np.asarray(empirical_corr, dtype=np.float64)
    best, best_dist = None, math.inf
    for u, rho in points:
        dist = linalg.norm(kernel_matrix(coords, KernelSpec("matern", u, rho)) - C)
        if dist < best_dist:
            best, best_dist = (u, rho), dist
    return best


def centroid_correlation(M_region: np.ndarray, coords: np.ndarray,
                         max_locations: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Empirical voxel correlation on the locations closest to the region centroid.

    Returns ``(corr, coords_used)``; at most ``max_locations`` voxels are used,
    ties in distance resolved by voxel order.
    """
    M_region = np.asarray(M_region, dtype=np.float64)
    centroid = coords.mean(axis=0)
    d = np.sum((coords - centroid) ** 2, axis=1)
    pick = np.sort(np.argsort(d, kind="stable")[:max_locations])
    corr = np.corrcoef(M_region[:, pick], rowvar=False)
    corr = np.atleast_2d(corr)
    np.fill_diagonal(corr, 1.0)
    return corr, coords[pick]
