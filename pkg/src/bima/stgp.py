"""Soft-thresholded Gaussian process fields built from region bases."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .kernel_basis import RegionBasis, VoxelGrid

__all__ = [
    "soft_threshold",
    "soft_threshold_grad",
    "latent_field",
    "eval_field",
    "ThresholdedField",
]


def soft_threshold(x, nu: float):
    """``sign(x) * max(|x| - nu, 0)``, elementwise."""
    if nu < 0:
        raise InvalidArgumentError("threshold must be non-negative")
    x_arr = np.asarray(x, dtype=np.float64)
    out = np.sign(x_arr) * np.maximum(np.abs(x_arr) - nu, 0.0)
    # avoid -0.0 so exact-zero checks and serialisation are stable
    out = out + 0.0
    return float(out) if np.ndim(x) == 0 else out


def soft_threshold_grad(x, nu: float):
    """Subgradient used by the sampler: 1 where ``|x| >= nu`` else 0."""
    if nu < 0:
        raise InvalidArgumentError("threshold must be non-negative")
    out = (np.abs(np.asarray(x, dtype=np.float64)) >= nu).astype(np.float64)
    return float(out) if np.ndim(x) == 0 else out


def _region_index(bases: Sequence[RegionBasis], grid: VoxelGrid | None):
    if grid is not None:
        return [grid.region_indices(b.region) for b in bases]
    # without a grid, regions are laid out contiguously in basis order
    idx, start = [], 0
    for b in bases:
        idx.append(np.arange(start, start + b.size))
        start += b.size
    return idx


def latent_field(bases: Sequence[RegionBasis], theta: Sequence[np.ndarray],
                 grid: VoxelGrid | None = None) -> np.ndarray:
    """Unthresholded surface ``Q_r theta_r`` assembled over all regions."""
    if len(theta) != len(bases):
        raise InvalidArgumentError("need one coefficient vector per region")
    idx = _region_index(bases, grid)
    p = sum(b.size for b in bases)
    out = np.zeros(p)
    for b, th, ix in zip(bases, theta, idx):
        th = np.asarray(th, dtype=np.float64)
        if th.shape != (b.L,):
            raise InvalidArgumentError(
                f"region {b.region}: expected {b.L} coefficients, got {th.shape}")
        out[ix] = b.Q @ th
    return out


def eval_field(bases: Sequence[RegionBasis], theta: Sequence[np.ndarray], nu: float,
               grid: VoxelGrid | None = None) -> np.ndarray:
    """Soft-thresholded field values on the grid."""
    return soft_threshold(latent_field(bases, theta, grid), nu)


@dataclass(frozen=True, eq=False)
class ThresholdedField:
    theta: tuple
    nu: float
    values: np.ndarray
    latent: np.ndarray

    @classmethod
    def build(cls, bases, theta, nu, grid=None) -> "ThresholdedField":
        theta = tuple(np.array(t, dtype=np.float64) for t in theta)
        latent = latent_field(bases, theta, grid)
        return cls(theta, float(nu), soft_threshold(latent, nu), latent)
