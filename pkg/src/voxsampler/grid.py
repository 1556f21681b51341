"""Voxel-grid parameterization of point clouds.

A cloud is described by a per-voxel occupancy probability ``o_n`` and a
per-voxel offset ``delta_n`` (in cell units, within [-1/2, 1/2]^3). A
realization draws a Bernoulli topology ``t_n ~ Bernoulli(o_n)`` and places
one point at ``center_n + delta_n * cell_edge`` in every voxel with
``t_n = 1``.

Flat voxel indices follow C order over (i, j, k), i.e. x-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, OutOfDomainError


@dataclass(frozen=True)
class GridSpec:
    resolution: int = 8
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.resolution < 2:
            raise ContractError("grid resolution must be >= 2")
        if not self.hi > self.lo:
            raise ContractError("grid domain must have positive edge")

    @property
    def cell_edge(self) -> float:
        return (self.hi - self.lo) / self.resolution

    @property
    def n_cells(self) -> int:
        return self.resolution ** 3

    def centers(self) -> np.ndarray:
        """(N^3, 3) cell centers in flat-index order."""
        n = self.resolution
        axis = self.lo + (np.arange(n) + 0.5) * self.cell_edge
        ii, jj, kk = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)

    def voxel_center(self, index) -> np.ndarray:
        return self.lo + (np.asarray(index, dtype=np.float64) + 0.5) * self.cell_edge


def voxel_of(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Integer voxel indices (..., 3) of points (..., 3); the max face clamps into the last cell."""
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] != 3:
        raise DimensionError(f"points must have a trailing axis of 3, got {p.shape}")
    if not np.isfinite(p).all() or np.any(p < spec.lo) or np.any(p > spec.hi):
        raise OutOfDomainError(f"point outside the grid domain [{spec.lo}, {spec.hi}]^3")
    idx = np.floor((p - spec.lo) / spec.cell_edge).astype(np.int64)
    return np.clip(idx, 0, spec.resolution - 1)


def flat_index(voxels: np.ndarray, spec: GridSpec) -> np.ndarray:
    n = spec.resolution
    v = np.asarray(voxels)
    return (v[..., 0] * n + v[..., 1]) * n + v[..., 2]


def voxelize(cloud: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Binary (N, N, N) topology: 1 where at least one point falls in the voxel."""
    n = spec.resolution
    t = np.zeros(n ** 3, dtype=np.int8)
    t[flat_index(voxel_of(np.asarray(cloud).reshape(-1, 3), spec), spec)] = 1
    return t.reshape(n, n, n)


def topology_probability(occupancy: np.ndarray, topology: np.ndarray) -> tuple[float, float]:
    """Probability and log-probability of an exact topology under independent Bernoullis."""
    o = np.asarray(occupancy, dtype=np.float64)
    t = np.asarray(topology)
    if o.size != t.size:
        raise DimensionError(f"occupancy has {o.size} voxels but topology has {t.size}")
    o = o.reshape(-1)
    t = t.reshape(-1).astype(bool)
    mass = np.where(t, o, 1.0 - o)
    with np.errstate(divide="ignore"):
        logp = float(np.log(mass).sum())
    return float(np.exp(logp)), logp


def sample_topology(occupancy: np.ndarray, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Independent Bernoulli draw per voxel; same shape as ``occupancy``."""
    o = np.asarray(occupancy, dtype=np.float64)
    if np.any(o < 0) or np.any(o > 1):
        raise ContractError("occupancy values must lie in [0, 1]")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return (rng.random(o.shape) < o).astype(np.int8)


def realize_points(topology: np.ndarray, offsets: np.ndarray, spec: GridSpec) -> np.ndarray:
    """One point per occupied voxel at ``center + offset * cell_edge``.

    ``offsets`` has shape (3, N, N, N) in cell units. Points are emitted in
    flat voxel order.
    """
    n = spec.resolution
    t = np.asarray(topology).reshape(-1).astype(bool)
    d = np.asarray(offsets, dtype=np.float64)
    if t.size != n ** 3 or d.shape != (3, n, n, n):
        raise DimensionError(f"topology {np.shape(topology)} / offsets {d.shape} do not match N={n}")
    if np.any(np.abs(d) > 0.5):
        raise ContractError("offsets must lie within [-1/2, 1/2] cell units")
    flat_offsets = d.reshape(3, -1).T
    return spec.centers()[t] + flat_offsets[t] * spec.cell_edge
