"""Training objectives: Chamfer terms, occupancy cross entropy, latent consistency.

Chamfer distances use plain (non-squared) Euclidean norms summed over points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import ContractError, DimensionError
from .grid import GridSpec, sample_topology, voxelize
from .tensor import Tensor

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    chamfer: float = 1.0
    bce: float = 1.0
    consistency: float = 0.1

    def __post_init__(self):
        if min(self.chamfer, self.bce, self.consistency) < 0:
            raise ContractError("loss weights must be non-negative")


# -- nearest neighbours ------------------------------------------------------

def nearest_brute(queries: np.ndarray, targets: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest target for every query: (distances, indices)."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    dist = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.intp)
    for s in range(0, len(q), chunk):
        diff = q[s:s + chunk, None, :] - t[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=-1))
        j = d.argmin(axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = d[np.arange(len(j)), j]
    return dist, idx


def nearest(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of the nearest target for every query (KD-tree; distances equal the exhaustive scan)."""
    _, idx = cKDTree(np.asarray(targets, dtype=np.float64)).query(np.asarray(queries, dtype=np.float64))
    return np.asarray(idx, dtype=np.intp)


def _check_cloud(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ContractError(f"{what} must be non-empty")
    return x


def chamfer(x: np.ndarray, y: np.ndarray) -> float:
    """Sum of nearest-neighbour distances in both directions (cardinalities may differ)."""
    x = _check_cloud(x, "first cloud")
    y = _check_cloud(y, "second cloud")
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(dxy.sum() + dyx.sum())


def chamfer_mean(x: np.ndarray, y: np.ndarray) -> float:
    """Cardinality-normalized Chamfer: mean distance X->Y plus mean distance Y->X."""
    x = _check_cloud(x, "first cloud")
    y = _check_cloud(y, "second cloud")
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(dxy.mean() + dyx.mean())


def nn_distance(points: Tensor, targets: np.ndarray | Tensor) -> Tensor:
    """Per-row distance from ``points`` (M, 3) to the nearest of ``targets`` (K, 3).

    The neighbour choice is a fixed selection; gradients flow through the
    selected difference vectors into whichever side requires them.
    """
    points = T.as_tensor(points)
    targets = T.as_tensor(targets)
    idx = nearest(points.data, targets.data)
    return T.row_norm(points - T.take_rows(targets, idx))


def candidate_points(offsets: Tensor, spec: GridSpec) -> Tensor:
    """All N^3 candidate positions (N^3, 3) for one offset field (3, N, N, N)."""
    flat = offsets.reshape(3, -1).transpose(1, 0)
    return flat * spec.cell_edge + spec.centers()


def expected_chamfer_term1(occupancy: Tensor, offsets: Tensor, target: np.ndarray, spec: GridSpec) -> Tensor:
    """sum_n o_n * min_y |x_n - y| over every candidate voxel; exact expectation of d(X|Y) over topologies.

    occupancy: (N, N, N) or (1, N, N, N); offsets: (3, N, N, N).
    """
    target = _check_cloud(target, "target cloud")
    occupancy = T.as_tensor(occupancy)
    offsets = T.as_tensor(offsets)
    if occupancy.size != spec.n_cells:
        raise DimensionError(f"occupancy has {occupancy.size} voxels, grid has {spec.n_cells}")
    d = nn_distance(candidate_points(offsets, spec), target)
    return (occupancy.reshape(-1) * d).sum()


def draw_nonempty_topology(occupancy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flat boolean topology. An empty draw is redrawn once; if still empty the
    highest-occupancy voxel (lowest flat index on ties) is forced on."""
    occ = np.asarray(occupancy, dtype=np.float64).reshape(-1)
    topo = sample_topology(occ, rng).astype(bool)
    if not topo.any():
        topo = sample_topology(occ, rng).astype(bool)
        if not topo.any():
            topo[int(np.argmax(occ))] = True
    return topo


def sampled_chamfer_term2(occupancy: Tensor, offsets: Tensor, target: np.ndarray, spec: GridSpec,
                          rng_seed: int | np.random.Generator) -> Tensor:
    """sum_y min_x |x - y| over one random realization X(T*, offsets).

    The topology draw is not differentiated; gradients reach the offsets only.
    """
    target = _check_cloud(target, "target cloud")
    occupancy = T.as_tensor(occupancy)
    offsets = T.as_tensor(offsets)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    topo = draw_nonempty_topology(occupancy.data, rng)
    realized = T.take_rows(candidate_points(offsets, spec), np.flatnonzero(topo))
    return nn_distance(Tensor(target), realized).sum()


def bce_occupancy(occupancy: Tensor, topology: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Binary cross entropy summed over voxels, with o clamped to [eps, 1 - eps]."""
    occupancy = T.as_tensor(occupancy)
    t = np.asarray(topology, dtype=np.float64)
    if t.size != occupancy.size:
        raise DimensionError(f"topology has {t.size} voxels, occupancy has {occupancy.size}")
    t = t.reshape(occupancy.shape)
    o = T.clip(occupancy, eps, 1.0 - eps)
    return -(t * T.log(o) + (1.0 - t) * T.log(1.0 - o)).sum()


def consistency_loss(latents) -> Tensor:
    """sum_b |z_b - mean(z)|^2 over a group of latents, given as (B, D) tensor or list of (D,)."""
    if isinstance(latents, (list, tuple)):
        if len(latents) < 2:
            raise ContractError("consistency loss needs at least two latents")
        dims = {T.as_tensor(z).shape for z in latents}
        if len(dims) != 1:
            raise DimensionError(f"latents differ in shape: {dims}")
        z = T.stack(list(latents), axis=0)
    else:
        z = T.as_tensor(latents)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"consistency loss needs a (B >= 2, D) group, got {z.shape}")
    centered = z - z.mean(axis=0, keepdims=True)
    return T.square(centered).sum()


@dataclass
class LossTerms:
    chamfer: Tensor
    bce: Tensor
    consistency: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("chamfer", "bce", "consistency", "total")}


def total_loss(occupancy: Tensor, offsets: Tensor, latents: Tensor, targets, groups, spec: GridSpec,
               weights: LossWeights, rng_seed: int | np.random.Generator) -> LossTerms:
    """Weighted sum of reconstruction, occupancy and consistency terms over a batch.

    occupancy: (B, 1, N, N, N); offsets: (B, 3, N, N, N); latents: (B, D);
    targets: B target clouds; groups: B integer group labels. Per-element
    terms are summed in batch order; consistency is summed over groups with
    at least two members.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    b = occupancy.shape[0]
    if len(targets) != b or offsets.shape[0] != b or len(groups) != b:
        raise DimensionError("batch sizes of occupancy, offsets, targets and groups differ")
    zero = Tensor(0.0)
    cham = zero
    bce = zero
    for i in range(b):
        o_i = occupancy[i]
        d_i = offsets[i]
        if weights.chamfer:
            cham = cham + expected_chamfer_term1(o_i, d_i, targets[i], spec) \
                + sampled_chamfer_term2(o_i, d_i, targets[i], spec, rng)
        if weights.bce:
            bce = bce + bce_occupancy(o_i, voxelize(targets[i], spec))
    cons = zero
    if weights.consistency:
        groups = np.asarray(groups)
        for g in np.unique(groups):
            members = np.flatnonzero(groups == g)
            if len(members) >= 2:
                cons = cons + consistency_loss(T.take_rows(latents, members))
    total = weights.chamfer * cham + weights.bce * bce + weights.consistency * cons
    return LossTerms(cham, bce, cons, total)
