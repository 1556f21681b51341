"""Evaluation metrics: uniformity coefficient over surface disks and reconstruction reports."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .geometry import TriangleMesh, point_distances_tree, sample_surface
from .losses import chamfer, chamfer_mean

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.002, 0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass
class NucConfig:
    disk_count: int = 9000
    area_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    rng_seed: int = 0

    def __post_init__(self):
        self.area_fractions = tuple(float(p) for p in self.area_fractions)
        if self.disk_count < 1:
            raise ContractError("disk_count must be >= 1")
        if not all(0.0 < p < 1.0 for p in self.area_fractions):
            raise ContractError("area fractions must lie in (0, 1)")


def nuc_from_counts(counts: Sequence[np.ndarray], expected: Sequence[float]) -> tuple[float, float]:
    """(avg, NUC) from per-object disk counts n_d^k and expected counts p * N^k."""
    ratios = np.concatenate([np.asarray(c, dtype=np.float64) / e for c, e in zip(counts, expected)])
    avg = float(ratios.mean())
    return avg, float(np.sqrt(np.mean((ratios - avg) ** 2)))


def disk_counts(cloud: np.ndarray, centers: np.ndarray, radii: Sequence[float],
                chunk: int = 512) -> np.ndarray:
    """(len(radii), D) number of cloud points within each closed ball."""
    cloud = np.asarray(cloud, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    out = np.zeros((len(radii), len(centers)), dtype=np.int64)
    for s in range(0, len(centers), chunk):
        diff = centers[s:s + chunk, None, :] - cloud[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=-1))
        for r_i, r in enumerate(radii):
            out[r_i, s:s + chunk] = (d <= r).sum(axis=1)
    return out


def nuc(clouds: Sequence[np.ndarray], meshes: Sequence[TriangleMesh],
        cfg: NucConfig | None = None) -> dict[float, tuple[float, float]]:
    """Normalized uniformity coefficient per area fraction p: {p: (avg, nuc)}.

    Disks are Euclidean balls of radius sqrt(p * A / pi) centred at
    area-uniform surface samples.
    """
    cfg = cfg or NucConfig()
    if len(clouds) != len(meshes) or not clouds:
        raise ContractError("need the same non-zero number of clouds and meshes")
    rng = np.random.default_rng(cfg.rng_seed)
    per_p: dict[float, tuple[list, list]] = {p: ([], []) for p in cfg.area_fractions}
    for cloud, mesh in zip(clouds, meshes):
        cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        if len(cloud) == 0:
            raise ContractError("every cloud must be non-empty")
        area = mesh.area
        radii = [math.sqrt(p * area / math.pi) for p in cfg.area_fractions]
        diameter = float(np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
        if max(radii) > diameter:
            log.warning("disk radius %.4g exceeds the bounding diameter %.4g", max(radii), diameter)
        centers = sample_surface(mesh, cfg.disk_count, rng)
        counts = disk_counts(cloud, centers, radii)
        for i, p in enumerate(cfg.area_fractions):
            per_p[p][0].append(counts[i])
            per_p[p][1].append(p * len(cloud))
    return {p: nuc_from_counts(c, e) for p, (c, e) in per_p.items()}


# -- reconstruction report -------------------------------------------------------

@dataclass
class ShapeRow:
    name: str
    points: int
    chamfer: float = float("nan")
    chamfer_mean: float = float("nan")
    distance_mean: float = float("nan")
    distance_std: float = float("nan")
    failed: bool = False


@dataclass
class ReconstructionReport:
    rows: list[ShapeRow] = field(default_factory=list)

    def _ok(self) -> list[ShapeRow]:
        return [r for r in self.rows if not r.failed]

    def summary(self) -> dict[str, float]:
        ok = self._ok()
        def stat(attr, fn):
            vals = np.array([getattr(r, attr) for r in ok])
            return float(fn(vals)) if len(vals) else float("nan")
        d_all = np.array([r.distance_mean for r in ok])
        return {
            "shapes": float(len(self.rows)),
            "failures": float(len(self.rows) - len(ok)),
            "chamfer_mean": stat("chamfer", np.mean),
            "chamfer_std": stat("chamfer", np.std),
            "chamfer_normalized_mean": stat("chamfer_mean", np.mean),
            "chamfer_normalized_std": stat("chamfer_mean", np.std),
            "distance_mean": float(d_all.mean()) if len(d_all) else float("nan"),
            "distance_std": stat("distance_std", np.mean),
            "points_mean": stat("points", np.mean),
            "points_std": stat("points", np.std),
        }

    def kv_text(self) -> str:
        return "".join(f"{k} {v:.9g}\n" for k, v in self.summary().items())

    def table_text(self) -> str:
        head = f"{'shape':<16} {'points':>7} {'chamfer':>12} {'chamfer_norm':>12} {'dist_mean':>11} {'dist_std':>11}"
        lines = [head]
        for r in self.rows:
            if r.failed:
                lines.append(f"{r.name:<16} {r.points:>7} {'FAILED':>12}")
            else:
                lines.append(f"{r.name:<16} {r.points:>7} {r.chamfer:>12.6g} {r.chamfer_mean:>12.6g} "
                             f"{r.distance_mean:>11.6g} {r.distance_std:>11.6g}")
        return "\n".join(lines) + "\n"


def report_row(name: str, generated: np.ndarray, ground_truth: np.ndarray, mesh: TriangleMesh) -> ShapeRow:
    generated = np.asarray(generated, dtype=np.float64).reshape(-1, 3)
    if len(generated) == 0:
        return ShapeRow(name, 0, failed=True)
    d = point_distances_tree(generated, mesh)
    return ShapeRow(name, len(generated), chamfer(generated, ground_truth),
                    0.5 * chamfer_mean(generated, ground_truth), float(d.mean()), float(d.std()))


def eval_reconstruction(generate, shapes: Sequence[tuple[str, TriangleMesh]], passes: int,
                        seed: int = 0, input_points: int = 1024, gt_points: int = 2048) -> ReconstructionReport:
    """Sample an input cloud per shape, regenerate it with ``generate(cloud, passes, seed)``
    and score against a fresh ground-truth sampling and the mesh.

    ``chamfer_mean`` in each row is the average of the two directed mean
    nearest-neighbour distances.
    """
    report = ReconstructionReport()
    for i, (name, mesh) in enumerate(shapes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        cloud = sample_surface(mesh, input_points, rng)
        truth = sample_surface(mesh, gt_points, rng)
        generated = generate(cloud, passes, int(rng.integers(2 ** 31)))
        report.rows.append(report_row(name, generated, truth, mesh))
    return report


def model_generator(params):
    """``generate`` callable for :func:`eval_reconstruction` backed by a trained model."""
    from .model import encode, sample_cloud

    def generate(cloud, passes, seed):
        return sample_cloud(encode(cloud, params).data, params, passes, seed)

    return generate
