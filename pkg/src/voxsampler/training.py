"""Training loop: grouped batches of surface samplings, Adam/SGD updates, checkpoints."""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .geometry import TriangleMesh, rotate_gravity_axis, sample_surface
from .losses import LossWeights, total_loss
from .model import ModelConfig, ModelParams, decode, draw_uv, encode_batch, init_params, sample_offsets
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 44
    samplings_per_surface: int = 4
    input_points: int = 2048
    output_points: int = 2048
    master_seed: int = 0
    optimizer: str = "adam"
    holdout_every: int = 5
    prefetch: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "samplings_per_surface", "input_points", "output_points"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.batch_size % self.samplings_per_surface:
            raise ContractError(
                f"batch_size {self.batch_size} is not divisible by samplings_per_surface "
                f"{self.samplings_per_surface}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    @property
    def surfaces_per_batch(self) -> int:
        return self.batch_size // self.samplings_per_surface


@dataclass
class Shape:
    mesh: TriangleMesh
    label: str = ""
    name: str = ""


@dataclass
class Batch:
    inputs: np.ndarray          # (B, P, 3)
    targets: list[np.ndarray]   # B clouds
    groups: np.ndarray          # (B,) surface group ids
    surfaces: np.ndarray        # (B,) dataset indices
    angles: np.ndarray          # (B,) gravity-axis rotation of each element


def split_holdout(n: int, every: int) -> tuple[list[int], list[int]]:
    """Deterministic split: every ``every``-th shape (1-based) is held out."""
    if every <= 1:
        return list(range(n)), []
    held = [i for i in range(n) if i % every == every - 1]
    train = [i for i in range(n) if i % every != every - 1]
    return train, held


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


def build_batch(dataset: Sequence[Shape], surface_ids: Sequence[int], cfg: TrainConfig, seed) -> Batch:
    """S_b independent (input, target) sampling pairs per surface, one shared rotation per surface."""
    if not dataset:
        raise ContractError("dataset is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    inputs, targets, groups, surfaces, angles = [], [], [], [], []
    for g, sid in enumerate(surface_ids):
        mesh = dataset[sid].mesh
        angle = rng.uniform(0.0, 2.0 * math.pi)
        for _ in range(cfg.samplings_per_surface):
            y_in = sample_surface(mesh, cfg.input_points, rng)
            y_out = sample_surface(mesh, cfg.output_points, rng)
            inputs.append(rotate_gravity_axis(y_in, angle))
            targets.append(rotate_gravity_axis(y_out, angle))
            groups.append(g)
            surfaces.append(sid)
            angles.append(angle)
    return Batch(np.stack(inputs), targets, np.asarray(groups), np.asarray(surfaces), np.asarray(angles))


def epoch_plan(train_ids: Sequence[int], cfg: TrainConfig, epoch: int) -> list[list[int]]:
    """Shuffled surface ids for one epoch, chunked into batches."""
    order = _seed(cfg.master_seed, 1, epoch).permutation(np.asarray(train_ids))
    k = cfg.surfaces_per_batch
    return [order[i:i + k].tolist() for i in range(0, len(order), k)]


def iter_batches(dataset: Sequence[Shape], train_ids: Sequence[int], cfg: TrainConfig,
                 epoch: int) -> Iterator[tuple[int, Batch]]:
    """Batches of one epoch; each batch's RNG is keyed on (seed, epoch, batch index)."""
    plan = epoch_plan(train_ids, cfg, epoch)

    def make(i):
        return build_batch(dataset, plan[i], cfg, _seed(cfg.master_seed, 2, epoch, i))

    if not cfg.prefetch:
        for i in range(len(plan)):
            yield i, make(i)
        return
    q: queue.Queue = queue.Queue(maxsize=2)

    def worker():
        for i in range(len(plan)):
            q.put((i, make(i)))
        q.put(None)

    threading.Thread(target=worker, daemon=True).start()
    while (item := q.get()) is not None:
        yield item


# -- optimizers ----------------------------------------------------------------

class SGD:
    def __init__(self, params: ModelParams, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            p.data = p.data - self.lr * p.grad

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if "adam.t" not in state:
            return
        self.t = int(state["adam.t"][0])
        for k in self.m:
            self.m[k] = np.array(state[f"adam.m.{k}"])
            self.v[k] = np.array(state[f"adam.v.{k}"])


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate)


def optimizer_step(optimizer) -> None:
    optimizer.step()


# -- loop ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    chamfer: float
    bce: float
    consistency: float
    total: float

    def line(self) -> str:
        return (f"epoch {self.epoch} chamfer {self.chamfer:.9g} bce {self.bce:.9g} "
                f"consistency {self.consistency:.9g} total {self.total:.9g}")


def train_step(params: ModelParams, optimizer, batch: Batch, cfg: TrainConfig, seed) -> dict[str, float]:
    """One zero-grad / forward / backward / update cycle; returns raw loss sums."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spec = params.config.grid
    params.zero_grad()
    z = encode_batch(batch.inputs, params)
    desc = decode(z, params)
    offsets = sample_offsets(desc.features, draw_uv(rng, z.shape[0], spec.resolution), params)
    terms = total_loss(desc.occupancy, offsets, z, batch.targets, batch.groups, spec, cfg.weights, rng)
    values = terms.values()
    for key, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {key} loss ({v})")
    try:
        terms.total.backward()
    except NumericError as exc:
        raise NumericError(f"backward through total loss failed: {exc}") from exc
    optimizer.step()
    return values


def train(dataset: Sequence[Shape], cfg: TrainConfig, params: ModelParams | None = None,
          optimizer_state: dict[str, np.ndarray] | None = None, start_epoch: int = 0,
          on_epoch: Callable[[EpochRecord, ModelParams, object], None] | None = None,
          max_steps: int | None = None) -> tuple[ModelParams, list[EpochRecord]]:
    """Train on the non-held-out shapes of ``dataset``; returns params and the learning curve.

    ``on_epoch`` is called after every epoch with (record, params, optimizer),
    which the CLI uses for checkpointing and logging.
    """
    train_ids, _ = split_holdout(len(dataset), cfg.holdout_every)
    if not train_ids:
        raise ContractError("no training shapes after the hold-out split")
    if params is None:
        params = init_params(cfg.model)
    optimizer = make_optimizer(params, cfg)
    if optimizer_state:
        optimizer.load_state(optimizer_state)
    curve: list[EpochRecord] = []
    steps = 0
    for epoch in range(start_epoch, cfg.epochs):
        sums = {"chamfer": 0.0, "bce": 0.0, "consistency": 0.0, "total": 0.0}
        n_elem = 0
        n_groups = 0
        for i, batch in iter_batches(dataset, train_ids, cfg, epoch):
            values = train_step(params, optimizer, batch, cfg, _seed(cfg.master_seed, 3, epoch, i))
            for k in sums:
                sums[k] += values[k]
            n_elem += len(batch.targets)
            n_groups += len(np.unique(batch.groups))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        record = EpochRecord(epoch + 1, sums["chamfer"] / n_elem, sums["bce"] / n_elem,
                             sums["consistency"] / max(n_groups, 1), sums["total"] / n_elem)
        curve.append(record)
        log.info(record.line())
        if on_epoch is not None:
            on_epoch(record, params, optimizer)
        if max_steps is not None and steps >= max_steps:
            break
    return params, curve
