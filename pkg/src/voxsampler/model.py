"""Grid-pooling encoder, transposed-convolution decoder and the (u, v) sampling layer.

All network ops run batched over a leading axis B. Parameters live in a
flat name -> Tensor mapping whose prefixes (``encoder.``, ``decoder.``,
``sampler.``) identify the sub-network.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .grid import GridSpec, flat_index, realize_points, sample_topology, voxel_of
from .tensor import Tensor

SUBNETWORKS = ("encoder", "decoder", "sampler", "decoder_total", "all")


@dataclass
class ModelConfig:
    resolution: int = 16
    latent_dim: int = 512
    point_widths: tuple[int, ...] = (64, 128)
    channels: int = 128
    down_levels: int = 1
    feature_channels: int = 32
    sampler_hidden: int = 64
    init_seed: int = 0
    domain_lo: float = -1.0
    domain_hi: float = 1.0

    def __post_init__(self):
        self.point_widths = tuple(int(w) for w in self.point_widths)
        if self.resolution % (2 ** self.down_levels):
            raise ContractError(
                f"resolution {self.resolution} is not divisible by 2^{self.down_levels}")
        if self.latent_dim < 1 or self.channels < 1 or not self.point_widths:
            raise ContractError("model widths must be positive")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.resolution, self.domain_lo, self.domain_hi)

    @property
    def bottleneck(self) -> int:
        return self.resolution // 2 ** self.down_levels

    @classmethod
    def reference(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small configuration used for tests and CPU training runs."""
        return cls(resolution=8, latent_dim=64, point_widths=(32, 32), channels=16,
                   down_levels=1, feature_channels=16, sampler_hidden=32)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_widths"] = list(self.point_widths)
        return d


class ModelParams:
    """Named learnable tensors plus the architecture that produced them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        T.zero_grads(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                         for k, v in self.tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in canonical order."""
    c = cfg.channels
    out: list[tuple[str, tuple[int, ...], int]] = []

    def res_block(prefix):
        out.extend([(f"{prefix}.conv1.w", (c, c, 3, 3, 3), c * 27), (f"{prefix}.conv1.b", (c,), 0),
                    (f"{prefix}.conv2.w", (c, c, 3, 3, 3), c * 27), (f"{prefix}.conv2.b", (c,), 0)])

    prev = 3
    for i, w in enumerate(cfg.point_widths):
        out += [(f"encoder.point{i}.w", (prev, w), prev), (f"encoder.point{i}.b", (w,), 0)]
        prev = w
    if prev != c:
        out += [("encoder.proj.w", (c, prev, 1, 1, 1), prev), ("encoder.proj.b", (c,), 0)]
    res_block("encoder.res0")
    for lvl in range(cfg.down_levels):
        out += [(f"encoder.down{lvl}.w", (c, c, 2, 2, 2), c * 8), (f"encoder.down{lvl}.b", (c,), 0)]
        res_block(f"encoder.res{lvl + 1}")
    flat = c * cfg.bottleneck ** 3
    out += [("encoder.latent.w", (flat, cfg.latent_dim), flat), ("encoder.latent.b", (cfg.latent_dim,), 0)]

    out += [("decoder.expand.w", (cfg.latent_dim, flat), cfg.latent_dim), ("decoder.expand.b", (flat,), 0)]
    for lvl in reversed(range(cfg.down_levels)):
        res_block(f"decoder.res{lvl + 1}")
        out += [(f"decoder.up{lvl}.w", (c, c, 2, 2, 2), c), (f"decoder.up{lvl}.b", (c,), 0)]
    res_block("decoder.res0")
    out += [("decoder.occupancy.w", (1, c, 1, 1, 1), c), ("decoder.occupancy.b", (1,), 0),
            ("decoder.features.w", (cfg.feature_channels, c, 1, 1, 1), c),
            ("decoder.features.b", (cfg.feature_channels,), 0)]

    fin = cfg.feature_channels + 2
    out += [("sampler.hidden.w", (cfg.sampler_hidden, fin, 1, 1, 1), fin),
            ("sampler.hidden.b", (cfg.sampler_hidden,), 0),
            ("sampler.offset.w", (3, cfg.sampler_hidden, 1, 1, 1), cfg.sampler_hidden),
            ("sampler.offset.b", (3,), 0)]
    return out


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    tensors = {}
    for name, shape, fan_in in _shapes(config):
        if fan_in:
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def parameter_count(params: ModelParams, subnetwork: str = "all") -> int:
    """Number of learnable scalars in ``encoder``, ``decoder``, ``sampler``,
    ``decoder_total`` (decoder + sampler) or ``all``."""
    if subnetwork not in SUBNETWORKS:
        raise ContractError(f"unknown subnetwork {subnetwork!r}; expected one of {SUBNETWORKS}")
    if subnetwork == "all":
        prefixes: tuple[str, ...] = ("",)
    elif subnetwork == "decoder_total":
        prefixes = ("decoder.", "sampler.")
    else:
        prefixes = (subnetwork + ".",)
    return sum(t.size for name, t in params.items() if name.startswith(prefixes))


# -- building blocks -----------------------------------------------------------

def _bias(x: Tensor, b: Tensor) -> Tensor:
    return x + b.reshape(1, -1, 1, 1, 1)


def _conv(x: Tensor, params: ModelParams, prefix: str, stride: int = 1, padding: int = 0) -> Tensor:
    return _bias(T.conv3d(x, params[prefix + ".w"], stride, padding), params[prefix + ".b"])


def _res_block(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = _conv(T.relu(x), params, prefix + ".conv1", padding=1)
    h = _conv(T.relu(h), params, prefix + ".conv2", padding=1)
    return x + h


# -- encoder -------------------------------------------------------------------

def _as_batch(clouds) -> np.ndarray:
    if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
        clouds = clouds[None]
    arr = np.asarray(clouds, dtype=np.float64) if not isinstance(clouds, np.ndarray) else clouds
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DimensionError(f"expected clouds of shape (B, P, 3), got {arr.shape}")
    if arr.shape[1] == 0:
        raise ContractError("cannot encode an empty cloud")
    return arr


def pooled_features(clouds, params: ModelParams) -> Tensor:
    """Per-point feature stack followed by grid max-pooling: (B, C, N, N, N)."""
    cfg = params.config
    pts = _as_batch(clouds)
    spec = cfg.grid
    cells = flat_index(voxel_of(pts, spec), spec)
    h = Tensor(pts)
    for i in range(len(cfg.point_widths)):
        h = T.relu(T.linear(h, params[f"encoder.point{i}.w"], params[f"encoder.point{i}.b"]))
    pooled = T.grid_max_pool(h, cells, spec.n_cells)
    n = cfg.resolution
    return pooled.reshape(pts.shape[0], -1, n, n, n)


def encode_pooled(pooled: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    h = pooled
    if "encoder.proj.w" in params.tensors:
        h = _conv(h, params, "encoder.proj")
    h = _res_block(h, params, "encoder.res0")
    for lvl in range(cfg.down_levels):
        h = _conv(h, params, f"encoder.down{lvl}", stride=2)
        h = _res_block(h, params, f"encoder.res{lvl + 1}")
    flat = T.relu(h).reshape(h.shape[0], -1)
    return T.linear(flat, params["encoder.latent.w"], params["encoder.latent.b"])


def encode_batch(clouds, params: ModelParams) -> Tensor:
    """Latent codes (B, latent_dim) for a batch of equally sized clouds (B, P, 3)."""
    return encode_pooled(pooled_features(clouds, params), params)


def encode(cloud: np.ndarray, params: ModelParams) -> Tensor:
    """Latent code (latent_dim,) of one cloud (P, 3); independent of point order and multiplicity."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise DimensionError(f"expected a (P, 3) cloud, got {cloud.shape}")
    return encode_batch(cloud[None], params)[0]


# -- decoder -------------------------------------------------------------------

@dataclass
class SurfaceDescriptor:
    """Decoder output. occupancy: (B, 1, N, N, N) in (0, 1); features: (B, C_F, N, N, N)."""
    occupancy: Tensor
    features: Tensor


def decode(z: Tensor, params: ModelParams) -> SurfaceDescriptor:
    cfg = params.config
    z = T.as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if z.shape[1] != cfg.latent_dim:
        raise DimensionError(f"latent has {z.shape[1]} entries, model expects {cfg.latent_dim}")
    m = cfg.bottleneck
    h = T.linear(z, params["decoder.expand.w"], params["decoder.expand.b"])
    h = h.reshape(z.shape[0], cfg.channels, m, m, m)
    for lvl in reversed(range(cfg.down_levels)):
        h = _res_block(h, params, f"decoder.res{lvl + 1}")
        h = _bias(T.conv3d_transposed(h, params[f"decoder.up{lvl}.w"], stride=2), params[f"decoder.up{lvl}.b"])
    h = T.relu(_res_block(h, params, "decoder.res0"))
    occupancy = T.sigmoid(_conv(h, params, "decoder.occupancy"))
    features = _conv(h, params, "decoder.features")
    return SurfaceDescriptor(occupancy, features)


def sample_offsets(features: Tensor, uv, params: ModelParams) -> Tensor:
    """Offsets (B, 3, N, N, N) in cell units from features and per-voxel (u, v) in [0, 1]^2."""
    features = T.as_tensor(features)
    uv = T.as_tensor(uv)
    if uv.ndim == 4:
        uv = uv.reshape((1,) + uv.shape)
    b = features.shape[0]
    if uv.shape != (b, 2) + features.shape[2:]:
        raise DimensionError(f"uv shape {uv.shape} does not match features {features.shape}")
    if np.any(uv.data < 0) or np.any(uv.data > 1):
        raise ContractError("sampling coordinates must lie in [0, 1]")
    h = T.concat([features, uv], axis=1)
    h = T.relu(_conv(h, params, "sampler.hidden"))
    return T.tanh(_conv(h, params, "sampler.offset")) * 0.5


def draw_uv(rng: np.random.Generator, batch: int, resolution: int) -> np.ndarray:
    return rng.random((batch, 2, resolution, resolution, resolution))


def sample_passes(occupancy: np.ndarray, offsets_for: Callable[[np.ndarray], np.ndarray],
                  spec: GridSpec, passes: int, rng: np.random.Generator) -> np.ndarray:
    """Repeat topology + (u, v) draws over a fixed occupancy field.

    ``offsets_for(uv)`` maps a (2, N, N, N) draw to a (3, N, N, N) offset field.
    """
    if passes < 1:
        raise ContractError("passes must be >= 1")
    n = spec.resolution
    occ = np.asarray(occupancy, dtype=np.float64).reshape(n, n, n)
    chunks = []
    for _ in range(passes):
        topo = sample_topology(occ, rng)
        uv = draw_uv(rng, 1, n)[0]
        chunks.append(realize_points(topo, offsets_for(uv), spec))
    return np.concatenate(chunks, axis=0)


def sample_cloud(z, params: ModelParams, passes: int = 1, rng_seed: int = 0) -> np.ndarray:
    """Decode once, then draw ``passes`` independent realizations and concatenate them."""
    if passes < 1:
        raise ContractError("passes must be >= 1")
    rng = np.random.default_rng(rng_seed)
    with T.no_grad():
        desc = decode(T.as_tensor(z), params)
        feats = desc.features[0:1]

        def offsets_for(uv):
            return sample_offsets(feats, uv, params).data[0]

        return sample_passes(desc.occupancy.data[0, 0], offsets_for, params.config.grid, passes, rng)


def interpolate_latents(a: np.ndarray, b: np.ndarray, steps: int) -> list[np.ndarray]:
    """Latents at weights linearly spaced over [0, 1] from ``a`` to ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    weights = np.linspace(0.0, 1.0, steps) if steps > 1 else np.array([0.0])
    return [(1.0 - w) * a + w * b for w in weights]
