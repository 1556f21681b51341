"""On-disk formats: ASCII PLY / OFF meshes, PLY / XYZ clouds, latents, checkpoints, run configs.

Checkpoint layout (all integers little-endian)::

    b"NSCK" | u32 version | u32 len + UTF-8 config text | u32 tensor count |
    per tensor: u32 len + UTF-8 name | u32 rank | rank x u64 extents | raw f64 data
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, GeometryError
from .geometry import TriangleMesh
from .losses import LossWeights
from .metrics import NucConfig
from .model import ModelConfig, ModelParams
from .tensor import Tensor
from .training import TrainConfig

MAGIC = b"NSCK"
CHECKPOINT_VERSION = 1


# -- atomic writes -------------------------------------------------------------

def atomic_write(path: str | os.PathLike, payload: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- meshes and clouds ---------------------------------------------------------

def _fmt(values: Iterable[float]) -> str:
    return " ".join(f"{v:.9g}" for v in values)


def ply_text(points: np.ndarray, triangles: np.ndarray | None = None) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z"]
    if triangles is not None:
        lines += [f"element face {len(triangles)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [_fmt(p) for p in pts]
    if triangles is not None:
        lines += ["3 " + " ".join(str(int(i)) for i in t) for t in np.asarray(triangles)]
    return "\n".join(lines) + "\n"


def write_mesh_ply(path, mesh: TriangleMesh) -> None:
    atomic_write(path, ply_text(mesh.vertices, mesh.triangles))


def write_cloud_ply(path, points: np.ndarray) -> None:
    atomic_write(path, ply_text(points))


def xyz_text(points: np.ndarray) -> str:
    return "".join(_fmt(p) + "\n" for p in np.asarray(points, dtype=np.float64).reshape(-1, 3))


def write_xyz(path, points: np.ndarray) -> None:
    atomic_write(path, xyz_text(points))


def _read_ply(lines: list[str], path) -> tuple[np.ndarray, np.ndarray | None]:
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}: missing 'ply' magic line")
    n_vert = n_face = 0
    vert_props = 0
    current = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise GeometryError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            vert_props += 1
        elif tok[0] == "end_header":
            break
    else:
        raise GeometryError(f"{path}: missing end_header")
    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise GeometryError(f"{path}: expected {n_vert} vertices and {n_face} faces")
    try:
        verts = np.array([[float(x) for x in body[r].split()[:3]] for r in range(n_vert)]).reshape(-1, 3)
        faces = []
        for r in range(n_vert, n_vert + n_face):
            tok = body[r].split()
            k = int(tok[0])
            idx = [int(x) for x in tok[1:1 + k]]
            faces += [(idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1)]
    except (ValueError, IndexError) as exc:
        raise GeometryError(f"{path}: malformed PLY body ({exc})") from exc
    return verts, (np.array(faces, dtype=np.int64) if n_face else None)


def _read_off(lines: list[str], path) -> tuple[np.ndarray, np.ndarray]:
    tokens = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise GeometryError(f"{path}: missing OFF header")
    head = tokens[0][3:].split()
    rest = tokens[1:]
    if not head:
        head, rest = rest[0].split(), rest[1:]
    try:
        n_vert, n_face = int(head[0]), int(head[1])
        verts = np.array([[float(x) for x in rest[r].split()[:3]] for r in range(n_vert)]).reshape(-1, 3)
        faces = []
        for r in range(n_vert, n_vert + n_face):
            tok = rest[r].split()
            k = int(tok[0])
            idx = [int(x) for x in tok[1:1 + k]]
            faces += [(idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1)]
    except (ValueError, IndexError) as exc:
        raise GeometryError(f"{path}: malformed OFF body ({exc})") from exc
    return verts, np.array(faces, dtype=np.int64)


def read_mesh(path) -> TriangleMesh:
    """ASCII PLY or OFF triangle mesh (polygons are fan-triangulated)."""
    lines = Path(path).read_text().splitlines()
    first = lines[0].strip() if lines else ""
    if first.startswith("OFF"):
        verts, faces = _read_off(lines, path)
    else:
        verts, faces = _read_ply(lines, path)
        if faces is None:
            raise GeometryError(f"{path}: PLY file has no faces")
    return TriangleMesh(verts, faces)


def read_cloud(path) -> np.ndarray:
    """Points from an ASCII PLY (vertices only) or whitespace-separated XYZ file."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if lines and lines[0].strip() == "ply":
        verts, _ = _read_ply(lines, path)
        return verts
    rows = [ln.split() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        pts = np.array([[float(x) for x in r[:3]] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise GeometryError(f"{path}: malformed XYZ line ({exc})") from exc
    if pts.size and pts.shape[1] != 3:
        raise GeometryError(f"{path}: every XYZ line needs three coordinates")
    return pts.reshape(-1, 3)


def write_cloud(path, points: np.ndarray) -> None:
    if str(path).lower().endswith(".ply"):
        write_cloud_ply(path, points)
    else:
        write_xyz(path, points)


def latent_text(z: np.ndarray) -> str:
    return "".join(f"{v!r}\n" for v in np.asarray(z, dtype=np.float64).reshape(-1).tolist())


def write_latent(path, z: np.ndarray) -> None:
    atomic_write(path, latent_text(z))


def read_latent(path) -> np.ndarray:
    try:
        return np.array([float(ln) for ln in Path(path).read_text().split()], dtype=np.float64)
    except ValueError as exc:
        raise ContractError(f"{path}: latent file must hold one float per line") from exc


# -- run configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of a run, serialized as ``key = value`` lines."""
    train: TrainConfig = field(default_factory=TrainConfig)
    nuc: NucConfig = field(default_factory=NucConfig)
    eval_passes: int = 4
    eval_input_points: int = 1024

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    @property
    def weights(self) -> LossWeights:
        return self.train.weights


# key -> (section, attribute)
_KEYS: dict[str, tuple[str, str]] = {}
for _f in dataclasses.fields(ModelConfig):
    _KEYS[_f.name] = ("model", _f.name)
for _f in dataclasses.fields(TrainConfig):
    if _f.name not in ("weights", "model"):
        _KEYS[_f.name] = ("train", _f.name)
for _f in dataclasses.fields(LossWeights):
    _KEYS[f"w_{_f.name}"] = ("weights", _f.name)
for _f in dataclasses.fields(NucConfig):
    _KEYS[f"nuc_{_f.name}"] = ("nuc", _f.name)
_KEYS["eval_passes"] = ("run", "eval_passes")
_KEYS["eval_input_points"] = ("run", "eval_input_points")


def _sections(cfg: RunConfig) -> dict:
    return {"model": cfg.train.model, "train": cfg.train, "weights": cfg.train.weights,
            "nuc": cfg.nuc, "run": cfg}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    sec = _sections(cfg)
    lines = [f"{key} = {_format_value(getattr(sec[s], attr))}" for key, (s, attr) in _KEYS.items()]
    return "\n".join(lines) + "\n"


def _coerce(template, text: str):
    if isinstance(template, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return low == "true"
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        kind = type(template[0]) if template else float
        return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
    return text


def parse_config(text: str) -> RunConfig:
    """Inverse of :func:`serialize_config`; unknown keys and bad values name the line."""
    values: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError("unknown key", line=lineno, key=key)
        values[key] = (lineno, value)
    defaults = RunConfig()
    dsec = _sections(defaults)
    parsed: dict[str, dict] = {s: {} for s in ("model", "train", "weights", "nuc", "run")}
    for key, (lineno, value) in values.items():
        s, attr = _KEYS[key]
        try:
            parsed[s][attr] = _coerce(getattr(dsec[s], attr), value)
        except ValueError as exc:
            raise ConfigError(str(exc), line=lineno, key=key) from exc
    try:
        model = dataclasses.replace(defaults.train.model, **parsed["model"])
        weights = dataclasses.replace(defaults.train.weights, **parsed["weights"])
        train = dataclasses.replace(defaults.train, model=model, weights=weights, **parsed["train"])
        nuc = dataclasses.replace(defaults.nuc, **parsed["nuc"])
        return RunConfig(train=train, nuc=nuc, **parsed["run"])
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def read_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def write_config(path, cfg: RunConfig) -> None:
    atomic_write(path, serialize_config(cfg))


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    blob = config_text.encode("utf-8")
    out += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        out += [struct.pack("<Q", int(e)) for e in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def parse_checkpoint(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    config_text = bytes(take(clen)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes after tensor table")
    return config_text, tensors


@dataclass
class Checkpoint:
    config: RunConfig
    params: ModelParams
    optimizer_state: dict[str, np.ndarray]
    epoch: int


def save_checkpoint(path, cfg: RunConfig, params: ModelParams, optimizer_state: dict | None = None,
                    epoch: int = 0) -> None:
    tensors = {name: t.data for name, t in params.items()}
    for k, v in (optimizer_state or {}).items():
        tensors[f"state.{k}"] = v
    tensors["meta.epoch"] = np.array([float(epoch)])
    atomic_write(path, checkpoint_bytes(serialize_config(cfg), tensors))


def load_checkpoint(path) -> Checkpoint:
    text, tensors = parse_checkpoint(Path(path).read_bytes())
    cfg = parse_config(text)
    model_t = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()
               if k.split(".", 1)[0] in ("encoder", "decoder", "sampler")}
    state = {k[len("state."):]: v for k, v in tensors.items() if k.startswith("state.")}
    epoch = int(tensors["meta.epoch"][0]) if "meta.epoch" in tensors else 0
    return Checkpoint(cfg, ModelParams(cfg.model, model_t), state, epoch)
