"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Diagnostics go to stderr; data goes to stdout only when ``--out -``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, GeometryError,
                     NumericError, OutOfDomainError, VoxSamplerError)
from .geometry import SHAPE_KINDS, analytic_area, point_to_mesh_distance, procedural_dataset
from .losses import chamfer, chamfer_mean
from .metrics import eval_reconstruction, model_generator, nuc
from .model import encode, interpolate_latents, sample_cloud
from .training import Shape, split_holdout, train

log = logging.getLogger("voxsampler")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(out: str, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        io.atomic_write(out, text)


def _emit_cloud(out: str, points: np.ndarray) -> None:
    if out == "-":
        sys.stdout.write(io.xyz_text(points))
    else:
        io.write_cloud(out, points)


# -- dataset -------------------------------------------------------------------

def write_dataset(out: Path, families: list[str], count: int, seed: int, resolution: int = 24) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    rows, paths = [], []
    counters = {f: 0 for f in families}
    for kind, params, mesh in procedural_dataset(families, count, seed, resolution):
        name = f"{kind}_{counters[kind]:04d}.ply"
        counters[kind] += 1
        io.write_mesh_ply(out / name, mesh)
        paths.append(out / name)
        rows.append(f"{name} {kind} {analytic_area(kind, params)!r} {mesh.area!r}")
    io.atomic_write(out / MANIFEST, "# path family analytic_area mesh_area\n" + "\n".join(rows) + "\n")
    return paths


def read_dataset(directory: Path) -> list[Shape]:
    """Shapes listed in the manifest, or every .ply/.off mesh in sorted order."""
    manifest = directory / MANIFEST
    shapes = []
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split()
            shapes.append(Shape(io.read_mesh(directory / fields[0]), fields[1], fields[0]))
    else:
        for p in sorted(directory.iterdir()):
            if p.suffix.lower() in (".ply", ".off"):
                shapes.append(Shape(io.read_mesh(p), "", p.name))
    if not shapes:
        raise GeometryError(f"{directory}: no meshes found")
    return shapes


def cmd_dataset(args) -> int:
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    unknown = [f for f in families if f not in SHAPE_KINDS]
    if unknown:
        raise UsageError(f"unknown families {unknown}; choose from {SHAPE_KINDS}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    write_dataset(Path(args.out), families, args.count, args.seed, args.resolution)
    return EXIT_OK


# -- training ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = io.read_config(args.config)
    dataset = read_dataset(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, state, start = None, None, 0
    if args.resume:
        ckpt = io.load_checkpoint(args.resume)
        if ckpt.config.model != cfg.model:
            raise ContractError("checkpoint model configuration differs from --config")
        params, state, start = ckpt.params, ckpt.optimizer_state, ckpt.epoch
    curve_path = out / "learning_curve.txt"

    def on_epoch(record, p, optimizer):
        with open(curve_path, "a") as fh:
            fh.write(record.line() + "\n")
        io.save_checkpoint(out / f"epoch_{record.epoch}.nsck", cfg, p, optimizer.state(), record.epoch)

    params, curve = train(dataset, cfg.train, params, state, start, on_epoch)
    _, held = split_holdout(len(dataset), cfg.train.holdout_every)
    if held:
        shapes = [(dataset[i].name or f"shape_{i}", dataset[i].mesh) for i in held]
        report = eval_reconstruction(model_generator(params), shapes, cfg.eval_passes,
                                     cfg.train.master_seed, cfg.eval_input_points)
        io.atomic_write(out / "report.txt", report.table_text())
        io.atomic_write(out / "report.kv", report.kv_text())
    return EXIT_OK


# -- inference -----------------------------------------------------------------

def _read_nonempty_cloud(path) -> np.ndarray:
    cloud = io.read_cloud(path)
    if len(cloud) == 0:
        raise ContractError(f"{path}: input cloud is empty")
    return cloud


def cmd_encode(args) -> int:
    ckpt = io.load_checkpoint(args.ckpt)
    z = encode(_read_nonempty_cloud(args.inp), ckpt.params).data
    _emit(args.out, io.latent_text(z))
    return EXIT_OK


def _check_latent(z: np.ndarray, ckpt, path) -> np.ndarray:
    if z.shape != (ckpt.config.model.latent_dim,):
        raise DimensionError(f"{path}: latent has {z.size} values, checkpoint expects "
                             f"{ckpt.config.model.latent_dim}")
    return z


def cmd_interpolate(args) -> int:
    ckpt = io.load_checkpoint(args.ckpt)
    a = _check_latent(io.read_latent(args.a), ckpt, args.a)
    b = _check_latent(io.read_latent(args.b), ckpt, args.b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, z in enumerate(interpolate_latents(a, b, args.steps)):
        io.write_cloud(out / f"step_{i:03d}.{args.format}", sample_cloud(z, ckpt.params, args.passes, args.seed))
    return EXIT_OK


def cmd_upsample(args) -> int:
    ckpt = io.load_checkpoint(args.ckpt)
    z = encode(_read_nonempty_cloud(args.inp), ckpt.params).data
    _emit_cloud(args.out, sample_cloud(z, ckpt.params, args.passes, args.seed))
    return EXIT_OK


# -- evaluation ----------------------------------------------------------------

def _kv(pairs: dict) -> str:
    return "".join(f"{k} {v:.9g}\n" if isinstance(v, float) else f"{k} {v}\n" for k, v in pairs.items())


def cmd_eval(args) -> int:
    if args.metric == "chamfer":
        x, y = _read_nonempty_cloud(args.a), _read_nonempty_cloud(args.b)
        text = _kv({"chamfer": chamfer(x, y), "chamfer_normalized": 0.5 * chamfer_mean(x, y),
                    "points_a": len(x), "points_b": len(y)})
    elif args.metric == "distance":
        x = _read_nonempty_cloud(args.cloud)
        mean, std = point_to_mesh_distance(x, io.read_mesh(args.mesh))
        text = _kv({"distance_mean": mean, "distance_std": std, "points": len(x)})
    elif args.metric == "nuc":
        if len(args.cloud) != len(args.mesh):
            raise UsageError("--cloud and --mesh must be given the same number of times")
        cfg = io.read_config(args.config).nuc if args.config else io.NucConfig()
        res = nuc([_read_nonempty_cloud(c) for c in args.cloud], [io.read_mesh(m) for m in args.mesh], cfg)
        pairs = {}
        for p, (avg, coeff) in res.items():
            pairs[f"avg_p{p:g}"] = avg
            pairs[f"nuc_p{p:g}"] = coeff
        text = _kv(pairs)
    else:  # reconstruction
        ckpt = io.load_checkpoint(args.ckpt)
        dataset = read_dataset(Path(args.data))
        ids = range(len(dataset)) if args.all else split_holdout(len(dataset), ckpt.config.train.holdout_every)[1]
        shapes = [(dataset[i].name or f"shape_{i}", dataset[i].mesh) for i in ids]
        report = eval_reconstruction(model_generator(ckpt.params), shapes, args.passes, args.seed,
                                     args.input_points)
        text = report.kv_text()
        if args.table:
            io.atomic_write(args.table, report.table_text())
    _emit(args.out, text)
    return EXIT_OK


def cmd_config(args) -> int:
    _emit(args.out, io.serialize_config(io.RunConfig()))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxsampler", description="Voxel-grid point cloud autoencoder and sampler.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="procedural mesh datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = ds_sub.add_parser("gen", help="write random procedural meshes and a manifest")
    gen.add_argument("--out", required=True)
    gen.add_argument("--families", default="sphere,torus,box")
    gen.add_argument("--count", type=int, required=True, help="meshes per family")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--resolution", type=int, default=24, help="tessellation of curved shapes")
    gen.set_defaults(func=cmd_dataset)

    tr = sub.add_parser("train", help="train a model; writes epoch_<k>.nsck checkpoints")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume")
    tr.set_defaults(func=cmd_train)

    enc = sub.add_parser("encode", help="encode a cloud to a latent text file")
    enc.add_argument("--ckpt", required=True)
    enc.add_argument("--in", dest="inp", required=True)
    enc.add_argument("--out", required=True)
    enc.set_defaults(func=cmd_encode)

    it = sub.add_parser("interpolate", help="decode latents linearly spaced between two codes")
    it.add_argument("--ckpt", required=True)
    it.add_argument("--a", required=True)
    it.add_argument("--b", required=True)
    it.add_argument("--steps", type=int, required=True)
    it.add_argument("--out", required=True)
    it.add_argument("--passes", type=int, default=1)
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--format", choices=("ply", "xyz"), default="ply")
    it.set_defaults(func=cmd_interpolate)

    up = sub.add_parser("upsample", help="encode a cloud and draw several sampling passes")
    up.add_argument("--ckpt", required=True)
    up.add_argument("--in", dest="inp", required=True)
    up.add_argument("--passes", type=int, default=4)
    up.add_argument("--seed", type=int, default=0)
    up.add_argument("--out", required=True)
    up.set_defaults(func=cmd_upsample)

    ev = sub.add_parser("eval", help="metrics reports as 'key value' lines")
    ev_sub = ev.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    ch = ev_sub.add_parser("chamfer", help="symmetric Chamfer between two clouds")
    ch.add_argument("--a", required=True)
    ch.add_argument("--b", required=True)
    ch.add_argument("--out", required=True)
    di = ev_sub.add_parser("distance", help="point-to-mesh distance statistics")
    di.add_argument("--cloud", required=True)
    di.add_argument("--mesh", required=True)
    di.add_argument("--out", required=True)
    nu = ev_sub.add_parser("nuc", help="normalized uniformity coefficient")
    nu.add_argument("--cloud", action="append", required=True)
    nu.add_argument("--mesh", action="append", required=True)
    nu.add_argument("--config", help="run config supplying the nuc_* settings")
    nu.add_argument("--out", required=True)
    rc = ev_sub.add_parser("reconstruction", help="held-out reconstruction report for a checkpoint")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--data", required=True)
    rc.add_argument("--passes", type=int, default=4)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--input-points", type=int, default=1024)
    rc.add_argument("--all", action="store_true", help="evaluate every shape, not only the hold-out")
    rc.add_argument("--table", help="also write the per-shape table here")
    rc.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    cf = sub.add_parser("config", help="print the default run configuration")
    cf.add_argument("--out", default="-")
    cf.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ContractError, DimensionError, GeometryError,
            OutOfDomainError, VoxSamplerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
