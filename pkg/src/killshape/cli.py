"""Command-line entry point: ``killshape <subcommand> [flags]``.

Exit status is 0 on success, 1 on usage errors (bad flags, bad config
file, bad KILLSHAPE_THREADS) and 2 when a run fails.
Settings are layered: command-line flags override the ``--config`` file,
which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .diffnet import DTYPE, MlpConfig
from .exceptions import ConfigError, KillShapeError
from .geometry import ToySpec, generate_toy, read_cloud, write_ply, write_xyz
from .losses import LossWeights, Schedule
from .shapespace import interpolate
from .training import (TrainConfig, fit_test_latent, load_checkpoint, toy_preset, train)

logger = logging.getLogger("killshape")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
THREADS_ENV = "KILLSHAPE_THREADS"
DEFAULT_CHECKPOINT = "model.ndfs"

# accepted config keys per section, with their types and defaults
CONFIG_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "data": {
        "kind": (str, "cubes"),
        "count": (int, 12),
        "samples_per_shape": (int, 2000),
        "seed": (int, 7),
        "dir": (str, ""),
    },
    "train": {
        "epochs": (int, 2000),
        "lambda_d": (float, 0.001),
        "lambda_e": (float, 0.1),
        "lambda_ad": (float, 0.001),
        "sald_grad": (float, 0.1),
        "recon_batch": (int, 8),
        "recon_points": (int, 128),
        "deform_batch": (int, 8),
        "deform_points": (int, 32),
        "interpolation": (str, "linear"),
        "field_sharing": (str, "draw"),
        "seed": (int, 0),
        "checkpoint": (str, DEFAULT_CHECKPOINT),
        "checkpoint_every": (int, 0),
        "log": (str, ""),
    },
    "model": {
        "hidden_layers": (int, 4),
        "hidden_width": (int, 64),
        "latent_dim": (int, 8),
        "skip_layer": (int, 2),
        "parts": (int, 0),  # 0: chosen from the data kind
    },
    "eval": {
        "resolution": (int, ev.DEFAULT_RESOLUTION),
        "samples": (int, ev.DEFAULT_SAMPLES),
        "steps": (int, 6),
        "mode": (str, "linear"),
        "out": (str, "out"),
    },
}


def load_config(path) -> dict[str, dict[str, object]]:
    """Read a ``key = value`` file with [data]/[train]/[model]/[eval] sections.

    Unknown sections or keys raise ConfigError; absent keys take defaults.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section, schema in CONFIG_SCHEMA.items():
        values = {}
        present = parser[section] if parser.has_section(section) else {}
        for key, (typ, default) in schema.items():
            if key in present:
                raw = present[key]
                try:
                    values[key] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from exc
            else:
                values[key] = default
                logger.info("config %s: [%s] %s not set, using default %r", path, section, key,
                            default)
        for key in present:
            if key not in schema:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
        out[section] = values
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
    return out


def default_config() -> dict[str, dict[str, object]]:
    return {s: {k: d for k, (_, d) in schema.items()} for s, schema in CONFIG_SCHEMA.items()}


def _settings(args) -> dict[str, dict[str, object]]:
    """Defaults, then the config file, then any flag given on the command line."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = default_config()
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


# argparse dest -> (config section, key)
FLAG_KEYS = {
    "kind": ("data", "kind"),
    "count": ("data", "count"),
    "samples_per_shape": ("data", "samples_per_shape"),
    "data_seed": ("data", "seed"),
    "data": ("data", "dir"),
    "epochs": ("train", "epochs"),
    "lambda_d": ("train", "lambda_d"),
    "interpolation": ("train", "interpolation"),
    "field_sharing": ("train", "field_sharing"),
    "seed": ("train", "seed"),
    "checkpoint": ("train", "checkpoint"),
    "log": ("train", "log"),
    "parts": ("model", "parts"),
    "resolution": ("eval", "resolution"),
    "samples": ("eval", "samples"),
    "steps": ("eval", "steps"),
    "mode": ("eval", "mode"),
    "out": ("eval", "out"),
}


def train_config(settings) -> TrainConfig:
    t, m = settings["train"], settings["model"]
    parts = m["parts"] or (1 if settings["data"]["kind"] == "cubes" else 2)
    mlp = MlpConfig(hidden_layers=m["hidden_layers"], hidden_width=m["hidden_width"],
                    latent_dim=m["latent_dim"], skip_layer=m["skip_layer"], parts=parts)
    weights = LossWeights(lambda_d=t["lambda_d"], lambda_e=t["lambda_e"],
                          lambda_ad=t["lambda_ad"], sald_grad=t["sald_grad"])
    base = toy_preset(settings["data"]["kind"], t["lambda_d"])
    return dataclasses.replace(
        base, epochs=t["epochs"], recon_batch=t["recon_batch"], recon_points=t["recon_points"],
        deform_batch=t["deform_batch"], deform_points=t["deform_points"],
        interpolation=t["interpolation"], field_sharing=t["field_sharing"], seed=t["seed"],
        checkpoint_every=t["checkpoint_every"], mlp=mlp, weights=weights,
        schedule=Schedule.constant(t["lambda_d"]),
    )


def load_clouds(settings):
    d = settings["data"]
    if d["dir"]:
        files = sorted(p for p in Path(d["dir"]).iterdir() if p.suffix.lower() in (".ply", ".xyz"))
        if not files:
            raise FileNotFoundError(f"no .ply or .xyz files in {d['dir']}")
        return [read_cloud(p) for p in files]
    logger.info("no data directory given; generating %d %s (seed %d)", d["count"], d["kind"], d["seed"])
    return generate_toy(ToySpec(d["kind"], d["count"], d["samples_per_shape"], d["seed"]))


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    return 1


# --- subcommands -----------------------------------------------------------


def cmd_gen_toy(args, settings) -> int:
    d = settings["data"]
    clouds = generate_toy(ToySpec(d["kind"], d["count"], d["samples_per_shape"], d["seed"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = write_xyz if args.format == "xyz" else write_ply
    for i, c in enumerate(clouds):
        writer(out / f"{d['kind']}_{i:03d}.{args.format}", c)
    print(f"wrote {len(clouds)} {args.format.upper()} files to {out}")
    return EXIT_OK


def cmd_train(args, settings) -> int:
    clouds = load_clouds(settings)
    config = train_config(settings)
    ckpt_path = settings["train"]["checkpoint"]
    log_path = settings["train"]["log"]
    rows = []

    def progress(event):
        row = {"epoch": event.epoch, "lambda_d": event.lambda_d, **event.losses,
               "rejected": event.rejected}
        rows.append(row)
        if event.epoch % max(1, config.epochs // 20) == 0 or event.epoch == config.epochs:
            logger.info("epoch %d %s", event.epoch,
                        " ".join(f"{k}={v:.5g}" for k, v in event.losses.items()))

    resume = None
    if args.resume:
        # architecture and sampling come from the checkpoint; only the epoch target moves
        resume = load_checkpoint(args.resume)
        resume.config = dataclasses.replace(resume.config, epochs=config.epochs)
    ckpt = train(clouds, config, progress=progress, checkpoint=resume,
                 checkpoint_path=ckpt_path, threads=_threads(args))
    if log_path:
        ev.write_csv(log_path, rows)
    print(f"trained {ckpt.epoch} epochs on {len(clouds)} shapes; checkpoint {ckpt_path}")
    return EXIT_OK


def _box(ckpt):
    if ckpt.box is None:
        raise KillShapeError("checkpoint has no training box")
    return ckpt.box[0], ckpt.box[1]


def cmd_fit(args, settings) -> int:
    ckpt = load_checkpoint(settings["train"]["checkpoint"])
    cloud = read_cloud(args.cloud)
    res = fit_test_latent(ckpt, cloud, steps=args.fit_steps, seed=settings["train"]["seed"])
    out = Path(args.code_out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(len(res.z))])
        w.writerow([repr(float(v)) for v in res.z])
    print(f"fitted code (loss {res.loss:.6g}, initial {res.initial_loss:.6g}) -> {out}")
    if res.diverged:
        logger.warning("fit diverged; kept the best code seen")
    return EXIT_OK


def cmd_interpolate(args, settings) -> int:
    e = settings["eval"]
    ckpt = load_checkpoint(settings["train"]["checkpoint"])
    out = Path(e["out"])
    out.mkdir(parents=True, exist_ok=True)
    meshes = []
    rows = ev.interpolation_report(ckpt, [tuple(args.pair)], e["steps"], e["mode"],
                                   e["resolution"], e["samples"], seed=settings["train"]["seed"],
                                   box=_box(ckpt), meshes_out=meshes)
    for n, (_, mesh) in enumerate(meshes):
        ev.write_obj(out / f"interp_{n:03d}.obj", mesh)
    ev.write_csv(out / "report.csv", rows, ev.REPORT_COLUMNS)
    print(f"wrote {len(meshes)} OBJ files and report.csv to {out}")
    return EXIT_OK


def cmd_eval(args, settings) -> int:
    e = settings["eval"]
    ckpt = load_checkpoint(settings["train"]["checkpoint"])
    clouds = load_clouds(settings)
    if len(clouds) != len(ckpt.latents):
        raise KillShapeError(f"checkpoint has {len(ckpt.latents)} codes but {len(clouds)} clouds given")
    box = _box(ckpt)
    rows = []
    for i, c in enumerate(clouds):
        z = ckpt.latents.codes[i].detach()
        rows.append({"shape": i, "chamfer": ev.reconstruction_chamfer(
            ckpt.net, z, c, box, e["resolution"], rng=settings["train"]["seed"])})
    out = Path(e["out"])
    out.mkdir(parents=True, exist_ok=True)
    ev.write_csv(out / "eval.csv", rows, ("shape", "chamfer"))
    if args.pairs:
        rng = np.random.default_rng(settings["train"]["seed"])
        m = len(clouds)
        pairs = [tuple(int(v) for v in rng.choice(m, 2, replace=False)) for _ in range(args.pairs)]
        stats = ev.path_statistics(ckpt, pairs, mode=e["mode"], resolution=e["resolution"],
                                   seed=settings["train"]["seed"], box=box)
        ev.write_csv(out / "paths.csv", [
            {"pair_start": s.pair[0], "pair_end": s.pair[1], "killing_energy": s.killing_energy,
             "area_deviation": s.area_deviation} for s in stats])
    print(f"max training-shape Chamfer {max(r['chamfer'] for r in rows):.4g}; reports in {out}")
    return EXIT_OK


def cmd_export_mesh(args, settings) -> int:
    e = settings["eval"]
    ckpt = load_checkpoint(settings["train"]["checkpoint"])
    if args.code is not None:
        with open(args.code, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        z = torch.tensor([float(v) for v in rows[-1]], dtype=DTYPE)
    else:
        z = ckpt.latents.codes[args.shape or 0].detach()
    if args.pair is not None:
        codes = ckpt.latents.codes.detach()
        z = interpolate(codes[args.pair[0]], codes[args.pair[1]],
                        torch.tensor(args.t, dtype=DTYPE), e["mode"])
    mesh = ev.extract_mesh(ckpt.net, z, _box(ckpt), e["resolution"], labels=args.labels)
    ev.write_obj(args.mesh_out, mesh)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {args.mesh_out}")
    return EXIT_OK


def cmd_selftest(args, settings) -> int:
    from . import selftest

    results = selftest.run(seed=args.seed or 0)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_FAILURE


# --- argument parsing --------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="killshape", description="Shape spaces with a deformation-energy prior.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, *, data=False, evaluation=False):
        sp.add_argument("--config", help="key = value config file (flags override it)")
        sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--seed", type=int, help="random seed for this run")
        sp.add_argument("--checkpoint", help=f"checkpoint file (default {DEFAULT_CHECKPOINT})")
        if data:
            sp.add_argument("--kind", choices=("cubes", "ellipsoid-figures"), help="toy data kind")
            sp.add_argument("--count", type=int, help="number of toy shapes")
            sp.add_argument("--samples-per-shape", type=int, help="points per toy shape")
            sp.add_argument("--data-seed", type=int, help="seed for toy data generation")
            sp.add_argument("--data", help="directory of .ply/.xyz clouds (default: generate toy data)")
        if evaluation:
            sp.add_argument("--resolution", type=int, help="marching-cubes grid resolution")
            sp.add_argument("--samples", type=int, help="surface samples per shape for distances")
            sp.add_argument("--mode", choices=("linear", "spiral"), help="latent interpolation")
            sp.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-toy", help="generate a toy dataset as point-cloud files")
    g.add_argument("--kind", choices=("cubes", "ellipsoid-figures"), help="toy data kind")
    g.add_argument("--count", type=int, help="number of shapes")
    g.add_argument("--samples-per-shape", type=int, help="points per shape")
    g.add_argument("--seed", dest="data_seed", type=int, help="generation seed")
    g.add_argument("--out", dest="out_dir", required=True, help="output directory")
    g.add_argument("--format", choices=("ply", "xyz"), default="ply", help="file format (default ply)")
    g.add_argument("--config", help="key = value config file (flags override it)")
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="train a shape space and write a checkpoint")
    common(t, data=True)
    t.add_argument("--epochs", type=int, help="training epochs")
    t.add_argument("--lambda-d", type=float, help="deformation loss weight (0 disables it)")
    t.add_argument("--parts", type=int, help="number of deformation parts k")
    t.add_argument("--interpolation", choices=("linear", "spiral"), help="latent path family")
    t.add_argument("--field-sharing", choices=("batch", "draw"),
                   help="one field set per batch or per latent-path draw")
    t.add_argument("--log", help="CSV file for per-epoch losses")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit", help="fit a latent code to a new point cloud")
    common(f)
    f.add_argument("--cloud", required=True, help=".ply or .xyz point cloud")
    f.add_argument("--steps", dest="fit_steps", type=int, default=500, help="optimisation steps")
    f.add_argument("--out", dest="code_out", default="code.csv", help="CSV file for the code")
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("interpolate", help="mesh sequence and report between two training shapes")
    common(i, evaluation=True)
    i.add_argument("--pair", type=int, nargs=2, required=True, metavar=("I", "J"),
                   help="indices of the endpoint shapes")
    i.add_argument("--steps", type=int, help="number of t values in [0, 1]")
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("eval", help="reconstruction Chamfer per training shape, optional path stats")
    common(e, data=True, evaluation=True)
    e.add_argument("--pairs", type=int, default=0, help="random pairs for path statistics")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-mesh", help="export one shape as an OBJ mesh")
    common(x, evaluation=True)
    src = x.add_mutually_exclusive_group()
    src.add_argument("--shape", type=int, help="training shape index (default 0)")
    src.add_argument("--code", help="CSV file with a latent code (as written by fit)")
    src.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"), help="interpolate between shapes")
    x.add_argument("--t", type=float, default=0.5, help="interpolation parameter with --pair")
    x.add_argument("--labels", action="store_true", help="colour vertices by part")
    x.add_argument("--mesh-out", default="mesh.obj", help="output OBJ file")
    x.set_defaults(func=cmd_export_mesh)

    s = sub.add_parser("selftest", help="run the analytic oracle checks")
    s.add_argument("--seed", type=int, default=0, help="seed for randomized probes")
    s.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads(args)
        torch.set_num_threads(threads)
        settings = _settings(args)
        return args.func(args, settings)
    except ConfigError as exc:
        print(f"killshape: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KillShapeError, OSError, ValueError) as exc:
        print(f"killshape: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())
