"""Command-line surface: ``shapecorr <command> ...``.

Every artifact-producing command writes a ``run_manifest.json`` next to its
output. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from dotenv import load_dotenv

from .archive import prepare_record, read_archive, read_shape, write_shape
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import AppConfig, load_config
from .errors import DataError, ShapeCorrError, UsageError
from .evaluation import load_normalizer, load_protocol, run_evaluation, write_report
from .geometry import load_mesh, normalize_shape, sample_surface_points, save_obj
from .inference import (
    correspond,
    cross_reconstruct,
    export_embeddings,
    interpolate,
    reconstruct,
    segment,
    transfer_attribute,
    write_correspondences_csv,
    write_embeddings_csv,
    write_points_csv,
)
from .logs import configure_logging
from .manifest import RunManifest, content_hash
from .models import SurfaceSamples
from .nets import model_from_config
from .plots import histogram_plot, line_plot
from .synthdata import generate_family, load_family_spec
from .training import STAGES, Trainer, resume_plan

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SHAPECORR_OUTPUT_ROOT"
MESH_SUFFIXES = (".obj", ".off")


def _log(msg: str) -> None:
    print(msg, flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


# --- shared plumbing -------------------------------------------------------------

def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else _output_root() / args.command


def _out_file(args: argparse.Namespace, default_name: str) -> Path:
    return Path(args.out) if args.out else _output_root() / args.command / default_name


def _config(args: argparse.Namespace) -> AppConfig:
    cfg = load_config(args.config) if args.config else AppConfig()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.training.seed = args.seed
    return cfg


def _seed(args: argparse.Namespace, cfg: AppConfig) -> int:
    return args.seed if args.seed is not None else cfg.training.seed


def _setup_torch(cfg: AppConfig, seed: int) -> None:
    torch.manual_seed(seed)
    if cfg.training.float64:
        # a single intra-op thread keeps reductions in a fixed order
        torch.set_num_threads(1)


def _manifest(args: argparse.Namespace, cfg: AppConfig, inputs: List[str], out: Path) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_path=cfg.source_path,
        seed=_seed(args, cfg),
        input_hash=content_hash([p for p in inputs if p]),
        output_dir=str(out),
    )


def _finish(manifest: RunManifest, **details) -> None:
    manifest.details.update(details)
    manifest.finish()
    manifest.write()


def _checkpoint(path: str) -> Checkpoint:
    ck = load_checkpoint(path)
    logger.info("loaded checkpoint %s (stage %s, step %d)", path, ck.stage or "-", ck.step)
    return ck


def _surface(path: str, cfg: AppConfig, seed: int) -> Tuple[SurfaceSamples, Optional[np.ndarray]]:
    """Surface samples of a shape directory, or of a mesh file after normalization."""
    p = Path(path)
    if p.is_dir():
        rec = read_shape(str(p))
        return rec.surface, rec.part_labels
    if not p.exists():
        raise DataError(f"input not found: {path}")
    mesh = normalize_shape(load_mesh(str(p)), cfg.data.target_diag)
    return sample_surface_points(mesh, cfg.data.surface_points, seed), None


def _int_list(raw: Optional[str], name: str) -> Optional[List[int]]:
    if not raw:
        return None
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{name}: expected comma-separated integers, got '{raw}'") from exc


def _float_list(raw: str, name: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{name}: expected comma-separated numbers, got '{raw}'") from exc


# --- commands --------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    spec = load_family_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args)
    manifest = _manifest(args, cfg, [args.spec], out)
    manifest.seed = spec.seed
    records = generate_family(spec)
    for rec in records:
        write_shape(str(out), rec)
    archive_hash = content_hash([str(out)])
    _finish(manifest, shapes=len(records), family=spec.family, archive_hash=archive_hash)
    _log(f"wrote {len(records)} {spec.family} shapes to {out} (archive {archive_hash[:12]})")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _config(args)
    mesh_dir = Path(args.mesh_dir)
    if not mesh_dir.is_dir():
        raise DataError(f"mesh directory not found: {mesh_dir}")
    files = sorted(p for p in mesh_dir.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if not files:
        raise DataError(f"no .obj or .off meshes in {mesh_dir}")

    resolutions = _int_list(args.resolutions, "resolutions") or list(cfg.data.resolutions)
    counts = _int_list(args.k_schedule, "k-schedule")
    if counts is None:
        points_per_resolution = {r: cfg.data.points_per_resolution[r] for r in resolutions
                                 if r in cfg.data.points_per_resolution}
    elif len(counts) != len(resolutions):
        raise UsageError("--k-schedule: need one count per resolution")
    else:
        points_per_resolution = dict(zip(resolutions, counts))
    surface_points = args.points or cfg.data.surface_points
    seed = cfg.data.seed

    out = _out_dir(args)
    manifest = _manifest(args, cfg, [str(mesh_dir)], out)
    failed = []
    for i, path in enumerate(files):
        shape_seed = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        try:
            mesh = normalize_shape(load_mesh(str(path)), cfg.data.target_diag)
            record, _ = prepare_record(
                mesh, path.stem, surface_points, resolutions, points_per_resolution, shape_seed,
                cfg.data.near_surface_fraction, cfg.data.jitter_voxels,
            )
        except DataError as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            failed.append(path.name)
            continue
        write_shape(str(out), record)
    done = len(files) - len(failed)
    _finish(manifest, prepared=done, failed=failed, resolutions=resolutions)
    _log(f"prepared {done} of {len(files)} meshes into {out}")
    if failed:
        _log(f"skipped: {', '.join(failed)}")
    if done == 0:
        raise DataError("no mesh could be prepared")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    _setup_torch(cfg, seed)
    archive = args.archive or cfg.data.archive_dir
    if not archive:
        raise UsageError("no archive given (--archive or data.archive_dir)")
    shapes = read_archive(archive)

    ckpt_path = _out_file(args, "model.ckpt")
    tcfg = cfg.training
    tcfg.checkpoint_path = str(ckpt_path)
    tcfg.metrics_path = args.metrics or tcfg.metrics_path or str(ckpt_path.parent / "metrics.csv")
    requested = list(STAGES) if args.stage == "all" else [args.stage]

    step, resume_stage, resume_step, last_stage = 0, "", 0, ""
    if args.resume:
        ck = _checkpoint(args.resume)
        model, step = ck.model, ck.step
        last_stage = ck.stage
        if tcfg.float64 and model.dtype != torch.float64:
            model = model.double()
        requested, resume_stage, resume_step = resume_plan(ck.stage, ck.extra, requested)
        logger.info("resuming at step %d; stages left: %s", step, ",".join(requested) or "none")
    else:
        model = model_from_config(cfg.model, tcfg.float64)

    manifest = _manifest(args, cfg, [archive, args.resume or ""], ckpt_path.parent)
    trainer = Trainer(model, shapes, tcfg, step=step)
    trainer.run(requested, resume_stage, resume_step)
    if requested:
        last_stage = requested[-1]
    save_checkpoint(trainer.model, str(ckpt_path), step=trainer.step, stage=last_stage,
                    extra={"stage_step": 0, "completed": True})
    _finish(manifest, stages=requested, step=trainer.step, checkpoint=str(ckpt_path),
            metrics=tcfg.metrics_path, config_hash=cfg.content_hash())
    _log(f"trained stages {','.join(requested) or '-'} to step {trainer.step}; checkpoint {ckpt_path}")
    return 0


def cmd_correspond(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    ck = _checkpoint(args.checkpoint)
    tau = cfg.inference.tau if args.tau is None else args.tau
    normalizer = None
    if args.normalizer:
        normalizer = load_normalizer(args.normalizer)
        if normalizer is None:
            raise DataError(f"{args.normalizer} carries no score normalizer")
    elif cfg.inference.normalization == "corpus":
        raise UsageError("corpus normalization needs --normalizer <report.json>")

    s_a, _ = _surface(args.source, cfg, seed)
    s_b, _ = _surface(args.target, cfg, seed + 1)
    out = _out_file(args, "correspondences.csv")
    manifest = _manifest(args, cfg, [args.checkpoint, args.source, args.target], out.parent)
    results = correspond(ck.model, s_a, s_b, tau, normalizer, cfg.inference.chunk_size)
    write_correspondences_csv(str(out), results)
    valid = sum(1 for r in results if r.valid)
    _finish(manifest, tau=tau, points=len(results), valid=valid, output=str(out))
    _log(f"{valid} of {len(results)} points have a counterpart (tau {tau}); wrote {out}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ck = _checkpoint(args.checkpoint)
    surface, _ = _surface(args.shape, cfg, _seed(args, cfg))
    out = _out_file(args, "segment.csv")
    manifest = _manifest(args, cfg, [args.checkpoint, args.shape], out.parent)
    labels = segment(ck.model, surface, cfg.inference.chunk_size)
    write_points_csv(str(out), surface.points, {"label": labels})
    used = sorted(int(v) for v in np.unique(labels))
    _finish(manifest, points=len(labels), branches=used, output=str(out))
    _log(f"segmented {len(labels)} points into branches {used}; wrote {out}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ck = _checkpoint(args.checkpoint)
    surface, _ = _surface(args.shape, cfg, _seed(args, cfg))
    resolution = args.resolution or cfg.inference.reconstruct_resolution
    out = _out_file(args, "reconstruction.obj")
    manifest = _manifest(args, cfg, [args.checkpoint, args.shape], out.parent)
    mesh = reconstruct(ck.model, surface, resolution, cfg.inference.iso, cfg.inference.chunk_size)
    save_obj(mesh, str(out))
    _finish(manifest, resolution=resolution, vertices=len(mesh.vertices), faces=len(mesh.faces), output=str(out))
    if mesh.is_empty:
        _log(f"reconstruction is empty at {resolution}^3; wrote an empty {out}")
    else:
        _log(f"reconstructed {len(mesh.faces)} faces at {resolution}^3; wrote {out}")
    return 0


def cmd_interpolate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    ck = _checkpoint(args.checkpoint)
    alphas = _float_list(args.alphas, "alphas")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise UsageError("--alphas: every value must lie in [0, 1]")
    s_a, _ = _surface(args.source, cfg, seed)
    s_b, _ = _surface(args.target, cfg, seed + 1)
    out = _out_dir(args)
    manifest = _manifest(args, cfg, [args.checkpoint, args.source, args.target], out)
    written = []
    for alpha in alphas:
        points = interpolate(ck.model, s_a, s_b, alpha, cfg.inference.chunk_size)
        path = out / f"interp_{alpha:.3f}.csv"
        write_points_csv(str(path), points)
        written.append(path.name)
    _finish(manifest, alphas=alphas, outputs=written)
    _log(f"wrote {len(written)} interpolated point sets to {out}")
    return 0


def _read_attribute_csv(path: str) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or "value" not in rows[0]:
        raise DataError(f"{path}: expected a 'value' column")
    return np.array([float(r["value"]) for r in rows], dtype=np.float64)


def cmd_transfer(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    ck = _checkpoint(args.checkpoint)
    tau = cfg.inference.tau if args.tau is None else args.tau
    s_a, labels_a = _surface(args.source, cfg, seed)
    s_b, _ = _surface(args.target, cfg, seed + 1)
    if args.attribute_csv:
        attributes = _read_attribute_csv(args.attribute_csv)
    elif labels_a is not None:
        attributes = labels_a.astype(np.float64)
    else:
        raise UsageError("source has no part labels; pass --attribute-csv")

    out = _out_file(args, "transfer.csv")
    inputs = [args.checkpoint, args.source, args.target, args.attribute_csv or ""]
    manifest = _manifest(args, cfg, inputs, out.parent)
    pulled = transfer_attribute(ck.model, s_a, list(attributes), s_b, tau, cfg.inference.chunk_size)
    valid = np.array([v is not None for v in pulled])
    values = np.array([np.nan if v is None else float(v) for v in pulled])
    write_points_csv(str(out), s_b.points, {"value": values, "valid": valid.astype(np.float64)})
    _finish(manifest, tau=tau, points=len(pulled), transferred=int(valid.sum()), output=str(out))
    _log(f"transferred {int(valid.sum())} of {len(pulled)} values; wrote {out}")
    return 0


def cmd_crossrecon(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    ck = _checkpoint(args.checkpoint)
    s_a, _ = _surface(args.source, cfg, seed)
    s_b, _ = _surface(args.target, cfg, seed + 1)
    out = _out_dir(args)
    manifest = _manifest(args, cfg, [args.checkpoint, args.source, args.target], out)
    recon_a, recon_b, u_a, u_b = cross_reconstruct(ck.model, s_a, s_b, cfg.inference.chunk_size)
    write_points_csv(str(out / "cross_a.csv"), recon_a, {"uncertainty": u_a})
    write_points_csv(str(out / "cross_b.csv"), recon_b, {"uncertainty": u_b})
    _finish(manifest, points_a=len(recon_a), points_b=len(recon_b))
    _log(f"wrote cross reconstructions to {out}")
    return 0


def _plots(out: Path, report) -> List[str]:
    written = []
    if report.accuracy_curve:
        ts, fs = zip(*report.accuracy_curve)
        line_plot(str(out / "accuracy_curve.png"), [("accuracy", ts, fs)],
                  "Correspondence accuracy", "distance threshold", "fraction")
        written.append("accuracy_curve.png")
    if report.roc:
        fpr, tpr = zip(*report.roc)
        line_plot(str(out / "roc.png"), [(f"AUC {report.auc:.3f}", fpr, tpr)],
                  "Non-existence detection", "false positive rate", "true positive rate")
        written.append("roc.png")
    for fam, stats in report.uncertainty.items():
        hist = stats.get("histogram") or {}
        if hist.get("mass"):
            name = f"uncertainty_{fam}.png"
            histogram_plot(str(out / name), hist["edges"], hist["mass"], f"Point variance ({fam})", "variance")
            written.append(name)
    return written


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _setup_torch(cfg, _seed(args, cfg))
    ck = _checkpoint(args.checkpoint)
    archive = args.archive or cfg.data.archive_dir
    if not archive:
        raise UsageError("no archive given (--archive or data.archive_dir)")
    shapes = read_archive(archive)
    protocol = load_protocol(args.protocol)
    if args.seed is not None:
        protocol.seed = args.seed

    out = _out_dir(args)
    manifest = _manifest(args, cfg, [args.checkpoint, archive, args.protocol or ""], out)
    manifest.seed = protocol.seed
    report = run_evaluation(ck.model, shapes, protocol, cfg.evaluation, cfg.inference,
                            config_hash=cfg.content_hash(), stage=ck.stage)
    paths = write_report(str(out), report)
    plots = _plots(out, report) if cfg.evaluation.plots and not args.no_plots else []
    _finish(manifest, outputs=sorted(p.name for p in paths.values()) + plots, pairs=report.pairs)
    _log(f"evaluated {len(shapes)} shapes ({report.pairs} pairs); report {paths['report']}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ck = _checkpoint(args.checkpoint)
    surface, labels = _surface(args.shape, cfg, _seed(args, cfg))
    if args.with_labels and labels is None:
        raise UsageError("--with-labels needs a shape directory with part labels")
    out = _out_file(args, "embeddings.csv")
    manifest = _manifest(args, cfg, [args.checkpoint, args.shape], out.parent)
    table = export_embeddings(ck.model, surface, labels if args.with_labels else None, cfg.inference.chunk_size)
    write_embeddings_csv(str(out), table)
    _finish(manifest, points=len(surface), k=int(table["o_mu"].shape[1]), output=str(out))
    _log(f"exported {len(surface)} embeddings to {out}")
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default="", help="YAML/JSON config file.")
    common.add_argument("--seed", type=int, default=None, help="Override every configured seed.")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="shapecorr", description="Dense shape correspondence with implicit part embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic chair/table archive.")
    p.add_argument("--spec", required=True, help="Family spec YAML.")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="Normalize, voxelize and sample a mesh directory.")
    p.add_argument("mesh_dir")
    p.add_argument("--out", default="")
    p.add_argument("--resolutions", default="", help="e.g. 16,32,64")
    p.add_argument("--points", type=int, default=0, help="Surface samples per shape.")
    p.add_argument("--k-schedule", default="", help="Occupancy samples per resolution, e.g. 4096,8192,32768")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="Train a model.")
    p.add_argument("--archive", default="")
    p.add_argument("--out", default="", help="Checkpoint path.")
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--resume", default="", help="Continue from this checkpoint.")
    p.add_argument("--metrics", default="", help="Metrics CSV path.")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("correspond", cmd_correspond, "Dense correspondence from source to target."),
        ("interpolate", cmd_interpolate, "Interpolate shape codes between two shapes."),
        ("transfer", cmd_transfer, "Carry per-point attributes from source to target."),
        ("crossrecon", cmd_crossrecon, "Swapped-embedding reconstructions of a pair."),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("source", help="Shape directory or mesh file.")
        p.add_argument("target", help="Shape directory or mesh file.")
        p.add_argument("--out", default="")
        p.set_defaults(func=func)
        if name in ("correspond", "transfer"):
            p.add_argument("--tau", type=float, default=None, help="Confidence threshold (default 0.2).")
        if name == "correspond":
            p.add_argument("--normalizer", default="", help="report.json holding a corpus score normalizer.")
        if name == "interpolate":
            p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
        if name == "transfer":
            p.add_argument("--attribute-csv", default="", help="CSV with a 'value' column, one row per source point.")

    for name, func, help_text in (
        ("segment", cmd_segment, "Per-point branch labels."),
        ("reconstruct", cmd_reconstruct, "Mesh the occupancy field."),
        ("export", cmd_export, "Dump per-point embeddings."),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("shape", help="Shape directory or mesh file.")
        p.add_argument("--out", default="")
        p.set_defaults(func=func)
        if name == "reconstruct":
            p.add_argument("--resolution", type=int, default=0)
        if name == "export":
            p.add_argument("--with-labels", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="Run the evaluation protocol.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", default="")
    p.add_argument("--protocol", default="")
    p.add_argument("--out", default="")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.verbose)
        return int(args.func(args))
    except ShapeCorrError as exc:
        _log(f"ERROR: {exc}")
        return exc.exit_code
