"""Shape archive: one directory per shape.

Layout::

    <shape_id>/manifest.json        id, resolutions, counts, seed, array shapes
    <shape_id>/surface.f32          (n, 3) little-endian float32, row-major
    <shape_id>/normals.f32          (n, 3)
    <shape_id>/points_r{r}.f32      (K_r, 3)
    <shape_id>/labels_r{r}.u8       (K_r,)
    <shape_id>/labels.u8            (n,) part labels, synthetic shapes only
    <shape_id>/params.json          generator parameters, synthetic shapes only
    <shape_id>/mesh.obj             normalized mesh, when known
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import ArchiveError
from .geometry import (
    load_mesh,
    sample_occupancy_points,
    sample_surface_with_faces,
    save_obj,
    voxelize,
)
from .models import Mesh, OccupancySamples, ShapeRecord, SurfaceSamples

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _write_array(path: Path, array: np.ndarray, dtype: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    np.ascontiguousarray(array).astype(dtype).tofile(tmp)
    tmp.replace(path)


def _read_array(path: Path, dtype: str, shape: List[int]) -> np.ndarray:
    if not path.exists():
        raise ArchiveError(f"missing array file {path}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape)) if shape else 0
    if data.size != expected:
        raise ArchiveError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(shape)


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def write_shape(root: str, record: ShapeRecord) -> Path:
    """Write one record under root/<shape_id>; the manifest goes last."""
    out = Path(root) / record.shape_id
    out.mkdir(parents=True, exist_ok=True)

    arrays: Dict[str, List[int]] = {}
    _write_array(out / "surface.f32", record.surface.points, "<f4")
    arrays["surface.f32"] = list(record.surface.points.shape)
    if record.surface.normals is not None:
        _write_array(out / "normals.f32", record.surface.normals, "<f4")
        arrays["normals.f32"] = list(record.surface.normals.shape)

    resolutions = sorted(record.occupancy)
    counts = {}
    for r in resolutions:
        occ = record.occupancy[r]
        _write_array(out / f"points_r{r}.f32", occ.points, "<f4")
        _write_array(out / f"labels_r{r}.u8", occ.labels, "u1")
        arrays[f"points_r{r}.f32"] = list(occ.points.shape)
        arrays[f"labels_r{r}.u8"] = list(occ.labels.shape)
        counts[str(r)] = len(occ)

    if record.part_labels is not None:
        _write_array(out / "labels.u8", record.part_labels, "u1")
        arrays["labels.u8"] = list(record.part_labels.shape)
    if record.params is not None:
        _write_json(out / "params.json", record.params)
    if record.mesh is not None and not record.mesh.is_empty:
        save_obj(record.mesh, str(out / "mesh.obj"))

    _write_json(out / MANIFEST, {
        "version": FORMAT_VERSION,
        "id": record.shape_id,
        "seed": int(record.seed),
        "surface_points": len(record.surface),
        "resolutions": resolutions,
        "counts": counts,
        "arrays": arrays,
    })
    return out


def read_shape(shape_dir: str) -> ShapeRecord:
    d = Path(shape_dir)
    try:
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArchiveError(f"cannot read {d / MANIFEST}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupt manifest {d / MANIFEST}: {exc}") from exc
    if int(manifest.get("version", 0)) != FORMAT_VERSION:
        raise ArchiveError(f"{d}: unsupported archive version {manifest.get('version')}")

    arrays: Dict[str, List[int]] = manifest.get("arrays", {})
    if "surface.f32" not in arrays:
        raise ArchiveError(f"{d}: manifest lists no surface array")
    points = _read_array(d / "surface.f32", "<f4", arrays["surface.f32"]).astype(np.float64)
    normals = None
    if "normals.f32" in arrays:
        normals = _read_array(d / "normals.f32", "<f4", arrays["normals.f32"]).astype(np.float64)

    occupancy = {}
    for r in manifest.get("resolutions", []):
        r = int(r)
        pts = _read_array(d / f"points_r{r}.f32", "<f4", arrays[f"points_r{r}.f32"]).astype(np.float64)
        labels = _read_array(d / f"labels_r{r}.u8", "u1", arrays[f"labels_r{r}.u8"])
        occupancy[r] = OccupancySamples(points=pts, labels=labels, resolution=r)

    part_labels = None
    if "labels.u8" in arrays:
        part_labels = _read_array(d / "labels.u8", "u1", arrays["labels.u8"]).astype(np.int64)
    params = None
    if (d / "params.json").exists():
        params = json.loads((d / "params.json").read_text(encoding="utf-8"))
    mesh = load_mesh(str(d / "mesh.obj")) if (d / "mesh.obj").exists() else None

    return ShapeRecord(
        shape_id=str(manifest.get("id", d.name)),
        surface=SurfaceSamples(points=points, normals=normals),
        occupancy=occupancy,
        mesh=mesh,
        part_labels=part_labels,
        params=params,
        seed=int(manifest.get("seed", 0)),
    )


def list_shapes(root: str) -> List[Path]:
    """Shape directories under root, sorted by name."""
    base = Path(root)
    if not base.is_dir():
        raise ArchiveError(f"archive directory not found: {root}")
    return sorted(p for p in base.iterdir() if (p / MANIFEST).is_file())


def read_archive(root: str) -> List[ShapeRecord]:
    shapes = [read_shape(str(p)) for p in list_shapes(root)]
    if not shapes:
        raise ArchiveError(f"no shapes found in {root}")
    logger.info("loaded %d shapes from %s", len(shapes), root)
    return shapes


def prepare_record(
    mesh: Mesh,
    shape_id: str,
    surface_points: int,
    resolutions: List[int],
    points_per_resolution: Dict[int, int],
    seed: int,
    near_surface_fraction: float = 0.8,
    jitter_voxels: float = 0.5,
    noise_sigma: float = 0.0,
) -> Tuple[ShapeRecord, np.ndarray]:
    """Sample a normalized mesh into a record; also returns the source face of every surface point."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=2 + len(resolutions))

    surface, face = sample_surface_with_faces(mesh, surface_points, int(seeds[0]))
    if noise_sigma > 0:
        noise = np.random.default_rng(int(seeds[1])).normal(0.0, noise_sigma, size=surface.points.shape)
        surface = SurfaceSamples(points=surface.points + noise, normals=surface.normals)

    occupancy = {}
    for i, r in enumerate(resolutions):
        if r not in points_per_resolution:
            raise ArchiveError(f"no sample count configured for resolution {r}")
        grid = voxelize(mesh, r)
        occupancy[r] = sample_occupancy_points(
            grid, points_per_resolution[r], int(seeds[2 + i]), near_surface_fraction, jitter_voxels
        )
    record = ShapeRecord(shape_id=shape_id, surface=surface, occupancy=occupancy, mesh=mesh, seed=seed)
    return record, face
