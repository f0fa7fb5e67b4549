"""Mesh and point-cloud primitives.

Loading (OBJ/OFF), normalization, watertight voxelization, occupancy and
surface sampling, neighborhood queries and iso-surface extraction. Every
function here is a pure function of its inputs.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from .errors import DataError, DegenerateShapeError, MeshParseError, OutOfBoundsError
from .models import GRID_BOUND, Mesh, OccupancyGrid, OccupancySamples, SurfaceSamples

logger = logging.getLogger(__name__)

# Rasterization step, as a fraction of the voxel edge.
_RASTER_STEP = 0.25


# --- loading / saving -------------------------------------------------------

def _fan(indices: List[int]) -> List[Tuple[int, int, int]]:
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _parse_float(path: str, line_no: int, token: str) -> float:
    try:
        value = float(token)
    except ValueError as exc:
        raise MeshParseError(path, line_no, f"bad coordinate '{token}'") from exc
    if not math.isfinite(value):
        raise MeshParseError(path, line_no, f"non-finite coordinate '{token}'")
    return value


def _load_obj(path: str, lines: List[str]) -> Tuple[list, list]:
    vertices: list = []
    faces: list = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshParseError(path, line_no, "vertex record needs 3 coordinates")
            vertices.append([_parse_float(path, line_no, t) for t in parts[1:4]])
        elif tag == "f":
            if len(parts) < 4:
                raise MeshParseError(path, line_no, "face record needs at least 3 vertices")
            idx = []
            for token in parts[1:]:
                head = token.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise MeshParseError(path, line_no, f"bad face index '{token}'") from exc
                # 1-based; negative indices count back from the latest vertex
                i = i - 1 if i > 0 else len(vertices) + i
                if i < 0 or i >= len(vertices):
                    raise MeshParseError(path, line_no, f"face index '{token}' out of range")
                idx.append(i)
            faces.extend(_fan(idx))
    return vertices, faces


def _load_off(path: str, lines: List[str]) -> Tuple[list, list]:
    records = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            records.append((line_no, line))
    if not records:
        raise MeshParseError(path, 1, "empty file")

    first_no, first = records[0]
    if not first.startswith("OFF"):
        raise MeshParseError(path, first_no, "missing OFF header")
    rest = first[3:].split()
    cursor = 1
    if rest:
        counts_no, counts = first_no, rest
    else:
        if len(records) < 2:
            raise MeshParseError(path, first_no + 1, "unexpected end of file, expected counts")
        counts_no, counts_line = records[1]
        counts = counts_line.split()
        cursor = 2
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError) as exc:
        raise MeshParseError(path, counts_no, "bad vertex/face counts") from exc

    vertices: list = []
    faces: list = []
    last_no = records[-1][0]
    for _ in range(n_vertices):
        if cursor >= len(records):
            raise MeshParseError(path, last_no + 1, f"unexpected end of file after {len(vertices)} vertices")
        line_no, line = records[cursor]
        parts = line.split()
        if len(parts) < 3:
            raise MeshParseError(path, line_no, "vertex record needs 3 coordinates")
        vertices.append([_parse_float(path, line_no, t) for t in parts[:3]])
        cursor += 1
    for face_count in range(n_faces):
        if cursor >= len(records):
            raise MeshParseError(path, last_no + 1, f"unexpected end of file after {face_count} faces")
        line_no, line = records[cursor]
        parts = line.split()
        try:
            count = int(parts[0])
            idx = [int(t) for t in parts[1:1 + count]]
        except (ValueError, IndexError) as exc:
            raise MeshParseError(path, line_no, "bad face record") from exc
        if count < 3 or len(idx) != count:
            raise MeshParseError(path, line_no, "face record needs at least 3 vertices")
        if any(i < 0 or i >= n_vertices for i in idx):
            raise MeshParseError(path, line_no, "face index out of range")
        faces.extend(_fan(idx))
        cursor += 1
    return vertices, faces


def load_mesh(path: str) -> Mesh:
    """Read an OBJ or OFF triangle mesh; polygons are fan-triangulated."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"cannot read mesh {path}: {exc}") from exc
    lines = text.splitlines()

    suffix = p.suffix.lower()
    if suffix == ".off" or (lines and lines[0].strip().startswith("OFF")):
        vertices, faces = _load_off(str(p), lines)
    else:
        vertices, faces = _load_obj(str(p), lines)

    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    if not keep.all():
        logger.debug("%s: dropped %d degenerate faces", path, int((~keep).sum()))
    return Mesh(vertices=v, faces=f[keep])


def save_obj(mesh: Mesh, path: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(p)


# --- normalization / voxelization ------------------------------------------

def normalize_shape(mesh: Mesh, target_diag: float = 1.0) -> Mesh:
    """Center the tight bounding box at the origin and scale its diagonal to target_diag."""
    if target_diag <= 0:
        raise ValueError("target_diag must be positive")
    if len(mesh.vertices) == 0:
        raise DegenerateShapeError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0.0:
        raise DegenerateShapeError("mesh has zero extent (all vertices identical)")
    center = (lo + hi) / 2.0
    scale = target_diag / diag
    return Mesh(vertices=(mesh.vertices - center) * scale, faces=mesh.faces.copy())


def _grid_for(resolution: int, bound: float) -> Tuple[float, float]:
    return -bound, 2.0 * bound / resolution


def rasterize_surface(mesh: Mesh, resolution: int, bound: float = GRID_BOUND) -> np.ndarray:
    """Boolean (r, r, r) mask of voxels touched by the triangle surface."""
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    origin, h = _grid_for(resolution, bound)
    v = mesh.vertices
    if len(v) and (np.any(v < -bound) or np.any(v > bound)):
        raise OutOfBoundsError(f"mesh extends outside the grid cube [-{bound}, {bound}]^3")

    mask = np.zeros((resolution,) * 3, dtype=bool)
    step = h * _RASTER_STEP
    for a, b, c in v[mesh.faces]:
        longest = max(np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c))
        n = max(1, int(math.ceil(longest / step)))
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = (i + j) <= n
        u = i[keep][:, None] / n
        w = j[keep][:, None] / n
        pts = a + u * (b - a) + w * (c - a)
        idx = np.clip(np.floor((pts - origin) / h).astype(np.int64), 0, resolution - 1)
        mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return mask


def voxelize(mesh: Mesh, resolution: int, bound: float = GRID_BOUND) -> OccupancyGrid:
    """Watertight occupancy: surface voxels plus everything the boundary flood fill cannot reach."""
    surface = rasterize_surface(mesh, resolution, bound)
    # binary_fill_holes floods from the boundary with 6-connectivity
    filled = ndimage.binary_fill_holes(surface)
    origin, h = _grid_for(resolution, bound)
    return OccupancyGrid(resolution=resolution, occupancy=filled.astype(np.uint8), origin=origin, voxel_size=h)


# --- sampling ----------------------------------------------------------------

def near_surface_mask(grid: OccupancyGrid) -> np.ndarray:
    """Voxels whose 6-neighborhood mixes inside and outside."""
    occ = grid.occupancy.astype(bool)
    mixed = np.zeros_like(occ)
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.roll(occ, shift, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = 0 if shift == 1 else -1
            # grid outside is empty
            neighbor[tuple(edge)] = False
            mixed |= neighbor != occ
    return mixed


def sample_occupancy_points(
    grid: OccupancyGrid,
    K: int,
    seed: int,
    near_surface_fraction: float = 0.8,
    jitter_voxels: float = 0.5,
) -> OccupancySamples:
    if K <= 0:
        raise ValueError("K must be positive")
    rng = np.random.default_rng(seed)
    h = grid.voxel_size
    lo = grid.origin
    hi = grid.origin + grid.resolution * h

    near = np.argwhere(near_surface_mask(grid))
    n_near = int(round(K * near_surface_fraction)) if len(near) else 0
    chunks = []
    if n_near:
        pick = near[rng.integers(0, len(near), size=n_near)]
        centers = lo + (pick + 0.5) * h
        offsets = rng.uniform(-jitter_voxels, jitter_voxels, size=centers.shape) * h
        chunks.append(centers + offsets)
    chunks.append(rng.uniform(lo, hi, size=(K - n_near, 3)))
    points = np.concatenate(chunks, axis=0)
    points = np.clip(points, lo, np.nextafter(hi, lo))
    return OccupancySamples(points=points, labels=grid.lookup(points), resolution=grid.resolution)


def _face_normals(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    length = np.linalg.norm(cross, axis=1)
    areas = 0.5 * length
    normals = np.zeros_like(cross)
    nz = length > 0
    normals[nz] = cross[nz] / length[nz, None]
    return areas, normals


def sample_surface_with_faces(mesh: Mesh, n: int, seed: int) -> Tuple[SurfaceSamples, np.ndarray]:
    """Area-weighted uniform surface samples and the face each one came from."""
    if n <= 0:
        raise ValueError("n must be positive")
    if mesh.is_empty:
        raise DegenerateShapeError("mesh has no faces to sample")
    areas, normals = _face_normals(mesh.vertices, mesh.faces)
    total = float(areas.sum())
    if not total > 0:
        raise DegenerateShapeError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    tri = mesh.vertices[mesh.faces[face]]
    points = (1 - r1) * tri[:, 0] + r1 * (1 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    return SurfaceSamples(points=points, normals=normals[face]), face


def sample_surface_points(mesh: Mesh, n: int = 8192, seed: int = 0) -> SurfaceSamples:
    samples, _ = sample_surface_with_faces(mesh, n, seed)
    return samples


# --- neighborhoods -----------------------------------------------------------

def ball_query(points: np.ndarray, center_index: int, radius: float) -> np.ndarray:
    """Indices within the closed ball around points[center_index], center excluded."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    d = np.linalg.norm(points - points[center_index], axis=1)
    idx = np.flatnonzero(d <= radius)
    return idx[idx != center_index]


def ball_query_pairs(points: np.ndarray, radius: float) -> np.ndarray:
    """All unordered neighbor pairs (i < j) with distance <= radius, shape (P, 2)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def nearest_neighbor(query: np.ndarray, points: np.ndarray) -> Tuple[int, float]:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("nearest_neighbor needs at least one point")
    d2 = ((points - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    i = int(np.argmin(d2))  # first minimum, so ties go to the smallest index
    return i, float(math.sqrt(d2[i]))


def nearest_indices(queries: np.ndarray, points: np.ndarray, chunk: int = 1024) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized nearest_neighbor for many queries (same tie rule)."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("nearest_indices needs at least one point")
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        idx[start:start + chunk] = best
        dist[start:start + chunk] = np.sqrt(d2[np.arange(len(q)), best])
    return idx, dist


# --- iso-surfaces --------------------------------------------------------------

def marching_cubes(
    field: np.ndarray,
    iso: float,
    origin: float = 0.0,
    spacing: float = 1.0,
) -> Mesh:
    """Iso-surface of a scalar grid with the classic 256-case table.

    ``field[i, j, k]`` is the value at ``origin + (i, j, k) * spacing``. A
    field with no crossing yields an empty mesh.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or min(field.shape) < 2:
        raise ValueError("field must be a 3-D grid with at least 2 samples per axis")
    lo, hi = float(field.min()), float(field.max())
    if not (lo < iso < hi or (lo <= iso <= hi and lo < hi)):
        return Mesh.empty()
    try:
        verts, faces, _normals, _values = measure.marching_cubes(
            field, level=iso, spacing=(spacing, spacing, spacing), method="lorensen"
        )
    except (ValueError, RuntimeError):
        return Mesh.empty()
    faces = np.asarray(faces, dtype=np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(vertices=np.asarray(verts, dtype=np.float64) + origin, faces=faces[keep])


def trilinear(field: np.ndarray, points: np.ndarray, origin: float = 0.0, spacing: float = 1.0) -> np.ndarray:
    """Trilinear interpolation of a grid field at model-space points."""
    coords = (np.asarray(points, dtype=np.float64) - origin) / spacing
    return ndimage.map_coordinates(np.asarray(field, dtype=np.float64), coords.T, order=1, mode="nearest")


def grid_points(resolution: int, bound: float = GRID_BOUND) -> Tuple[np.ndarray, float, float]:
    """Voxel-center query points of an r^3 grid, flattened, with (origin, spacing) for marching_cubes."""
    h = 2.0 * bound / resolution
    axis = -bound + (np.arange(resolution) + 0.5) * h
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    return pts, float(axis[0]), h


def check_mesh(mesh: Mesh) -> Optional[str]:
    """Return a description of the first violated Mesh invariant, or None."""
    if mesh.vertices.ndim != 2 or mesh.vertices.shape[1] != 3:
        return "vertices must be (V, 3)"
    if not np.all(np.isfinite(mesh.vertices)):
        return "non-finite vertex coordinate"
    if len(mesh.faces):
        if mesh.faces.min() < 0 or mesh.faces.max() >= len(mesh.vertices):
            return "face index out of range"
        f = mesh.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            return "degenerate face"
    return None
