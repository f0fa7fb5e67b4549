"""Procedural chair/table families with closed-form correspondence.

Every shape is a union of axis-aligned boxes (z up, front towards -y).
Because each box has a name that every member of the family shares, the
ground-truth correspondence between two shapes is the map between
part-local box coordinates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .config import DEFAULT_POINTS_PER_RESOLUTION, DEFAULT_RESOLUTIONS
from .errors import DataError, UsageError
from .archive import prepare_record
from .geometry import nearest_indices, normalize_shape
from .models import Mesh, ShapeRecord

logger = logging.getLogger(__name__)

FAMILIES = ("chair", "table")

PART_NAMES = {
    "chair": {0: "seat", 1: "back", 2: "leg", 3: "arm"},
    "table": {0: "top", 1: "leg"},
}

# Unions of ground-truth parts an unsupervised segmentation may legitimately merge.
PART_COMBINATIONS = {
    "chair": [[0, 1], [0, 3], [1, 3], [0, 1, 3]],
    "table": [],
}

# Surface-proximity tolerance for oracle queries.
SURFACE_TOLERANCE = 0.02

_RANGE_FIELDS = (
    "seat_width", "seat_depth", "seat_height", "seat_thickness", "leg_thickness",
    "back_height", "back_thickness", "arm_height", "arm_thickness",
)

_DEFAULT_RANGES = {
    "chair": {
        "seat_width": (0.40, 0.60),
        "seat_depth": (0.40, 0.60),
        "seat_height": (0.35, 0.50),
        "seat_thickness": (0.04, 0.08),
        "leg_thickness": (0.04, 0.07),
        "back_height": (0.30, 0.50),
        "back_thickness": (0.04, 0.07),
        "arm_height": (0.12, 0.20),
        "arm_thickness": (0.04, 0.07),
    },
    "table": {
        "seat_width": (0.80, 1.20),
        "seat_depth": (0.50, 0.80),
        "seat_height": (0.55, 0.75),
        "seat_thickness": (0.04, 0.08),
        "leg_thickness": (0.05, 0.09),
        "back_height": (0.0, 0.0),
        "back_thickness": (0.0, 0.0),
        "arm_height": (0.0, 0.0),
        "arm_thickness": (0.0, 0.0),
    },
}

# Box corners are indexed x + 2y + 4z; quads are wound so normals point outward.
_QUADS = {
    "-x": (0, 4, 6, 2),
    "+x": (1, 3, 7, 5),
    "-y": (0, 1, 5, 4),
    "+y": (2, 6, 7, 3),
    "-z": (0, 2, 3, 1),
    "+z": (4, 5, 7, 6),
}


@dataclass
class FamilySpec:
    family: str = "chair"
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    arm_probability: float = 0.5
    count: int = 200
    seed: int = 0
    noise_sigma: float = 0.0
    target_diag: float = 1.0
    surface_points: int = 8192
    resolutions: List[int] = field(default_factory=lambda: list(DEFAULT_RESOLUTIONS))
    points_per_resolution: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_POINTS_PER_RESOLUTION))

    def __post_init__(self) -> None:
        merged = dict(_DEFAULT_RANGES.get(self.family, _DEFAULT_RANGES["chair"]))
        merged.update({k: (float(v[0]), float(v[1])) for k, v in self.ranges.items()})
        self.ranges = merged

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise UsageError(f"family: unknown family '{self.family}' (expected chair or table)")
        if self.count < 1:
            raise UsageError("count: must be >= 1")
        if not 0.0 <= self.arm_probability <= 1.0:
            raise UsageError("arm_probability: must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise UsageError("noise_sigma: must be >= 0")
        if self.surface_points < 1:
            raise UsageError("surface_points: must be >= 1")
        if self.target_diag <= 0:
            raise UsageError("target_diag: must be > 0")
        for name in self.ranges:
            if name not in _RANGE_FIELDS:
                raise UsageError(f"ranges.{name}: unknown parameter")
        used = _RANGE_FIELDS if self.family == "chair" else _RANGE_FIELDS[:5]
        for name in used:
            lo, hi = self.ranges[name]
            if not (lo > 0 and hi >= lo):
                raise UsageError(f"ranges.{name}: need 0 < lo <= hi, got ({lo}, {hi})")
        for r in self.resolutions:
            if r < 4:
                raise UsageError("resolutions: every resolution must be >= 4")
            if self.points_per_resolution.get(r, 0) < 1:
                raise UsageError(f"points_per_resolution: missing count for resolution {r}")


def load_family_spec(path: str) -> FamilySpec:
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise UsageError(f"cannot read family spec {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse family spec {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")

    raw_ranges = data.get("ranges", {}) or {}
    ranges = {}
    for name, value in raw_ranges.items():
        try:
            lo, hi = value
            ranges[str(name)] = (float(lo), float(hi))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"ranges.{name}: expected [lo, hi]") from exc
    try:
        spec = FamilySpec(
            family=str(data.get("family", "chair")).strip().lower(),
            ranges=ranges,
            arm_probability=float(data.get("arm_probability", 0.5)),
            count=int(data.get("count", 200)),
            seed=int(data.get("seed", 0)),
            noise_sigma=float(data.get("noise_sigma", 0.0)),
            target_diag=float(data.get("target_diag", 1.0)),
            surface_points=int(data.get("surface_points", 8192)),
            resolutions=[int(r) for r in data.get("resolutions", DEFAULT_RESOLUTIONS)],
            points_per_resolution={
                int(k): int(v)
                for k, v in (data.get("points_per_resolution") or DEFAULT_POINTS_PER_RESOLUTION).items()
            },
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    spec.validate()
    return spec


# --- geometry of one shape ----------------------------------------------------

@dataclass(frozen=True)
class PartBox:
    name: str
    part: int
    lo: np.ndarray
    hi: np.ndarray
    omit: Tuple[str, ...] = ()

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def half(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def outside_distance(self, p: np.ndarray) -> float:
        d = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        return float(np.linalg.norm(d))


def sample_params(spec: FamilySpec, index: int) -> Dict[str, Any]:
    rng = np.random.default_rng([spec.seed, index])
    params: Dict[str, Any] = {"family": spec.family, "index": index, "target_diag": spec.target_diag}
    for name in _RANGE_FIELDS:
        lo, hi = spec.ranges[name]
        params[name] = float(rng.uniform(lo, hi))
    params["has_arms"] = spec.family == "chair" and bool(rng.random() < spec.arm_probability)
    return params


def _raw_boxes(params: Dict[str, Any]) -> List[PartBox]:
    w, d = params["seat_width"], params["seat_depth"]
    h, ts, tl = params["seat_height"], params["seat_thickness"], params["leg_thickness"]
    chair = params["family"] == "chair"
    leg_part = 2 if chair else 1

    def box(name, part, lo, hi, omit=()):
        return PartBox(name, part, np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64), tuple(omit))

    top = h + ts
    boxes = [
        box("seat" if chair else "top", 0, (-w / 2, -d / 2, h), (w / 2, d / 2, top)),
        box("leg_fl", leg_part, (-w / 2, -d / 2, 0), (-w / 2 + tl, -d / 2 + tl, h), ("+z",)),
        box("leg_fr", leg_part, (w / 2 - tl, -d / 2, 0), (w / 2, -d / 2 + tl, h), ("+z",)),
        box("leg_bl", leg_part, (-w / 2, d / 2 - tl, 0), (-w / 2 + tl, d / 2, h), ("+z",)),
        box("leg_br", leg_part, (w / 2 - tl, d / 2 - tl, 0), (w / 2, d / 2, h), ("+z",)),
    ]
    if chair:
        hb, tb = params["back_height"], params["back_thickness"]
        boxes.append(box("back", 1, (-w / 2, d / 2 - tb, top), (w / 2, d / 2, top + hb), ("-z",)))
        if params.get("has_arms"):
            ha, ta = params["arm_height"], params["arm_thickness"]
            boxes.append(box("arm_l", 3, (-w / 2, -d / 2, top), (-w / 2 + ta, d / 2 - tb, top + ha), ("-z", "+y")))
            boxes.append(box("arm_r", 3, (w / 2 - ta, -d / 2, top), (w / 2, d / 2 - tb, top + ha), ("-z", "+y")))
    return boxes


def _normalization(boxes: List[PartBox], target_diag: float) -> Tuple[np.ndarray, float]:
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return (lo + hi) / 2.0, target_diag / float(np.linalg.norm(hi - lo))


def part_boxes(params: Dict[str, Any]) -> Dict[str, PartBox]:
    """The shape's boxes in normalized coordinates, keyed by box name."""
    raw = _raw_boxes(params)
    center, scale = _normalization(raw, float(params.get("target_diag", 1.0)))
    return {
        b.name: PartBox(b.name, b.part, (b.lo - center) * scale, (b.hi - center) * scale, b.omit)
        for b in raw
    }


def build_mesh(params: Dict[str, Any]) -> Tuple[Mesh, np.ndarray]:
    """Normalized box-union mesh and the part id of every face."""
    vertices, faces, face_parts = [], [], []
    for b in _raw_boxes(params):
        base = len(vertices)
        for i in range(8):
            vertices.append([
                b.hi[0] if i & 1 else b.lo[0],
                b.hi[1] if i & 2 else b.lo[1],
                b.hi[2] if i & 4 else b.lo[2],
            ])
        for side, (a, bb, c, dd) in _QUADS.items():
            if side in b.omit:
                continue
            faces.append([base + a, base + bb, base + c])
            faces.append([base + a, base + c, base + dd])
            face_parts += [b.part, b.part]
    raw = Mesh(vertices=np.asarray(vertices, dtype=np.float64), faces=np.asarray(faces, dtype=np.int64))
    return normalize_shape(raw, float(params.get("target_diag", 1.0))), np.asarray(face_parts, dtype=np.int64)


def make_record(
    params: Dict[str, Any],
    surface_points: int,
    resolutions: List[int],
    points_per_resolution: Dict[int, int],
    seed: int,
    noise_sigma: float = 0.0,
) -> ShapeRecord:
    mesh, face_parts = build_mesh(params)
    shape_id = f"{params['family']}_{int(params['index']):04d}"
    record, face = prepare_record(
        mesh, shape_id, surface_points, resolutions, points_per_resolution, seed, noise_sigma=noise_sigma
    )
    record.part_labels = face_parts[face]
    record.params = params
    return record


def generate_family(spec: FamilySpec) -> List[ShapeRecord]:
    spec.validate()
    records = []
    for index in range(spec.count):
        params = sample_params(spec, index)
        shape_seed = int(np.random.default_rng([spec.seed, index, 1]).integers(0, 2**31 - 1))
        records.append(make_record(
            params,
            spec.surface_points,
            spec.resolutions,
            spec.points_per_resolution,
            shape_seed,
            spec.noise_sigma,
        ))
    with_arms = sum(1 for r in records if r.params and r.params.get("has_arms"))
    logger.info("generated %d %s shapes (%d with arms)", len(records), spec.family, with_arms)
    return records


# --- ground-truth correspondence ----------------------------------------------

def _locate(rec: ShapeRecord, p: np.ndarray, label: int) -> PartBox:
    boxes = [b for b in part_boxes(rec.params).values() if b.part == label]
    if not boxes:
        raise DataError(f"{rec.shape_id}: no box carries part label {label}")
    return min(boxes, key=lambda b: b.outside_distance(p))


def gt_correspondence_batch(
    recA: ShapeRecord, recB: ShapeRecord, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Map points on A to B. Returns (mapped (n, 3), exists (n,) bool)."""
    if recA.params is None or recB.params is None or recA.part_labels is None:
        raise DataError("ground-truth correspondence needs synthetic shapes with params and part labels")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx, dist = nearest_indices(points, recA.surface.points)
    far = dist > SURFACE_TOLERANCE
    if far.any():
        raise DataError(
            f"{int(far.sum())} query points are farther than {SURFACE_TOLERANCE} from {recA.shape_id}'s surface"
        )
    boxes_b = part_boxes(recB.params)
    mapped = np.zeros_like(points)
    exists = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        box_a = _locate(recA, p, int(recA.part_labels[idx[i]]))
        box_b = boxes_b.get(box_a.name)
        if box_b is None:
            continue
        local = (p - box_a.center) / box_a.half
        mapped[i] = box_b.center + local * box_b.half
        exists[i] = True
    return mapped, exists


def gt_correspondence(recA: ShapeRecord, recB: ShapeRecord, p: np.ndarray) -> Optional[np.ndarray]:
    """Counterpart of p (a point on A) on B, or None when B lacks the part."""
    mapped, exists = gt_correspondence_batch(recA, recB, np.asarray(p)[None, :])
    return mapped[0] if exists[0] else None
