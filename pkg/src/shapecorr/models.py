from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

# Normalized shapes live in the cube [-GRID_BOUND, GRID_BOUND]^3.
GRID_BOUND = 0.55


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray        # (V, 3) float64, model coordinates
    faces: np.ndarray           # (F, 3) int64 vertex indices

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @staticmethod
    def empty() -> "Mesh":
        return Mesh(np.zeros((0, 3), dtype=np.float64), np.zeros((0, 3), dtype=np.int64))


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray                  # (n, 3)
    normals: Optional[np.ndarray] = None  # (n, 3) unit vectors

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> "SurfaceSamples":
        normals = None if self.normals is None else self.normals[index]
        return SurfaceSamples(points=self.points[index], normals=normals)


@dataclass(frozen=True)
class OccupancyGrid:
    resolution: int
    occupancy: np.ndarray       # (r, r, r) uint8, indexed [x, y, z]
    origin: float = -GRID_BOUND  # model coordinate of the grid's lower corner (all axes)
    voxel_size: float = 2 * GRID_BOUND / 64

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        idx = self.voxel_index(points)
        return self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.uint8)

    def centers(self) -> np.ndarray:
        """(r, r, r, 3) voxel center coordinates."""
        axis = self.origin + (np.arange(self.resolution) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class OccupancySamples:
    points: np.ndarray          # (K, 3)
    labels: np.ndarray          # (K,) uint8 in {0, 1}
    resolution: int

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ShapeRecord:
    shape_id: str
    surface: SurfaceSamples
    occupancy: Dict[int, OccupancySamples] = field(default_factory=dict)
    mesh: Optional[Mesh] = None
    part_labels: Optional[np.ndarray] = None   # per surface point, synthetic shapes only
    params: Optional[Dict[str, Any]] = None    # generator parameters (theta), synthetic shapes only
    seed: int = 0


@dataclass(frozen=True)
class LossWeights:
    cd: float = 10.0        # lambda_1
    emd: float = 1.0        # lambda_2
    normal: float = 0.01    # lambda_3
    smooth: float = 0.1     # lambda_4


@dataclass(frozen=True)
class CorrespondenceResult:
    source_index: int
    target_index: Optional[int]     # None when the point has no counterpart
    raw_score: float
    confidence: float               # normalized to [0, 1]
    valid: bool


@dataclass(frozen=True)
class ScoreNormalizer:
    minimum: float
    maximum: float

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        span = self.maximum - self.minimum
        if span <= 0:
            return np.full(raw.shape, 0.5)
        return np.clip((raw - self.minimum) / span, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum}

    @staticmethod
    def from_dict(data: dict) -> "ScoreNormalizer":
        return ScoreNormalizer(minimum=float(data["min"]), maximum=float(data["max"]))
