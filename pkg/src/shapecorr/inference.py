"""Read-only uses of a trained network.

Inference always works with the mean embedding o_mu; nothing here samples.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DataError
from .geometry import grid_points, marching_cubes, nearest_indices
from .models import GRID_BOUND, CorrespondenceResult, Mesh, ScoreNormalizer, SurfaceSamples
from .nets import PartEmbedding, ShapeCorrNet, as_tensor, encode, occupancy

logger = logging.getLogger(__name__)

CORRESPONDENCE_COLUMNS = ["src_index", "tgt_index", "raw_score", "confidence", "valid"]


def _points(S: Any) -> np.ndarray:
    pts = S.points if isinstance(S, SurfaceSamples) else S
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DataError("shape has no points")
    return pts


def embed_points(model: ShapeCorrNet, points: np.ndarray, z: torch.Tensor, chunk: int = 16384) -> PartEmbedding:
    mus, log_vars = [], []
    with torch.no_grad():
        for start in range(0, len(points), chunk):
            x = as_tensor(model, points[start:start + chunk])
            pev = model.embed(x[None], z[None])[0]
            mus.append(pev.o_mu)
            log_vars.append(pev.o_log_var)
    return PartEmbedding(torch.cat(mus), torch.cat(log_vars))


def shape_code(model: ShapeCorrNet, S: Any) -> torch.Tensor:
    with torch.no_grad():
        return encode(model, _points(S))


def _decode(model: ShapeCorrNet, o: torch.Tensor, z: torch.Tensor, chunk: int = 16384) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(o), chunk):
            out.append(model.decode(o[start:start + chunk][None], z[None])[0])
    return torch.cat(out).cpu().numpy().astype(np.float64)


# --- confidence ------------------------------------------------------------------

def confidence_raw(pev_a: PartEmbedding, pev_b: PartEmbedding) -> np.ndarray:
    """Mutual likelihood score -sum_l [dmu^2 / (s_a + s_b) + log(s_a + s_b)] over the last axis."""
    mu_a = pev_a.o_mu.detach().cpu().numpy().astype(np.float64)
    mu_b = pev_b.o_mu.detach().cpu().numpy().astype(np.float64)
    if mu_a.shape[-1] != mu_b.shape[-1]:
        raise DataError("embeddings differ in dimension")
    var = (np.exp(pev_a.o_log_var.detach().cpu().numpy().astype(np.float64))
           + np.exp(pev_b.o_log_var.detach().cpu().numpy().astype(np.float64)))
    return -np.sum((mu_a - mu_b) ** 2 / var + np.log(var), axis=-1)


def normalize_scores(raw: Sequence[float]) -> Tuple[np.ndarray, ScoreNormalizer]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("normalize_scores needs at least one score")
    normalizer = ScoreNormalizer(minimum=float(raw.min()), maximum=float(raw.max()))
    return normalizer.apply(raw), normalizer


# --- correspondence ------------------------------------------------------------------

def correspond_arrays(model: ShapeCorrNet, S_A: Any, S_B: Any, chunk: int = 16384) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-reconstruction target index and raw confidence for every point of S_A."""
    pa, pb = _points(S_A), _points(S_B)
    z_a, z_b = shape_code(model, pa), shape_code(model, pb)
    pev_a = embed_points(model, pa, z_a, chunk)
    pev_b = embed_points(model, pb, z_b, chunk)
    # B's embeddings decoded under A's code; index j of recon stays index j of S_B
    recon = _decode(model, pev_b.o_mu, z_a, chunk)
    target, _ = nearest_indices(pa, recon)
    raw = confidence_raw(pev_a, pev_b[torch.as_tensor(target)])
    return target, raw


def correspond(
    model: ShapeCorrNet,
    S_A: Any,
    S_B: Any,
    tau: float = 0.2,
    normalizer: Optional[ScoreNormalizer] = None,
    chunk: int = 16384,
) -> List[CorrespondenceResult]:
    """Dense correspondence S_A -> S_B with non-existence detection.

    Scores are min-max normalized over this pair unless a corpus-wide
    ``normalizer`` is given. A point is valid when its confidence exceeds tau.
    """
    target, raw = correspond_arrays(model, S_A, S_B, chunk)
    if normalizer is None:
        conf, _ = normalize_scores(raw)
    else:
        conf = normalizer.apply(raw)
    results = []
    for i, (j, r, c) in enumerate(zip(target, raw, conf)):
        valid = bool(c > tau)
        results.append(CorrespondenceResult(
            source_index=i,
            target_index=int(j) if valid else None,
            raw_score=float(r),
            confidence=float(c),
            valid=valid,
        ))
    return results


def write_correspondences_csv(path: str, results: Sequence[CorrespondenceResult]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CORRESPONDENCE_COLUMNS)
        for r in results:
            writer.writerow([
                r.source_index,
                -1 if r.target_index is None else r.target_index,
                f"{r.raw_score:.9g}",
                f"{r.confidence:.9g}",
                int(r.valid),
            ])


def read_correspondences_csv(path: str) -> List[CorrespondenceResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tgt = int(row["tgt_index"])
            out.append(CorrespondenceResult(
                source_index=int(row["src_index"]),
                target_index=None if tgt < 0 else tgt,
                raw_score=float(row["raw_score"]),
                confidence=float(row["confidence"]),
                valid=row["valid"] == "1",
            ))
    return out


# --- segmentation / reconstruction ----------------------------------------------------

def segment(model: ShapeCorrNet, S: Any, chunk: int = 16384) -> np.ndarray:
    """Per-point branch label: argmax of o_mu, first index on ties."""
    pts = _points(S)
    pev = embed_points(model, pts, shape_code(model, pts), chunk)
    _, branch = occupancy(pev)
    return branch.cpu().numpy().astype(np.int64)


def occupancy_field(model: ShapeCorrNet, z: torch.Tensor, resolution: int, chunk: int = 16384):
    pts, origin, spacing = grid_points(resolution, GRID_BOUND)
    pev = embed_points(model, pts, z, chunk)
    occ, _ = occupancy(pev)
    field = occ.cpu().numpy().astype(np.float64).reshape(resolution, resolution, resolution)
    return field, origin, spacing


def reconstruct(model: ShapeCorrNet, S: Any, resolution: int = 64, iso: float = 0.5, chunk: int = 16384) -> Mesh:
    field, origin, spacing = occupancy_field(model, shape_code(model, S), resolution, chunk)
    mesh = marching_cubes(field, iso, origin=origin, spacing=spacing)
    if mesh.is_empty:
        logger.info("reconstruction at %d^3 has no %.2f crossing; returning an empty mesh", resolution, iso)
    return mesh


# --- latent-space operations ----------------------------------------------------------

def interpolate(model: ShapeCorrNet, S_A: Any, S_B: Any, alpha: float, chunk: int = 16384) -> np.ndarray:
    """g(o_mu(A), alpha z_A + (1 - alpha) z_B); row i follows point i of S_A."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    pa = _points(S_A)
    z_a, z_b = shape_code(model, pa), shape_code(model, S_B)
    pev_a = embed_points(model, pa, z_a, chunk)
    return _decode(model, pev_a.o_mu, alpha * z_a + (1.0 - alpha) * z_b, chunk)


def cross_reconstruct(model: ShapeCorrNet, S_A: Any, S_B: Any, chunk: int = 16384):
    """Swapped reconstructions (g(o_B, z_A), g(o_A, z_B)) and the mean variance of each fed PEV."""
    pa, pb = _points(S_A), _points(S_B)
    z_a, z_b = shape_code(model, pa), shape_code(model, pb)
    pev_a = embed_points(model, pa, z_a, chunk)
    pev_b = embed_points(model, pb, z_b, chunk)
    recon_a = _decode(model, pev_b.o_mu, z_a, chunk)
    recon_b = _decode(model, pev_a.o_mu, z_b, chunk)
    u_a = pev_b.mean_variance.cpu().numpy().astype(np.float64)
    u_b = pev_a.mean_variance.cpu().numpy().astype(np.float64)
    return recon_a, recon_b, u_a, u_b


def transfer_attribute(
    model: ShapeCorrNet,
    S_A: Any,
    attributes: Sequence[Any],
    S_B: Any,
    tau: float = 0.2,
    chunk: int = 16384,
) -> List[Optional[Any]]:
    """Pull each point of S_B's attribute from its valid counterpart on S_A (None otherwise)."""
    if len(attributes) != len(_points(S_A)):
        raise DataError("need exactly one attribute per point of the source shape")
    results = correspond(model, S_B, S_A, tau, chunk=chunk)
    return [attributes[r.target_index] if r.valid else None for r in results]


# --- embedding export --------------------------------------------------------------

def export_embeddings(
    model: ShapeCorrNet, S: Any, labels: Optional[Sequence[int]] = None, chunk: int = 16384
) -> Dict[str, np.ndarray]:
    pts = _points(S)
    if labels is not None and len(labels) != len(pts):
        raise DataError("need exactly one label per point")
    pev = embed_points(model, pts, shape_code(model, pts), chunk)
    table = {
        "o_mu": pev.o_mu.cpu().numpy(),
        "o_log_var": pev.o_log_var.cpu().numpy(),
    }
    if labels is not None:
        table["label"] = np.asarray(labels, dtype=np.int64)
    return table


def write_embeddings_csv(path: str, table: Dict[str, np.ndarray]) -> None:
    mu, log_var = table["o_mu"], table["o_log_var"]
    k = mu.shape[1]
    labels = table.get("label")
    header = ["index"] + (["label"] if labels is not None else [])
    header += [f"mu_{i}" for i in range(k)] + [f"log_var_{i}" for i in range(k)]
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(mu)):
            row = [i] + ([int(labels[i])] if labels is not None else [])
            # 9 significant digits round-trip float32 exactly
            row += [f"{v:.9g}" for v in mu[i]] + [f"{v:.9g}" for v in log_var[i]]
            writer.writerow(row)


def read_embeddings_csv(path: str) -> Dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    k = sum(1 for h in header if h.startswith("mu_"))
    has_label = "label" in header
    first = 2 if has_label else 1
    data = np.array([[float(v) for v in r[first:]] for r in rows], dtype=np.float64).reshape(len(rows), 2 * k)
    table = {
        "o_mu": data[:, :k].astype(np.float32),
        "o_log_var": data[:, k:].astype(np.float32),
    }
    if has_label:
        table["label"] = np.array([int(r[1]) for r in rows], dtype=np.int64)
    return table


def write_points_csv(path: str, points: np.ndarray, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    extra = extra or {}
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "x", "y", "z", *extra])
        for i, (x, y, z) in enumerate(points):
            writer.writerow([i, f"{x:.9g}", f"{y:.9g}", f"{z:.9g}", *(f"{v[i]:.9g}" for v in extra.values())])
