"""Metric suite and the evaluation run that assembles them into a report."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .config import EvaluationConfig, InferenceConfig
from .errors import DataError, UsageError
from .geometry import sample_surface_points
from .inference import correspond_arrays, embed_points, normalize_scores, reconstruct, shape_code
from .models import ScoreNormalizer, ShapeRecord
from .nets import ShapeCorrNet, occupancy
from .synthdata import PART_COMBINATIONS, gt_correspondence_batch

logger = logging.getLogger(__name__)


# --- metrics --------------------------------------------------------------------

def accuracy_curve(errors: Sequence[float], thresholds: Sequence[float]) -> List[Tuple[float, float]]:
    """Fraction of errors <= t for each threshold t."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValueError("accuracy_curve needs at least one error")
    if e[0] < 0:
        raise ValueError("errors must be nonnegative")
    return [(float(t), float(np.searchsorted(e, t, side="right")) / e.size) for t in thresholds]


def _candidate_masks(gt: np.ndarray, combinations: Sequence[Sequence[int]]):
    parts = [int(p) for p in np.unique(gt)]
    present = set(parts)
    candidates = [(p,) for p in parts]
    for combo in combinations:
        c = tuple(sorted({int(p) for p in combo}))
        if len(c) > 1 and set(c) <= present and c not in candidates:
            candidates.append(c)
    return parts, candidates, [np.isin(gt, c) for c in candidates]


def iou_matrix(pred: np.ndarray, gt: np.ndarray, combinations: Sequence[Sequence[int]] = ()):
    """IoU of every predicted label against every gt part and listed part combination."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError("predicted and ground-truth labels differ in length")
    labels = [int(v) for v in np.unique(pred)]
    parts, candidates, masks = _candidate_masks(gt, combinations)
    m = np.zeros((len(labels), len(candidates)))
    for i, label in enumerate(labels):
        pm = pred == label
        for j, cm in enumerate(masks):
            union = np.count_nonzero(pm | cm)
            m[i, j] = np.count_nonzero(pm & cm) / union if union else 0.0
    return labels, parts, candidates, m


def score_assignment(parts: Sequence[int], candidates, m: np.ndarray, rows, cols) -> float:
    """Mean over gt parts of the best IoU among assigned candidates that contain the part."""
    best = {p: 0.0 for p in parts}
    for r, c in zip(rows, cols):
        for p in candidates[c]:
            best[p] = max(best[p], float(m[r, c]))
    return float(np.mean([best[p] for p in parts]))


def modified_iou(pred: Sequence[int], gt: Sequence[int], combinations: Sequence[Sequence[int]] = ()) -> float:
    if len(gt) == 0:
        raise DataError("modified_iou needs at least one labeled point")
    _, parts, candidates, m = iou_matrix(np.asarray(pred), np.asarray(gt), combinations)
    # rows sorted by content; the assignment must not depend on label names
    m = m[np.lexsort(m.T[::-1])]
    rows, cols = linear_sum_assignment(m, maximize=True)
    return score_assignment(parts, candidates, m, rows, cols)


def chamfer_l1(S: np.ndarray, S_prime: np.ndarray) -> float:
    a = np.asarray(S, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(S_prime, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer_l1 needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> Tuple[List[Tuple[float, float]], float]:
    """ROC points (fpr, tpr) over a descending threshold sweep and trapezoid AUC.

    Tied scores enter the curve together, which gives them half credit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def uncertainty_values(o_log_var: np.ndarray) -> np.ndarray:
    """Per-point u = mean over k of sigma^2."""
    return np.exp(np.asarray(o_log_var, dtype=np.float64)).mean(axis=-1)


def uncertainty_stats(o_log_vars: Sequence[np.ndarray], bins: int = 20) -> Dict[str, Any]:
    parts = [uncertainty_values(v).reshape(-1) for v in o_log_vars]
    u = np.concatenate(parts) if parts else np.zeros(0)
    if u.size == 0:
        raise ValueError("uncertainty_stats needs at least one point")
    lo, hi = float(u.min()), float(u.max())
    if hi <= lo:
        hi = lo + 1e-9
    counts, edges = np.histogram(u, bins=bins, range=(lo, hi))
    q = np.quantile(u, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "count": int(u.size),
        "mean": float(u.mean()),
        "std": float(u.std()),
        "quantiles": {"p05": float(q[0]), "p25": float(q[1]), "p50": float(q[2]), "p75": float(q[3]), "p95": float(q[4])},
        "histogram": {"edges": edges.tolist(), "mass": (counts / u.size).tolist()},
    }


def one_hot_similarity(o_mu: np.ndarray) -> Dict[str, float]:
    """Cosine between each o_mu and the one-hot vector at its argmax; zero vectors are skipped."""
    mu = np.asarray(o_mu, dtype=np.float64).reshape(-1, np.shape(o_mu)[-1])
    if len(mu) == 0:
        raise ValueError("one_hot_similarity needs at least one embedding")
    norms = np.linalg.norm(mu, axis=1)
    keep = norms > 0
    cos = mu[keep].max(axis=1) / norms[keep]
    if cos.size == 0:
        return {"mean": 0.0, "std": 0.0, "count": 0, "skipped": int((~keep).sum())}
    return {"mean": float(cos.mean()), "std": float(cos.std()), "count": int(cos.size), "skipped": int((~keep).sum())}


def branch_usage(labels: Sequence[int], k: int, active_fraction: float = 0.01) -> Dict[str, Any]:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.size == 0:
        raise ValueError("branch_usage needs at least one label")
    fractions = np.bincount(lab, minlength=k)[:k] / lab.size
    active = [int(i) for i in np.flatnonzero(fractions > active_fraction)]
    return {"fractions": fractions.tolist(), "active": active, "num_active": len(active)}


def occupancy_accuracy(model: ShapeCorrNet, shapes: Sequence[ShapeRecord], resolution: int) -> float:
    """Share of occupancy samples classified correctly at threshold 0.5."""
    hits = total = 0
    for rec in shapes:
        occ = rec.occupancy.get(resolution)
        if occ is None:
            continue
        pev = embed_points(model, occ.points, shape_code(model, rec.surface))
        pred = occupancy(pev)[0].cpu().numpy() >= 0.5
        hits += int(np.count_nonzero(pred == occ.labels.astype(bool)))
        total += len(occ)
    if total == 0:
        raise DataError(f"no occupancy samples at resolution {resolution}")
    return hits / total


def self_recon_error(model: ShapeCorrNet, shapes: Sequence[ShapeRecord], max_points: int = 2048) -> float:
    """Mean |g(f(x, z), z) - x| over surface points."""
    errs = []
    for rec in shapes:
        pts = rec.surface.points[:max_points]
        z = shape_code(model, rec.surface)
        pev = embed_points(model, pts, z)
        with torch.no_grad():
            recon = model.decode(pev.o_mu[None], z[None])[0].cpu().numpy()
        errs.append(np.linalg.norm(recon - pts, axis=1))
    return float(np.mean(np.concatenate(errs)))


# --- protocol and report ------------------------------------------------------------

@dataclass
class Protocol:
    pairs: int = 20
    points_per_shape: int = 1024
    seed: int = 0
    held_out: List[str] = field(default_factory=list)
    reconstruct_shapes: int = 5
    reconstruct_points: int = 2048
    combinations: Dict[str, List[List[int]]] = field(default_factory=lambda: {k: [list(c) for c in v]
                                                                               for k, v in PART_COMBINATIONS.items()})


def load_protocol(path: Optional[str]) -> Protocol:
    if not path:
        return Protocol()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise UsageError(f"cannot read protocol {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse protocol {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    default = Protocol()
    proto = Protocol(
        pairs=int(data.get("pairs", default.pairs)),
        points_per_shape=int(data.get("points_per_shape", default.points_per_shape)),
        seed=int(data.get("seed", default.seed)),
        held_out=[str(s) for s in data.get("held_out", [])],
        reconstruct_shapes=int(data.get("reconstruct_shapes", default.reconstruct_shapes)),
        reconstruct_points=int(data.get("reconstruct_points", default.reconstruct_points)),
        combinations={str(k): [[int(p) for p in c] for c in v]
                      for k, v in (data.get("combinations") or default.combinations).items()},
    )
    if proto.pairs < 0:
        raise UsageError("pairs: must be >= 0")
    if proto.points_per_shape < 1:
        raise UsageError("points_per_shape: must be >= 1")
    return proto


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    stage: str
    accuracy_curve: List[Tuple[float, float]] = field(default_factory=list)
    accuracy_at_threshold: Optional[float] = None
    roc: List[Tuple[float, float]] = field(default_factory=list)
    auc: Optional[float] = None
    score_normalizer: Optional[Dict[str, float]] = None
    modified_iou: Dict[str, float] = field(default_factory=dict)
    chamfer_l1: Optional[float] = None
    empty_reconstructions: int = 0
    occupancy_accuracy: Optional[float] = None
    self_recon_error: Optional[float] = None
    uncertainty: Dict[str, Any] = field(default_factory=dict)
    one_hot: Dict[str, float] = field(default_factory=dict)
    branch_usage: Dict[str, Any] = field(default_factory=dict)
    pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _family(rec: ShapeRecord) -> str:
    return str((rec.params or {}).get("family", "unknown"))


def _pick_pairs(n: int, count: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    if n < 2 or count == 0:
        return []
    all_pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    if count >= len(all_pairs):
        return all_pairs
    pick = rng.choice(len(all_pairs), size=count, replace=False)
    return [all_pairs[i] for i in sorted(pick)]


def run_evaluation(
    model: ShapeCorrNet,
    shapes: Sequence[ShapeRecord],
    protocol: Protocol,
    eval_cfg: EvaluationConfig,
    inference_cfg: InferenceConfig,
    config_hash: str = "",
    stage: str = "",
) -> EvalReport:
    model.eval()
    if protocol.held_out:
        wanted = set(protocol.held_out)
        shapes = [s for s in shapes if s.shape_id in wanted]
    if not shapes:
        raise DataError("no shapes to evaluate")
    rng = np.random.default_rng(protocol.seed)
    report = EvalReport(config_hash=config_hash, seed=protocol.seed, stage=stage)
    chunk = inference_cfg.chunk_size

    subsets = [np.sort(rng.choice(len(s.surface), size=min(len(s.surface), protocol.points_per_shape),
                                  replace=False)) for s in shapes]

    # correspondence accuracy and non-existence detection
    errors: List[np.ndarray] = []
    scores: List[np.ndarray] = []
    exists_all: List[np.ndarray] = []
    synthetic = all(s.params is not None and s.part_labels is not None for s in shapes)
    pairs = _pick_pairs(len(shapes), protocol.pairs, rng) if synthetic else []
    for a, b in pairs:
        ra, rb = shapes[a], shapes[b]
        pa = ra.surface.points[subsets[a]]
        pb = rb.surface.points[subsets[b]]
        target, raw = correspond_arrays(model, pa, pb, chunk)
        gt, exists = gt_correspondence_batch(ra, rb, pa)
        errors.append(np.linalg.norm(pb[target][exists] - gt[exists], axis=1))
        scores.append(raw)
        exists_all.append(exists)
    report.pairs = len(pairs)
    if pairs:
        err = np.concatenate(errors)
        if err.size:
            report.accuracy_curve = accuracy_curve(err, eval_cfg.thresholds)
            report.accuracy_at_threshold = accuracy_curve(err, [eval_cfg.accuracy_threshold])[0][1]
        raw_all = np.concatenate(scores)
        _, normalizer = normalize_scores(raw_all)
        report.score_normalizer = normalizer.to_dict()
        labels = np.concatenate(exists_all)
        if labels.any() and not labels.all():
            report.roc, report.auc = roc_auc(normalizer.apply(raw_all), labels)

    # segmentation, embedding statistics
    by_family: Dict[str, Dict[str, list]] = {}
    all_mu = []
    for rec, idx in zip(shapes, subsets):
        pts = rec.surface.points[idx]
        pev = embed_points(model, pts, shape_code(model, rec.surface), chunk)
        mu = pev.o_mu.cpu().numpy()
        branch = occupancy(pev)[1].cpu().numpy()
        bucket = by_family.setdefault(_family(rec), {"log_var": [], "branch": [], "miou": []})
        bucket["log_var"].append(pev.o_log_var.cpu().numpy())
        bucket["branch"].append(branch)
        all_mu.append(mu)
        if rec.part_labels is not None:
            combos = protocol.combinations.get(_family(rec), [])
            bucket["miou"].append(modified_iou(branch, rec.part_labels[idx], combos))

    for fam, bucket in sorted(by_family.items()):
        if bucket["miou"]:
            report.modified_iou[fam] = float(np.mean(bucket["miou"]))
        report.uncertainty[fam] = uncertainty_stats(bucket["log_var"], eval_cfg.histogram_bins)
        report.branch_usage[fam] = branch_usage(np.concatenate(bucket["branch"]), model.k,
                                                eval_cfg.active_branch_fraction)
    report.one_hot = one_hot_similarity(np.concatenate(all_mu))

    # reconstruction quality
    cds = []
    for rec in shapes[:protocol.reconstruct_shapes]:
        mesh = reconstruct(model, rec.surface, inference_cfg.reconstruct_resolution, inference_cfg.iso, chunk)
        if mesh.is_empty:
            report.empty_reconstructions += 1
            continue
        samples = sample_surface_points(mesh, protocol.reconstruct_points, seed=protocol.seed)
        cds.append(chamfer_l1(samples.points, rec.surface.points))
    if cds:
        report.chamfer_l1 = float(np.mean(cds))

    finest = max(shapes[0].occupancy) if shapes[0].occupancy else None
    if finest is not None:
        report.occupancy_accuracy = occupancy_accuracy(model, shapes, finest)
    report.self_recon_error = self_recon_error(model, shapes)

    logger.info(
        "evaluated %d shapes, %d pairs: acc@%.2f=%s auc=%s cd_l1=%s",
        len(shapes), report.pairs, eval_cfg.accuracy_threshold,
        _fmt(report.accuracy_at_threshold), _fmt(report.auc), _fmt(report.chamfer_l1),
    )
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.4f}"


def write_report(out_dir: str, report: EvalReport) -> Dict[str, Path]:
    """report.json plus CSV curves; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json"}
    tmp = paths["report"].with_suffix(".json.tmp")
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(paths["report"])

    paths["accuracy_curve"] = out / "accuracy_curve.csv"
    _write_rows(paths["accuracy_curve"], ["threshold", "fraction"], report.accuracy_curve)
    paths["roc"] = out / "roc.csv"
    _write_rows(paths["roc"], ["fpr", "tpr"], report.roc)
    paths["branch_usage"] = out / "branch_usage.csv"
    rows = [(fam, i, f) for fam, usage in report.branch_usage.items() for i, f in enumerate(usage["fractions"])]
    _write_rows(paths["branch_usage"], ["category", "branch", "fraction"], rows)
    return paths


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def load_normalizer(report_path: str) -> Optional[ScoreNormalizer]:
    """The corpus-wide score normalizer persisted by an earlier evaluation run."""
    try:
        data = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read report {report_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt report {report_path}: {exc}") from exc
    raw = data.get("score_normalizer")
    return ScoreNormalizer.from_dict(raw) if raw else None
