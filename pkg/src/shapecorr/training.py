"""Three-stage trainer.

Stage 1 fits E and f to occupancy, progressively over the voxel resolutions.
Stage 2 adds g and the self-reconstruction loss at the finest resolution.
Stage 3 adds cross-reconstruction between randomly drawn shape pairs.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .config import TrainingConfig
from .errors import DataError, NonFiniteLossError
from .losses import (
    build_cross_batch,
    cross_recon_terms,
    occupancy_loss,
    self_recon_loss,
    subsample_index,
    total_loss,
    weighted_sum,
)
from .models import ShapeRecord
from .nets import ShapeCorrNet, sample_embedding

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "stage", "resolution", "occ", "sr", "cd", "emd", "normal", "smooth", "total"]
STAGES = ("1", "2", "3")


@dataclass
class _ShapeTensors:
    surface: Tensor
    normals: Optional[Tensor]
    occ_points: Dict[int, Tensor]
    occ_labels: Dict[int, Tensor]


class Trainer:
    def __init__(
        self,
        model: ShapeCorrNet,
        shapes: Sequence[ShapeRecord],
        config: TrainingConfig,
        step: int = 0,
    ) -> None:
        if not shapes:
            raise DataError("training needs at least one shape")
        self.model = model
        self.shapes = list(shapes)
        self.config = config
        self.step = int(step)
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(int(config.seed))
        self.data = [self._tensors(s) for s in self.shapes]

    def _tensors(self, shape: ShapeRecord) -> _ShapeTensors:
        dtype, device = self.model.dtype, self.model.device

        def t(a):
            return torch.as_tensor(np.asarray(a), dtype=dtype, device=device)

        normals = None if shape.surface.normals is None else t(shape.surface.normals)
        return _ShapeTensors(
            surface=t(shape.surface.points),
            normals=normals,
            occ_points={r: t(o.points) for r, o in shape.occupancy.items()},
            occ_labels={r: t(o.labels) for r, o in shape.occupancy.items()},
        )

    # --- bookkeeping --------------------------------------------------------

    def _check_finite(self, values: Dict[str, Tensor]) -> None:
        for name, value in values.items():
            if not torch.isfinite(value).all():
                raise NonFiniteLossError(name, self.step)

    def _record(self, stage: str, resolution: int, values: Dict[str, Tensor], last: bool) -> None:
        """Append one metrics row per step; log_every only paces the console."""
        row = {k: float(values[k].detach()) if k in values else 0.0 for k in METRIC_COLUMNS[3:]}
        every = max(1, self.config.log_every)
        if last or self.step % every == 0:
            logger.info(
                "stage=%s step=%d res=%d total=%.6g occ=%.6g sr=%.6g cd=%.6g emd=%.6g",
                stage, self.step, resolution, row["total"], row["occ"], row["sr"], row["cd"], row["emd"],
            )
        if not self.config.metrics_path:
            return
        p = Path(self.config.metrics_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        new = not p.exists() or p.stat().st_size == 0
        with open(p, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(METRIC_COLUMNS)
            writer.writerow([self.step, stage, resolution] + [f"{row[k]:.9g}" for k in METRIC_COLUMNS[3:]])

    def _maybe_checkpoint(self, stage: str, stage_step: int, completed: bool = False) -> None:
        path = self.config.checkpoint_path
        if not path:
            return
        every = self.config.checkpoint_every
        if completed or (every > 0 and self.step % every == 0):
            save_checkpoint(
                self.model, path, step=self.step, stage=stage,
                extra={"stage_step": stage_step, "completed": completed},
            )

    def _optimizer(self, params) -> torch.optim.Optimizer:
        c = self.config
        return torch.optim.Adam(params, lr=c.learning_rate, betas=tuple(c.betas), eps=c.eps)

    # --- batches ------------------------------------------------------------

    def _pick_shapes(self) -> np.ndarray:
        n = len(self.data)
        b = min(self.config.shapes_per_step, n)
        return np.sort(self.rng.choice(n, size=b, replace=False))

    def _codes(self, idx: Sequence[int]) -> Tensor:
        return torch.stack([self.model.encoder(self.data[i].surface[None])[0] for i in idx])

    def _occupancy_term(self, idx: Sequence[int], z: Tensor, resolution: int) -> Tensor:
        xs, ys = [], []
        for i in idx:
            pts = self.data[i].occ_points[resolution]
            pick = torch.as_tensor(self.rng.integers(0, len(pts), size=self.config.occupancy_points_per_shape))
            xs.append(pts[pick])
            ys.append(self.data[i].occ_labels[resolution][pick])
        pev = self.model.embed(torch.stack(xs), z)
        return occupancy_loss(pev, torch.stack(ys))

    def _self_recon_term(self, idx: Sequence[int], z: Tensor) -> Tensor:
        xs = []
        for i in idx:
            surf = self.data[i].surface
            pick = torch.as_tensor(self.rng.integers(0, len(surf), size=self.config.self_recon_points_per_shape))
            xs.append(surf[pick])
        x = torch.stack(xs)
        pev = self.model.embed(x, z)
        eps = torch.randn(pev.o_mu.shape, generator=self.gen, dtype=pev.o_mu.dtype).to(pev.o_mu.device)
        recon = self.model.decode(sample_embedding(pev, eps), z)
        return self_recon_loss(recon, x, pev.o_log_var)

    def _cross_terms(self, a: int, b: int, z_a: Tensor, z_b: Tensor) -> Dict[str, Tensor]:
        loss_cfg = self.config.loss
        limit = min(self.config.cross_points_per_shape, loss_cfg.emd_max_points)
        da, db = self.data[a], self.data[b]
        n = min(len(da.surface), len(db.surface), limit)
        ia = torch.as_tensor(subsample_index(len(da.surface), n, self.rng))
        ib = torch.as_tensor(subsample_index(len(db.surface), n, self.rng))
        k = self.model.k
        eps_a = torch.randn((n, k), generator=self.gen, dtype=self.model.dtype).to(self.model.device)
        eps_b = torch.randn((n, k), generator=self.gen, dtype=self.model.dtype).to(self.model.device)
        with_normals = loss_cfg.weights.normal > 0
        if with_normals and (da.normals is None or db.normals is None):
            raise DataError("normal loss needs surface normals in the archive")
        batch = build_cross_batch(
            self.model,
            da.surface[ia], db.surface[ib], z_a, z_b,
            normals_a=None if da.normals is None else da.normals[ia],
            normals_b=None if db.normals is None else db.normals[ib],
            eps_a=eps_a, eps_b=eps_b,
            with_normals=with_normals,
        )
        return cross_recon_terms(batch, loss_cfg.weights, loss_cfg.ball_radius)

    def _apply(self, opt: torch.optim.Optimizer, loss: Tensor) -> None:
        opt.zero_grad()
        loss.backward()
        opt.step()
        self.step += 1

    # --- stages -------------------------------------------------------------

    def _require_resolution(self, resolution: int) -> None:
        missing = [s.shape_id for s, d in zip(self.shapes, self.data) if resolution not in d.occ_points]
        if missing:
            raise DataError(f"{len(missing)} shapes lack occupancy samples at resolution {resolution} "
                            f"(first: {missing[0]})")

    @property
    def final_resolution(self) -> int:
        return max(self.config.stage1_iterations) if self.config.stage1_iterations else 64

    def train_stage1(self, start: int = 0) -> ShapeCorrNet:
        schedule = [(r, n) for r, n in sorted(self.config.stage1_iterations.items()) if n > 0]
        for r, _ in schedule:
            self._require_resolution(r)
        if not schedule:
            return self.model
        self.model.train()
        opt = self._optimizer(self.model.occupancy_parameters())
        w = self.config.loss.weight_occupancy
        done = 0
        total = sum(n for _, n in schedule)
        for r, n in schedule:
            logger.info("stage 1: %d iterations at %d^3", n, r)
            for _ in range(n):
                if done < start:
                    done += 1
                    continue
                idx = self._pick_shapes()
                occ = self._occupancy_term(idx, self._codes(idx), r)
                values = {"occ": occ, "total": total_loss(occ, 0.0, 0.0, (w, 1.0, 1.0))}
                self._check_finite(values)
                self._apply(opt, values["total"])
                done += 1
                self._record("1", r, values, last=done == total)
                self._maybe_checkpoint("1", done)
        self._maybe_checkpoint("1", done, completed=True)
        return self.model

    def train_stage2(self, start: int = 0) -> ShapeCorrNet:
        n = self.config.stage2_iterations
        if n <= 0:
            return self.model
        r = self.final_resolution
        self._require_resolution(r)
        self.model.train()
        opt = self._optimizer(self.model.parameters())
        c = self.config.loss
        logger.info("stage 2: %d iterations at %d^3", n, r)
        for done in range(start, n):
            idx = self._pick_shapes()
            z = self._codes(idx)
            occ = self._occupancy_term(idx, z, r)
            sr = self._self_recon_term(idx, z)
            values = {"occ": occ, "sr": sr,
                      "total": total_loss(occ, sr, 0.0, (c.weight_occupancy, c.weight_self_recon, 1.0))}
            self._check_finite(values)
            self._apply(opt, values["total"])
            self._record("2", r, values, last=done + 1 == n)
            self._maybe_checkpoint("2", done + 1)
        self._maybe_checkpoint("2", n, completed=True)
        return self.model

    def train_stage3(self, start: int = 0) -> ShapeCorrNet:
        n = self.config.stage3_iterations
        if n <= 0:
            return self.model
        if len(self.data) < 2:
            raise DataError("stage 3 needs at least two shapes to form pairs")
        r = self.final_resolution
        self._require_resolution(r)
        self.model.train()
        opt = self._optimizer(self.model.parameters())
        c = self.config.loss
        logger.info("stage 3: %d iterations on shape pairs", n)
        for done in range(start, n):
            a, b = (int(i) for i in self.rng.choice(len(self.data), size=2, replace=False))
            idx = [a, b]
            z = self._codes(idx)
            occ = self._occupancy_term(idx, z, r)
            sr = self._self_recon_term(idx, z)
            terms = self._cross_terms(a, b, z[0], z[1])
            cr = weighted_sum(terms, c.weights)
            values = {"occ": occ, "sr": sr, **terms}
            self._check_finite(values)
            values["total"] = total_loss(
                occ, sr, cr, (c.weight_occupancy, c.weight_self_recon, c.weight_cross_recon)
            )
            self._check_finite({"total": values["total"]})
            self._apply(opt, values["total"])
            self._record("3", r, values, last=done + 1 == n)
            self._maybe_checkpoint("3", done + 1)
        self._maybe_checkpoint("3", n, completed=True)
        return self.model

    def run(self, stages: Sequence[str] = STAGES, resume_stage: str = "", resume_stage_step: int = 0) -> ShapeCorrNet:
        """Run the given stages in order; a resumed stage skips its finished iterations."""
        for stage in stages:
            start = resume_stage_step if stage == resume_stage else 0
            getattr(self, f"train_stage{stage}")(start=start)
        self.model.eval()
        return self.model


def train_stage1(model: ShapeCorrNet, dataset: Sequence[ShapeRecord], config: TrainingConfig) -> ShapeCorrNet:
    return Trainer(model, dataset, config).train_stage1()


def train_stage2(model: ShapeCorrNet, dataset: Sequence[ShapeRecord], config: TrainingConfig) -> ShapeCorrNet:
    return Trainer(model, dataset, config).train_stage2()


def train_stage3(model: ShapeCorrNet, dataset: Sequence[ShapeRecord], config: TrainingConfig) -> ShapeCorrNet:
    return Trainer(model, dataset, config).train_stage3()


def train_all(model: ShapeCorrNet, dataset: Sequence[ShapeRecord], config: TrainingConfig) -> ShapeCorrNet:
    return Trainer(model, dataset, config).run()


def resume_plan(stage: str, extra: Dict, requested: List[str]) -> tuple:
    """Stages still to run after a checkpoint taken in ``stage``.

    Returns (stages, resume_stage, resume_stage_step).
    """
    if stage not in STAGES:
        return list(requested), "", 0
    if extra.get("completed"):
        remaining = [s for s in requested if s > stage]
        return remaining, "", 0
    remaining = [s for s in requested if s >= stage]
    return remaining, stage, int(extra.get("stage_step", 0))


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or len(v) < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
