from __future__ import annotations
from dataclasses import asdict, dataclass, field
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Tuple
import yaml

from .errors import ConfigError
from .models import LossWeights

DEFAULT_RESOLUTIONS = [16, 32, 64]
DEFAULT_POINTS_PER_RESOLUTION = {16: 4096, 32: 8192, 64: 32768}


@dataclass
class DataConfig:
    archive_dir: str = ""
    resolutions: List[int] = field(default_factory=lambda: list(DEFAULT_RESOLUTIONS))
    points_per_resolution: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_POINTS_PER_RESOLUTION))
    surface_points: int = 8192
    # Share of occupancy samples drawn around the surface; the rest is uniform.
    near_surface_fraction: float = 0.8
    jitter_voxels: float = 0.5
    target_diag: float = 1.0
    seed: int = 0


@dataclass
class ModelConfig:
    shape_code_dim: int = 256
    embedding_dim: int = 12
    encoder_widths: List[int] = field(default_factory=lambda: [64, 128, 256])
    branch_widths: List[int] = field(default_factory=lambda: [128, 128])
    num_branches: int = 4
    trunk_widths: List[int] = field(default_factory=lambda: [256, 128])
    inverse_widths: List[int] = field(default_factory=lambda: [256, 256, 128])
    architecture: str = "deep"      # "deep" (parallel point-feature stacks) or "shallow"
    uncertainty: bool = True
    log_var_min: float = -10.0
    log_var_max: float = 4.0
    seed: int = 0


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    ball_radius: float = 0.1
    emd_max_points: int = 512
    weight_occupancy: float = 1.0
    weight_self_recon: float = 1.0
    weight_cross_recon: float = 1.0


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    stage1_iterations: Dict[int, int] = field(default_factory=lambda: {16: 2000, 32: 2000, 64: 4000})
    stage2_iterations: int = 4000
    stage3_iterations: int = 10000
    shapes_per_step: int = 4
    occupancy_points_per_shape: int = 2048
    self_recon_points_per_shape: int = 2048
    cross_points_per_shape: int = 512
    log_every: int = 50
    checkpoint_every: int = 1000
    float64: bool = False
    device: str = "cpu"
    seed: int = 0
    checkpoint_path: str = ""
    metrics_path: str = ""
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class InferenceConfig:
    tau: float = 0.2
    # "pair": min-max over one correspondence call; "corpus": over every pair of an evaluation run.
    normalization: str = "pair"
    reconstruct_resolution: int = 64
    iso: float = 0.5
    chunk_size: int = 16384


@dataclass
class EvaluationConfig:
    thresholds: List[float] = field(default_factory=lambda: [round(0.01 * i, 2) for i in range(26)])
    accuracy_threshold: float = 0.05
    active_branch_fraction: float = 0.01
    histogram_bins: int = 20
    plots: bool = True


@dataclass
class AppConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    source_path: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("source_path", None)
        return out

    def content_hash(self) -> str:
        b = json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(b).hexdigest()


def _int_map(raw: Any, default: Dict[int, int], name: str) -> Dict[int, int]:
    if raw is None:
        return dict(default)
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping of resolution -> count")
    return {int(k): int(v) for k, v in raw.items()}


def _validate(cfg: AppConfig) -> None:
    res = cfg.data.resolutions
    if not res or any(r < 4 for r in res):
        raise ConfigError("data.resolutions", "every resolution must be >= 4")
    if any(b <= a for a, b in zip(res, res[1:])):
        raise ConfigError("data.resolutions", "resolutions must be strictly ascending")
    if not 0.0 <= cfg.data.near_surface_fraction <= 1.0:
        raise ConfigError("data.near_surface_fraction", "must lie in [0, 1]")
    if cfg.data.surface_points <= 0:
        raise ConfigError("data.surface_points", "must be positive")
    if cfg.data.target_diag <= 0:
        raise ConfigError("data.target_diag", "must be positive")

    m = cfg.model
    if m.shape_code_dim < 1:
        raise ConfigError("model.shape_code_dim", "must be >= 1")
    if m.embedding_dim < 1:
        raise ConfigError("model.embedding_dim", "must be >= 1")
    if m.architecture not in ("deep", "shallow"):
        raise ConfigError("model.architecture", f"unknown architecture '{m.architecture}'")
    if m.log_var_min >= m.log_var_max:
        raise ConfigError("model.log_var_min", "must be below model.log_var_max")

    t = cfg.training
    if not t.learning_rate > 0:
        raise ConfigError("training.learning_rate", "must be > 0")
    for r, n in t.stage1_iterations.items():
        if n < 0:
            raise ConfigError("training.stage1_iterations", f"negative iteration count for {r}")
    if t.stage2_iterations < 0:
        raise ConfigError("training.stage2_iterations", "must be >= 0")
    if t.stage3_iterations < 0:
        raise ConfigError("training.stage3_iterations", "must be >= 0")
    stage1_res = sorted(t.stage1_iterations)
    if list(t.stage1_iterations) != stage1_res:
        raise ConfigError("training.stage1_iterations", "resolutions must be ascending")
    for name in ("shapes_per_step", "occupancy_points_per_shape", "self_recon_points_per_shape",
                 "cross_points_per_shape"):
        if getattr(t, name) < 1:
            raise ConfigError(f"training.{name}", "must be >= 1")

    w = t.loss.weights
    for name, value in asdict(w).items():
        if not math.isfinite(value) or value < 0:
            raise ConfigError(f"training.loss.lambda_{name}", "must be finite and >= 0")
    for name in ("weight_occupancy", "weight_self_recon", "weight_cross_recon"):
        value = getattr(t.loss, name)
        if not math.isfinite(value) or value < 0:
            raise ConfigError(f"training.loss.{name}", "must be finite and >= 0")
    if t.loss.ball_radius <= 0:
        raise ConfigError("training.loss.ball_radius", "must be > 0")

    if cfg.inference.normalization not in ("pair", "corpus"):
        raise ConfigError("inference.normalization", f"unknown mode '{cfg.inference.normalization}'")


def _build(data: Dict[str, Any]) -> AppConfig:
    data = data or {}
    d = data.get("data", {}) or {}
    m = data.get("model", {}) or {}
    t = data.get("training", {}) or {}
    loss = t.get("loss", {}) or data.get("loss", {}) or {}
    inf = data.get("inference", {}) or {}
    ev = data.get("evaluation", {}) or {}

    defaults = TrainingConfig()
    betas = t.get("betas", list(defaults.betas))

    cfg = AppConfig(
        data=DataConfig(
            archive_dir=str(d.get("archive_dir", "")),
            resolutions=[int(r) for r in d.get("resolutions", DEFAULT_RESOLUTIONS)],
            points_per_resolution=_int_map(d.get("points_per_resolution"), DEFAULT_POINTS_PER_RESOLUTION,
                                           "data.points_per_resolution"),
            surface_points=int(d.get("surface_points", 8192)),
            near_surface_fraction=float(d.get("near_surface_fraction", 0.8)),
            jitter_voxels=float(d.get("jitter_voxels", 0.5)),
            target_diag=float(d.get("target_diag", 1.0)),
            seed=int(d.get("seed", 0)),
        ),
        model=ModelConfig(
            shape_code_dim=int(m.get("shape_code_dim", 256)),
            embedding_dim=int(m.get("embedding_dim", 12)),
            encoder_widths=[int(v) for v in m.get("encoder_widths", [64, 128, 256])],
            branch_widths=[int(v) for v in m.get("branch_widths", [128, 128])],
            num_branches=int(m.get("num_branches", 4)),
            trunk_widths=[int(v) for v in m.get("trunk_widths", [256, 128])],
            inverse_widths=[int(v) for v in m.get("inverse_widths", [256, 256, 128])],
            architecture=str(m.get("architecture", "deep")).strip().lower(),
            uncertainty=bool(m.get("uncertainty", True)),
            log_var_min=float(m.get("log_var_min", -10.0)),
            log_var_max=float(m.get("log_var_max", 4.0)),
            seed=int(m.get("seed", 0)),
        ),
        training=TrainingConfig(
            learning_rate=float(t.get("learning_rate", 1e-4)),
            betas=(float(betas[0]), float(betas[1])),
            eps=float(t.get("eps", 1e-8)),
            stage1_iterations=_int_map(t.get("stage1_iterations"), defaults.stage1_iterations,
                                       "training.stage1_iterations"),
            stage2_iterations=int(t.get("stage2_iterations", 4000)),
            stage3_iterations=int(t.get("stage3_iterations", 10000)),
            shapes_per_step=int(t.get("shapes_per_step", 4)),
            occupancy_points_per_shape=int(t.get("occupancy_points_per_shape", 2048)),
            self_recon_points_per_shape=int(t.get("self_recon_points_per_shape", 2048)),
            cross_points_per_shape=int(t.get("cross_points_per_shape", 512)),
            log_every=int(t.get("log_every", 50)),
            checkpoint_every=int(t.get("checkpoint_every", 1000)),
            float64=bool(t.get("float64", False)),
            device=str(t.get("device", "cpu")),
            seed=int(t.get("seed", 0)),
            checkpoint_path=str(t.get("checkpoint_path", "")),
            metrics_path=str(t.get("metrics_path", "")),
            loss=LossConfig(
                weights=LossWeights(
                    cd=float(loss.get("lambda_cd", 10.0)),
                    emd=float(loss.get("lambda_emd", 1.0)),
                    normal=float(loss.get("lambda_normal", 0.01)),
                    smooth=float(loss.get("lambda_smooth", 0.1)),
                ),
                ball_radius=float(loss.get("ball_radius", 0.1)),
                emd_max_points=int(loss.get("emd_max_points", 512)),
                weight_occupancy=float(loss.get("weight_occupancy", 1.0)),
                weight_self_recon=float(loss.get("weight_self_recon", 1.0)),
                weight_cross_recon=float(loss.get("weight_cross_recon", 1.0)),
            ),
        ),
        inference=InferenceConfig(
            tau=float(inf.get("tau", 0.2)),
            normalization=str(inf.get("normalization", "pair")).strip().lower(),
            reconstruct_resolution=int(inf.get("reconstruct_resolution", 64)),
            iso=float(inf.get("iso", 0.5)),
            chunk_size=int(inf.get("chunk_size", 16384)),
        ),
        evaluation=EvaluationConfig(
            thresholds=[float(v) for v in ev.get("thresholds", EvaluationConfig().thresholds)],
            accuracy_threshold=float(ev.get("accuracy_threshold", 0.05)),
            active_branch_fraction=float(ev.get("active_branch_fraction", 0.01)),
            histogram_bins=int(ev.get("histogram_bins", 20)),
            plots=bool(ev.get("plots", True)),
        ),
    )
    return cfg


def config_from_dict(data: Dict[str, Any]) -> AppConfig:
    try:
        cfg = _build(data)
    except (AttributeError, IndexError, TypeError, ValueError) as exc:
        raise ConfigError("config", f"malformed value: {exc}") from exc
    _validate(cfg)
    return cfg


def load_config(path: str) -> AppConfig:
    """Read a YAML or JSON config file; missing sections fall back to defaults."""
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = config_from_dict(data or {})
    cfg.source_path = str(p)
    return cfg
