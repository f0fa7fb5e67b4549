"""Encoder E, branched probabilistic implicit function f, inverse function g.

Shapes used throughout: a batch of B shapes with m query points each.

* ``encode``:           (B, n, 3)            -> (B, d)
* ``implicit_forward``: (B, m, 3), (B, d)    -> PartEmbedding of (B, m, k)
* ``inverse_forward``:  (B, m, k), (B, d)    -> (B, m, 3)

Unbatched inputs ((n, 3), (d,), ...) are accepted and returned unbatched.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from .config import ModelConfig
from .errors import UndefinedNormalError
from .models import SurfaceSamples

_NEG_SLOPE = 0.2
# Below this gradient norm the spatial normal is undefined.
NORMAL_EPS = 1e-12


@dataclass
class PartEmbedding:
    o_mu: Tensor        # (..., k) in [0, 1]
    o_log_var: Tensor   # (..., k) log sigma^2, clamped

    @property
    def k(self) -> int:
        return int(self.o_mu.shape[-1])

    @property
    def o_sigma(self) -> Tensor:
        return torch.exp(0.5 * self.o_log_var)

    @property
    def variance(self) -> Tensor:
        return torch.exp(self.o_log_var)

    @property
    def point_variance(self) -> Tensor:
        """Per-point scalar sigma^2 = exp(mean of the log-variances)."""
        return torch.exp(self.o_log_var.mean(dim=-1))

    @property
    def mean_variance(self) -> Tensor:
        """Per-point uncertainty u = mean over k of sigma^2."""
        return self.variance.mean(dim=-1)

    def detach(self) -> "PartEmbedding":
        return PartEmbedding(self.o_mu.detach(), self.o_log_var.detach())

    def __getitem__(self, index) -> "PartEmbedding":
        return PartEmbedding(self.o_mu[index], self.o_log_var[index])


def _mlp(widths: Sequence[int], last_activation: bool = True) -> nn.Sequential:
    layers: List[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(nn.Linear(a, b))
        if last_activation or i < len(widths) - 2:
            layers.append(nn.LeakyReLU(_NEG_SLOPE))
    return nn.Sequential(*layers)


class PointEncoder(nn.Module):
    """PointNet without the input transform: shared per-point MLP, max-pool, projection."""

    def __init__(self, widths: Sequence[int], d: int) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        prev = 3
        for w in widths:
            layers += [nn.Conv1d(prev, w, kernel_size=1), nn.LeakyReLU(_NEG_SLOPE)]
            prev = w
        self.mlp = nn.Sequential(*layers)
        self.project = nn.Linear(prev, d)

    def forward(self, points: Tensor) -> Tensor:
        feats = self.mlp(points.transpose(1, 2))    # (B, C, n)
        pooled, _ = torch.max(feats, dim=2)
        return self.project(pooled)


class BranchedImplicit(nn.Module):
    """Parallel point-feature stacks over (x, z), concatenated, then trunk and two heads.

    With ``architecture="shallow"`` the parallel stacks are replaced by a single
    trunk on (x, z).
    """

    def __init__(
        self,
        d: int,
        k: int,
        branch_widths: Sequence[int],
        num_branches: int,
        trunk_widths: Sequence[int],
        architecture: str = "deep",
    ) -> None:
        super().__init__()
        self.architecture = architecture
        if architecture == "deep":
            self.branches = nn.ModuleList(
                _mlp([3 + d, *branch_widths]) for _ in range(num_branches)
            )
            trunk_in = num_branches * branch_widths[-1]
        else:
            self.branches = nn.ModuleList()
            trunk_in = 3 + d
        self.trunk = _mlp([trunk_in, *trunk_widths])
        self.mu_head = nn.Linear(trunk_widths[-1], k)
        self.log_var_head = nn.Linear(trunk_widths[-1], k)

    def forward(self, x: Tensor, z: Tensor) -> Tuple[Tensor, Tensor]:
        zz = z.unsqueeze(1).expand(-1, x.shape[1], -1)
        h = torch.cat([x, zz], dim=-1)
        if self.architecture == "deep":
            h = torch.cat([branch(h) for branch in self.branches], dim=-1)
        h = self.trunk(h)
        return torch.sigmoid(self.mu_head(h)), self.log_var_head(h)


class ShapeCorrNet(nn.Module):
    def __init__(
        self,
        d: int = 256,
        k: int = 12,
        encoder_widths: Sequence[int] = (64, 128, 256),
        branch_widths: Sequence[int] = (128, 128),
        num_branches: int = 4,
        trunk_widths: Sequence[int] = (256, 128),
        inverse_widths: Sequence[int] = (256, 256, 128),
        architecture: str = "deep",
        uncertainty: bool = True,
        log_var_min: float = -10.0,
        log_var_max: float = 4.0,
    ) -> None:
        super().__init__()
        if d < 1 or k < 1:
            raise ValueError("d and k must be >= 1")
        self.hparams: Dict[str, Any] = {
            "d": int(d),
            "k": int(k),
            "encoder_widths": [int(w) for w in encoder_widths],
            "branch_widths": [int(w) for w in branch_widths],
            "num_branches": int(num_branches),
            "trunk_widths": [int(w) for w in trunk_widths],
            "inverse_widths": [int(w) for w in inverse_widths],
            "architecture": str(architecture),
            "uncertainty": bool(uncertainty),
            "log_var_min": float(log_var_min),
            "log_var_max": float(log_var_max),
        }
        self.d = d
        self.k = k
        self.uncertainty = uncertainty
        self.log_var_min = log_var_min
        self.log_var_max = log_var_max
        self.encoder = PointEncoder(encoder_widths, d)
        self.implicit = BranchedImplicit(d, k, branch_widths, num_branches, trunk_widths, architecture)
        self.inverse = _mlp([k + d, *inverse_widths, 3], last_activation=False)

    # E + f are trained in stage 1; g joins later.
    def occupancy_parameters(self) -> List[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.implicit.parameters())

    def embed(self, x: Tensor, z: Tensor) -> PartEmbedding:
        mu, log_var = self.implicit(x, z)
        if self.uncertainty:
            log_var = torch.clamp(log_var, self.log_var_min, self.log_var_max)
        else:
            log_var = torch.zeros_like(mu)
        return PartEmbedding(mu, log_var)

    def decode(self, o: Tensor, z: Tensor) -> Tensor:
        zz = z.unsqueeze(1).expand(-1, o.shape[1], -1)
        return self.inverse(torch.cat([o, zz], dim=-1))

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device


def init_params(d: int = 256, k: int = 12, seed: int = 0, **hparams: Any) -> ShapeCorrNet:
    """Build a network with deterministic uniform fan-in initialization."""
    model = ShapeCorrNet(d=d, k=k, **hparams)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.copy_(torch.rand(module.bias.shape, generator=gen) * 2 * bound - bound)
    return model


def model_from_config(cfg: ModelConfig, float64: bool = False) -> ShapeCorrNet:
    model = init_params(
        d=cfg.shape_code_dim,
        k=cfg.embedding_dim,
        seed=cfg.seed,
        encoder_widths=cfg.encoder_widths,
        branch_widths=cfg.branch_widths,
        num_branches=cfg.num_branches,
        trunk_widths=cfg.trunk_widths,
        inverse_widths=cfg.inverse_widths,
        architecture=cfg.architecture,
        uncertainty=cfg.uncertainty,
        log_var_min=cfg.log_var_min,
        log_var_max=cfg.log_var_max,
    )
    return model.double() if float64 else model


def parameter_digest(module: nn.Module) -> str:
    """sha256 over every parameter's bytes, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- functional surface ---------------------------------------------------------

ArrayLike = Union[Tensor, np.ndarray, SurfaceSamples]


def as_tensor(model: ShapeCorrNet, values: Any) -> Tensor:
    if isinstance(values, SurfaceSamples):
        values = values.points
    if isinstance(values, Tensor):
        return values.to(dtype=model.dtype, device=model.device)
    return torch.as_tensor(np.asarray(values), dtype=model.dtype, device=model.device)


def encode(model: ShapeCorrNet, surface: ArrayLike) -> Tensor:
    pts = as_tensor(model, surface)
    if pts.shape[-2] == 0:
        raise ValueError("cannot encode an empty point set")
    if pts.dim() == 2:
        return model.encoder(pts.unsqueeze(0))[0]
    return model.encoder(pts)


def implicit_forward(model: ShapeCorrNet, x: ArrayLike, z: Tensor) -> PartEmbedding:
    x = as_tensor(model, x)
    if x.dim() == 2:
        return model.embed(x.unsqueeze(0), z.unsqueeze(0))[0]
    return model.embed(x, z)


def occupancy(pev: PartEmbedding) -> Tuple[Tensor, Tensor]:
    """Max-pooled occupancy and the branch that produced it (first index on ties)."""
    return pev.o_mu.amax(dim=-1), torch.argmax(pev.o_mu, dim=-1)


def sample_embedding(pev: PartEmbedding, eps: Tensor) -> Tensor:
    return pev.o_mu + eps * pev.o_sigma


def inverse_forward(model: ShapeCorrNet, o: Tensor, z: Tensor) -> Tensor:
    o = as_tensor(model, o)
    if o.dim() == 2:
        return model.decode(o.unsqueeze(0), z.unsqueeze(0))[0]
    if o.dim() == 1:
        return model.decode(o.view(1, 1, -1), z.unsqueeze(0))[0, 0]
    return model.decode(o, z)


def spatial_normals(model: ShapeCorrNet, x: Tensor, z: Tensor, create_graph: bool = False) -> Tensor:
    """Outward unit normals -dO/dx / |dO/dx| for a batch (B, m, 3) of points.

    Differentiable w.r.t. the parameters and x when ``create_graph`` is set.
    """
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        occ = model.embed(x, z).o_mu.amax(dim=-1)
        (grad,) = torch.autograd.grad(occ.sum(), x, create_graph=create_graph)
    norm = grad.norm(dim=-1, keepdim=True).clamp_min(NORMAL_EPS)
    return -grad / norm


def spatial_normal(model: ShapeCorrNet, x: Any, z: Tensor) -> Tensor:
    xt = as_tensor(model, x).reshape(1, 1, 3).detach().requires_grad_(True)
    with torch.enable_grad():
        occ = model.embed(xt, z.detach().reshape(1, -1)).o_mu.amax(dim=-1)
        (grad,) = torch.autograd.grad(occ.sum(), xt)
    g = grad.reshape(3)
    norm = float(g.norm())
    if not norm >= NORMAL_EPS:
        raise UndefinedNormalError(f"occupancy gradient vanishes at {xt.detach().reshape(3).tolist()}")
    return -g / norm
