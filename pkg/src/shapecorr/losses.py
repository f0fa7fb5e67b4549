"""Training objectives.

All terms are sums over points (not means) except ``normal_loss``, which
averages over pairs. Nearest-neighbour and assignment choices are made on
detached values; the returned scalars are differentiable through the
selected pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .errors import DataError
from .geometry import ball_query_pairs
from .models import LossWeights
from .nets import PartEmbedding, ShapeCorrNet, sample_embedding, spatial_normals

TERMS = ("cd", "emd", "normal", "smooth")


def _safe_norm(v: Tensor) -> Tensor:
    """Euclidean norm over the last axis whose gradient at 0 is 0 instead of NaN."""
    sq = (v * v).sum(dim=-1)
    nonzero = sq > 0
    root = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    return torch.where(nonzero, root, torch.zeros_like(sq))


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)


def occupancy_loss(pev: PartEmbedding, labels: Tensor) -> Tensor:
    occ = pev.o_mu.amax(dim=-1)
    labels = labels.to(occ.dtype)
    if occ.shape != labels.shape:
        raise DataError(f"occupancy/label shape mismatch: {tuple(occ.shape)} vs {tuple(labels.shape)}")
    return ((occ - labels) ** 2).sum()


def self_recon_loss(recon: Tensor, target: Tensor, o_log_var: Tensor) -> Tensor:
    if recon.shape != target.shape:
        raise DataError(f"reconstruction/target shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    s = o_log_var.mean(dim=-1)
    sq = ((recon - target) ** 2).sum(dim=-1)
    return (0.5 * torch.exp(-s) * sq + 0.5 * s).sum()


def uncertainty_chamfer(S: Tensor, S_prime: Tensor, sigma_sq: Tensor) -> Tensor:
    """Squared Chamfer distance weighted by the variance of the real-shape point.

    The forward term uses each p's own sigma^2, the backward term the sigma^2
    of q's nearest p.
    """
    if len(S) == 0 or len(S_prime) == 0:
        raise DataError("chamfer distance needs non-empty point sets")
    d2 = _sq_dists(S, S_prime)                       # (n, m)
    fwd_idx = torch.argmin(d2.detach(), dim=1)
    bwd_idx = torch.argmin(d2.detach(), dim=0)       # p*(q)
    fwd = d2.gather(1, fwd_idx[:, None])[:, 0]
    bwd = d2.gather(0, bwd_idx[None, :])[0]
    log_s = torch.log(sigma_sq)
    forward = 0.5 * fwd / sigma_sq + 0.5 * log_s
    backward = 0.5 * bwd / sigma_sq[bwd_idx] + 0.5 * log_s[bwd_idx]
    return forward.sum() + backward.sum()


def emd(S: Tensor, S_prime: Tensor) -> Tensor:
    """Exact earth mover's distance (sum of unsquared distances) via optimal assignment."""
    if S.shape != S_prime.shape:
        raise DataError(f"emd needs equal-size point sets, got {len(S)} and {len(S_prime)}")
    if len(S) == 0:
        return S.sum() * 0.0
    cost = torch.cdist(S.detach(), S_prime.detach()).cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    rows_t = torch.as_tensor(rows, device=S.device)
    cols_t = torch.as_tensor(cols, device=S.device)
    return _safe_norm(S[rows_t] - S_prime[cols_t]).sum()


def _unit(v: Tensor, strict: bool, name: str) -> Tensor:
    norm = _safe_norm(v)
    zero = norm == 0
    if strict and bool(zero.any()):
        raise DataError(f"{name} contains a zero-length normal")
    return v / torch.where(zero, torch.ones_like(norm), norm)[..., None]


def normal_loss(nu: Tensor, nu_prime: Tensor, strict: bool = True) -> Tensor:
    """Mean cosine distance between paired normals.

    Inputs are renormalized. A zero vector raises unless ``strict`` is off,
    in which case it counts as orthogonal.
    """
    if nu.shape != nu_prime.shape:
        raise DataError(f"normal sets differ in shape: {tuple(nu.shape)} vs {tuple(nu_prime.shape)}")
    if len(nu) == 0:
        raise DataError("normal_loss needs at least one pair")
    a = _unit(nu, strict, "nu")
    b = _unit(nu_prime, strict, "nu_prime")
    return (1.0 - (a * b).sum(dim=-1)).mean()


def smooth_loss(S: Tensor, offsets: Tensor, radius: float = 0.1) -> Tensor:
    """Sum over ordered neighbour pairs of |offset_a - offset_b|."""
    if S.shape != offsets.shape:
        raise DataError("smooth_loss needs one offset per point")
    pairs = ball_query_pairs(S.detach().cpu().numpy(), radius)
    if len(pairs) == 0:
        return offsets.sum() * 0.0
    i = torch.as_tensor(pairs[:, 0], device=S.device)
    j = torch.as_tensor(pairs[:, 1], device=S.device)
    # each unordered pair appears once in `pairs`, twice in the double sum
    return 2.0 * _safe_norm(offsets[i] - offsets[j]).sum()


@dataclass
class CrossBatch:
    """One shape pair with PEVs swapped.

    ``recon_a = g(o_B, z_A)`` and ``recon_b = g(o_A, z_B)``; the offset fields are
    ``offsets_ab = recon_b - points_a`` and ``offsets_ba = recon_a - points_b``.
    """
    points_a: Tensor
    points_b: Tensor
    normals_a: Optional[Tensor]
    normals_b: Optional[Tensor]
    pev_a: PartEmbedding
    pev_b: PartEmbedding
    z_a: Tensor
    z_b: Tensor
    recon_a: Tensor
    recon_b: Tensor
    recon_normals_a: Optional[Tensor] = None
    recon_normals_b: Optional[Tensor] = None

    @property
    def offsets_ab(self) -> Tensor:
        return self.recon_b - self.points_a

    @property
    def offsets_ba(self) -> Tensor:
        return self.recon_a - self.points_b


def build_cross_batch(
    model: ShapeCorrNet,
    points_a: Tensor,
    points_b: Tensor,
    z_a: Tensor,
    z_b: Tensor,
    normals_a: Optional[Tensor] = None,
    normals_b: Optional[Tensor] = None,
    eps_a: Optional[Tensor] = None,
    eps_b: Optional[Tensor] = None,
    with_normals: bool = True,
) -> CrossBatch:
    """Evaluate f on both surfaces, swap the (optionally reparameterized) PEVs and decode.

    ``eps_*`` are standard-normal draws of shape (n, k); None decodes the means.
    """
    if points_a.shape != points_b.shape:
        raise DataError("cross reconstruction needs the same number of points on both shapes")
    pev_a = model.embed(points_a[None], z_a[None])[0]
    pev_b = model.embed(points_b[None], z_b[None])[0]
    o_a = pev_a.o_mu if eps_a is None else sample_embedding(pev_a, eps_a)
    o_b = pev_b.o_mu if eps_b is None else sample_embedding(pev_b, eps_b)
    recon_a = model.decode(o_b[None], z_a[None])[0]
    recon_b = model.decode(o_a[None], z_b[None])[0]

    recon_normals_a = recon_normals_b = None
    if with_normals:
        recon_normals_a = spatial_normals(model, recon_a[None], z_a[None], create_graph=True)[0]
        recon_normals_b = spatial_normals(model, recon_b[None], z_b[None], create_graph=True)[0]
    return CrossBatch(
        points_a=points_a,
        points_b=points_b,
        normals_a=normals_a,
        normals_b=normals_b,
        pev_a=pev_a,
        pev_b=pev_b,
        z_a=z_a,
        z_b=z_b,
        recon_a=recon_a,
        recon_b=recon_b,
        recon_normals_a=recon_normals_a,
        recon_normals_b=recon_normals_b,
    )


def _paired_normals(points: Tensor, normals: Tensor, recon: Tensor) -> Tensor:
    """Normal of each reconstructed point's nearest real-shape point."""
    idx = torch.argmin(_sq_dists(recon.detach(), points.detach()), dim=1)
    return normals[idx]


def cross_recon_terms(batch: CrossBatch, w: LossWeights, radius: float = 0.1) -> Dict[str, Tensor]:
    """Unweighted cross-reconstruction terms; a term whose weight is 0 is not computed."""
    zero = batch.recon_a.sum() * 0.0
    terms = {name: zero for name in TERMS}
    if w.cd:
        terms["cd"] = (
            uncertainty_chamfer(batch.points_a, batch.recon_a, batch.pev_a.point_variance)
            + uncertainty_chamfer(batch.points_b, batch.recon_b, batch.pev_b.point_variance)
        )
    if w.emd:
        terms["emd"] = emd(batch.points_a, batch.recon_a) + emd(batch.points_b, batch.recon_b)
    if w.normal:
        if batch.normals_a is None or batch.normals_b is None or batch.recon_normals_a is None:
            raise DataError("normal loss needs surface normals and reconstructed normals")
        target_a = _paired_normals(batch.points_a, batch.normals_a, batch.recon_a)
        target_b = _paired_normals(batch.points_b, batch.normals_b, batch.recon_b)
        terms["normal"] = (
            normal_loss(target_a, batch.recon_normals_a, strict=False)
            + normal_loss(target_b, batch.recon_normals_b, strict=False)
        )
    if w.smooth:
        terms["smooth"] = (
            smooth_loss(batch.points_a, batch.offsets_ab, radius)
            + smooth_loss(batch.points_b, batch.offsets_ba, radius)
        )
    return terms


def weighted_sum(terms: Dict[str, Tensor], w: LossWeights) -> Tensor:
    return w.cd * terms["cd"] + w.emd * terms["emd"] + w.normal * terms["normal"] + w.smooth * terms["smooth"]


def cross_recon_loss(batch: CrossBatch, w: LossWeights, radius: float = 0.1) -> Tensor:
    return weighted_sum(cross_recon_terms(batch, w, radius), w)


def total_loss(
    occ: Union[Tensor, float],
    sr: Union[Tensor, float],
    cr: Union[Tensor, float],
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Tensor:
    """L_all = occ + sr + cr (each optionally reweighted)."""
    return weights[0] * occ + weights[1] * sr + weights[2] * cr


def subsample_index(n: int, limit: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted random subset of range(n) of size min(n, limit)."""
    if n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))
