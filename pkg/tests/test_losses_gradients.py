import pytest
import torch
from torch.autograd import gradcheck

from conftest import tiny_model
from shapecorr.losses import (
    build_cross_batch,
    cross_recon_loss,
    emd,
    normal_loss,
    occupancy_loss,
    self_recon_loss,
    smooth_loss,
    uncertainty_chamfer,
)
from shapecorr.models import LossWeights
from shapecorr.nets import PartEmbedding, encode, implicit_forward, sample_embedding


def _param(rng, *shape):
    return torch.as_tensor(rng.normal(size=shape)).requires_grad_(True)


def test_chamfer_gradients(rng):
    S = _param(rng, 6, 3)
    S_prime = _param(rng, 7, 3)
    sigma_sq = torch.as_tensor(rng.uniform(0.5, 1.5, size=6)).requires_grad_(True)

    assert gradcheck(uncertainty_chamfer, (S, S_prime, sigma_sq), eps=1e-6, atol=1e-5)


def test_emd_gradients(rng):
    S = _param(rng, 5, 3)
    S_prime = _param(rng, 5, 3)

    assert gradcheck(emd, (S, S_prime), eps=1e-6, atol=1e-5)


def test_normal_loss_gradients(rng):
    a = _param(rng, 8, 3)
    b = _param(rng, 8, 3)

    assert gradcheck(normal_loss, (a, b), eps=1e-6, atol=1e-5)


def test_smooth_loss_gradients(rng):
    S = torch.as_tensor(rng.uniform(-0.2, 0.2, size=(10, 3)))
    offsets = _param(rng, 10, 3)

    assert gradcheck(lambda o: smooth_loss(S, o, radius=0.25), (offsets,), eps=1e-6, atol=1e-5)


def test_self_recon_gradients(rng):
    recon = _param(rng, 6, 3)
    target = torch.as_tensor(rng.normal(size=(6, 3)))
    log_var = _param(rng, 6, 4)

    assert gradcheck(lambda r, s: self_recon_loss(r, target, s), (recon, log_var), eps=1e-6, atol=1e-5)


def test_zero_offset_difference_has_a_finite_gradient():
    S = torch.zeros(2, 3, dtype=torch.float64)
    offsets = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)

    smooth_loss(S, offsets, radius=0.1).backward()

    assert torch.all(torch.isfinite(offsets.grad))




def test_occupancy_loss_gradients(rng):
    mu = torch.as_tensor(rng.uniform(0.05, 0.95, size=(6, 4))).requires_grad_(True)
    labels = torch.as_tensor(rng.integers(0, 2, size=6))

    assert gradcheck(lambda m: occupancy_loss(PartEmbedding(m, torch.zeros_like(m)), labels), (mu,),
                     eps=1e-6, atol=1e-5)


def _assert_parameter_gradients(model, loss, h=1e-6):
    model.zero_grad()
    loss().backward()

    for name, p in model.named_parameters():
        grad = torch.zeros_like(p) if p.grad is None else p.grad
        flat = p.data.view(-1)
        for i in sorted({0, flat.numel() // 2, flat.numel() - 1}):
            original = flat[i].item()
            flat[i] = original + h
            hi = loss().item()
            flat[i] = original - h
            lo = loss().item()
            flat[i] = original
            numeric = (hi - lo) / (2 * h)
            assert grad.view(-1)[i].item() == pytest.approx(numeric, rel=1e-4, abs=1e-7), f"{name}[{i}]"


def test_occupancy_loss_parameter_gradients(rng):
    model = tiny_model(seed=3)
    surface = torch.as_tensor(rng.uniform(-0.3, 0.3, size=(8, 3)))
    queries = torch.as_tensor(rng.uniform(-0.5, 0.5, size=(8, 3)))
    labels = torch.as_tensor(rng.integers(0, 2, size=8))

    def loss():
        return occupancy_loss(implicit_forward(model, queries, encode(model, surface)), labels)

    _assert_parameter_gradients(model, loss)


def test_self_recon_parameter_gradients(rng):
    model = tiny_model(seed=4)
    points = torch.as_tensor(rng.uniform(-0.3, 0.3, size=(8, 3)))
    eps = torch.as_tensor(rng.normal(size=(8, 4)))

    def loss():
        z = encode(model, points)
        pev = model.embed(points[None], z[None])[0]
        recon = model.decode(sample_embedding(pev, eps)[None], z[None])[0]
        return self_recon_loss(recon, points, pev.o_log_var)

    _assert_parameter_gradients(model, loss)


@pytest.mark.parametrize("weights", [
    LossWeights(cd=10.0, emd=1.0, normal=0.0, smooth=0.1),
    LossWeights(cd=0.0, emd=0.0, normal=1.0, smooth=0.0),
])
def test_cross_loss_parameter_gradients(rng, weights):
    model = tiny_model(seed=2)
    pa = torch.as_tensor(rng.uniform(-0.3, 0.3, size=(8, 3)))
    pb = torch.as_tensor(rng.uniform(-0.3, 0.3, size=(8, 3)))
    na = torch.as_tensor(rng.normal(size=(8, 3)))
    nb = torch.as_tensor(rng.normal(size=(8, 3)))

    def loss():
        za, zb = encode(model, pa), encode(model, pb)
        batch = build_cross_batch(model, pa, pb, za, zb, na, nb, with_normals=bool(weights.normal))
        return cross_recon_loss(batch, weights, radius=0.2)

    _assert_parameter_gradients(model, loss)
