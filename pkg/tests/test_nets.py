import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from conftest import TINY, tiny_model
from shapecorr.errors import UndefinedNormalError
from shapecorr.nets import (
    PartEmbedding,
    encode,
    implicit_forward,
    init_params,
    inverse_forward,
    occupancy,
    parameter_digest,
    sample_embedding,
    spatial_normal,
    spatial_normals,
)


def test_init_is_deterministic_under_seed():
    a = init_params(d=8, k=4, seed=3, **TINY)
    b = init_params(d=8, k=4, seed=3, **TINY)
    c = init_params(d=8, k=4, seed=4, **TINY)

    assert parameter_digest(a) == parameter_digest(b)
    assert parameter_digest(a) != parameter_digest(c)


def test_init_respects_fan_in_bound():
    model = init_params(d=8, k=4, seed=0, **TINY)

    for module in model.modules():
        if isinstance(module, torch.nn.Linear):
            bound = 1.0 / np.sqrt(module.in_features)
            assert module.weight.abs().max() <= bound


def test_encoder_is_permutation_invariant(model, rng):
    pts = rng.uniform(-0.5, 0.5, size=(64, 3))
    perm = rng.permutation(64)

    z1 = encode(model, pts)
    z2 = encode(model, pts[perm])

    assert z1.shape == (8,)
    assert torch.allclose(z1, z2, atol=1e-12)


def test_encoder_handles_batches(model, rng):
    pts = rng.uniform(-0.5, 0.5, size=(3, 32, 3))

    batched = encode(model, pts)

    assert batched.shape == (3, 8)
    assert torch.allclose(batched[1], encode(model, pts[1]), atol=1e-12)


def test_empty_point_set_cannot_be_encoded(model):
    with pytest.raises(ValueError):
        encode(model, np.zeros((0, 3)))


def test_implicit_output_ranges(model, rng):
    z = encode(model, rng.uniform(-0.5, 0.5, size=(32, 3)))

    pev = implicit_forward(model, rng.uniform(-1, 1, size=(100, 3)), z)

    assert pev.o_mu.shape == (100, 4)
    assert pev.o_log_var.shape == (100, 4)
    assert pev.o_mu.min() >= 0 and pev.o_mu.max() <= 1
    assert pev.o_log_var.min() >= -10.0 and pev.o_log_var.max() <= 4.0


def test_log_variance_is_clamped():
    model = tiny_model()
    with torch.no_grad():
        model.implicit.log_var_head.bias.fill_(100.0)
    z = torch.zeros(8, dtype=torch.float64)

    pev = implicit_forward(model, np.zeros((5, 3)), z)

    assert torch.all(pev.o_log_var == 4.0)


def test_without_uncertainty_the_variance_is_one():
    model = tiny_model(uncertainty=False)
    z = torch.zeros(8, dtype=torch.float64)

    pev = implicit_forward(model, np.zeros((5, 3)), z)

    assert torch.all(pev.variance == 1.0)


def test_shallow_architecture_has_no_branches(rng):
    model = tiny_model(architecture="shallow")
    z = encode(model, rng.uniform(-0.5, 0.5, size=(16, 3)))

    pev = implicit_forward(model, rng.uniform(-0.5, 0.5, size=(10, 3)), z)

    assert len(model.implicit.branches) == 0
    assert pev.o_mu.shape == (10, 4)


def test_occupancy_is_max_with_first_index_on_ties():
    mu = torch.tensor([[0.2, 0.7, 0.7, 0.1], [0.9, 0.1, 0.0, 0.3]])
    pev = PartEmbedding(mu, torch.zeros_like(mu))

    occ, part = occupancy(pev)

    assert occ.tolist() == pytest.approx([0.7, 0.9])
    assert part.tolist() == [1, 0]


def test_embedding_statistics():
    log_var = torch.log(torch.tensor([[1.0, 4.0]], dtype=torch.float64))
    pev = PartEmbedding(torch.zeros(1, 2, dtype=torch.float64), log_var)

    assert pev.k == 2
    assert pev.o_sigma[0].tolist() == pytest.approx([1.0, 2.0])
    assert pev.mean_variance.item() == pytest.approx(2.5)
    assert pev.point_variance.item() == pytest.approx(2.0)


def test_sample_embedding_with_zero_noise_is_the_mean():
    pev = PartEmbedding(torch.full((3, 4), 0.3), torch.zeros(3, 4))

    assert torch.equal(sample_embedding(pev, torch.zeros(3, 4)), pev.o_mu)
    assert torch.allclose(sample_embedding(pev, torch.ones(3, 4)), torch.full((3, 4), 1.3))


def test_inverse_accepts_single_and_batched_embeddings(model):
    z = torch.zeros(8, dtype=torch.float64)
    o = torch.rand(6, 4, dtype=torch.float64)

    many = inverse_forward(model, o, z)
    one = inverse_forward(model, o[2], z)
    batched = inverse_forward(model, o.unsqueeze(0), z.unsqueeze(0))

    assert many.shape == (6, 3)
    assert one.shape == (3,)
    assert torch.allclose(one, many[2], atol=1e-12)
    assert torch.allclose(batched[0], many, atol=1e-12)


def test_stage_one_parameters_exclude_the_inverse(model):
    ids = {id(p) for p in model.occupancy_parameters()}

    assert not any(id(p) in ids for p in model.inverse.parameters())
    assert all(id(p) in ids for p in model.encoder.parameters())


def test_spatial_normal_is_unit_and_matches_finite_differences(model, rng):
    z = encode(model, rng.uniform(-0.5, 0.5, size=(32, 3)))
    x = np.array([0.1, -0.2, 0.05])

    n = spatial_normal(model, x, z)

    assert float(n.norm()) == pytest.approx(1.0, abs=1e-12)
    h = 1e-6
    grad = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        hi = occupancy(implicit_forward(model, (x + e)[None], z))[0].item()
        lo = occupancy(implicit_forward(model, (x - e)[None], z))[0].item()
        grad[i] = (hi - lo) / (2 * h)
    expected = -grad / np.linalg.norm(grad)
    assert np.allclose(n.detach().numpy(), expected, atol=1e-5)


def test_batched_normals_agree_with_single_normals(model, rng):
    z = encode(model, rng.uniform(-0.5, 0.5, size=(32, 3)))
    x = torch.as_tensor(rng.uniform(-0.4, 0.4, size=(1, 5, 3)))

    normals = spatial_normals(model, x, z.unsqueeze(0))

    for i in range(5):
        single = spatial_normal(model, x[0, i], z)
        assert torch.allclose(normals[0, i], single, atol=1e-10)


def test_constant_field_has_no_normal():
    model = tiny_model()
    with torch.no_grad():
        model.implicit.mu_head.weight.zero_()
        model.implicit.mu_head.bias.fill_(5.0)

    with pytest.raises(UndefinedNormalError):
        spatial_normal(model, np.zeros(3), torch.zeros(8, dtype=torch.float64))


def test_encoder_ignores_duplicated_points(model, rng):
    pts = rng.uniform(-0.5, 0.5, size=(16, 3))

    assert torch.allclose(encode(model, np.concatenate([pts, pts])), encode(model, pts), atol=1e-12)


def test_embedding_gradient_wrt_points_matches_central_differences(model, rng):
    z = encode(model, rng.uniform(-0.5, 0.5, size=(8, 3))).detach()
    x = torch.as_tensor(rng.uniform(-0.4, 0.4, size=(5, 3))).requires_grad_(True)

    assert gradcheck(lambda p: implicit_forward(model, p, z).o_mu, (x,), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_inverse_gradient_wrt_embedding_matches_central_differences(model, rng):
    z = encode(model, rng.uniform(-0.5, 0.5, size=(8, 3))).detach()
    o = torch.as_tensor(rng.uniform(0, 1, size=(5, 4))).requires_grad_(True)

    assert gradcheck(lambda e: inverse_forward(model, e, z), (o,), eps=1e-5, atol=1e-8, rtol=1e-4)


def test_sampled_embeddings_average_to_the_mean():
    mu = torch.tensor([0.3, 0.8], dtype=torch.float64)
    sigma = torch.tensor([0.1, 0.4], dtype=torch.float64)
    pev = PartEmbedding(mu, torch.log(sigma ** 2))
    n = 100_000
    gen = torch.Generator().manual_seed(7)

    draws = sample_embedding(pev, torch.randn((n, 2), generator=gen, dtype=torch.float64))

    assert torch.all((draws.mean(dim=0) - mu).abs() <= 3 * sigma / np.sqrt(n))
