import itertools
import math

import numpy as np
import pytest
import torch

from shapecorr.errors import DataError
from shapecorr.losses import (
    TERMS,
    build_cross_batch,
    cross_recon_loss,
    cross_recon_terms,
    emd,
    normal_loss,
    occupancy_loss,
    self_recon_loss,
    smooth_loss,
    subsample_index,
    total_loss,
    uncertainty_chamfer,
    weighted_sum,
)
from shapecorr.models import LossWeights
from shapecorr.nets import PartEmbedding, encode


def t(values):
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


def test_occupancy_loss_hand_value():
    mu = t([[0.2, 0.7], [0.9, 0.1]])
    pev = PartEmbedding(mu, torch.zeros_like(mu))

    assert occupancy_loss(pev, t([1, 0])).item() == pytest.approx(0.9)


def test_occupancy_loss_rejects_mismatched_labels():
    mu = t([[0.2, 0.7]])

    with pytest.raises(DataError):
        occupancy_loss(PartEmbedding(mu, torch.zeros_like(mu)), t([1, 0]))


def test_self_recon_hand_values():
    recon, target = t([[1.0, 0, 0]]), t([[0.0, 0, 0]])

    unit = self_recon_loss(recon, target, torch.zeros(1, 3, dtype=torch.float64))
    four = self_recon_loss(recon, target, torch.full((1, 3), math.log(4.0), dtype=torch.float64))

    assert unit.item() == pytest.approx(0.5)
    assert four.item() == pytest.approx(0.5 * 0.25 + 0.5 * math.log(4.0))


def test_chamfer_hand_value():
    S = t([[0.0, 0, 0]])
    S_prime = t([[1.0, 0, 0], [3.0, 0, 0]])

    value = uncertainty_chamfer(S, S_prime, t([1.0]))

    assert value.item() == pytest.approx(0.5 + 0.5 + 4.5)


def _chamfer_oracle(S, S_prime, sigma_sq):
    total = 0.0
    for p, s in zip(S, sigma_sq):
        d = min(np.sum((p - q) ** 2) for q in S_prime)
        total += 0.5 * d / s + 0.5 * np.log(s)
    for q in S_prime:
        d = [np.sum((p - q) ** 2) for p in S]
        j = int(np.argmin(d))
        total += 0.5 * d[j] / sigma_sq[j] + 0.5 * np.log(sigma_sq[j])
    return total


def test_chamfer_matches_brute_force(rng):
    for _ in range(20):
        S = rng.normal(size=(int(rng.integers(1, 12)), 3))
        S_prime = rng.normal(size=(int(rng.integers(1, 12)), 3))
        sigma_sq = rng.uniform(0.1, 2.0, size=len(S))

        got = uncertainty_chamfer(t(S), t(S_prime), t(sigma_sq)).item()

        assert got == pytest.approx(_chamfer_oracle(S, S_prime, sigma_sq), rel=1e-10)


def test_chamfer_of_identical_sets_is_only_the_log_term(rng):
    S = rng.normal(size=(10, 3))
    sigma_sq = np.full(10, 2.0)

    value = uncertainty_chamfer(t(S), t(S), t(sigma_sq)).item()

    assert value == pytest.approx(10 * np.log(2.0))


def test_chamfer_rejects_empty_sets():
    with pytest.raises(DataError):
        uncertainty_chamfer(torch.zeros(0, 3), torch.zeros(2, 3), torch.ones(0))


def test_emd_of_a_permutation_is_zero(rng):
    S = rng.normal(size=(16, 3))

    assert emd(t(S), t(S[rng.permutation(16)])).item() == pytest.approx(0.0, abs=1e-12)


def test_emd_of_a_translation(rng):
    S = rng.uniform(-0.01, 0.01, size=(8, 3))
    shift = np.array([3.0, 4.0, 0.0])

    assert emd(t(S), t(S + shift)).item() == pytest.approx(8 * 5.0, rel=1e-3)


def test_emd_matches_exhaustive_assignment(rng):
    for _ in range(10):
        S = rng.normal(size=(5, 3))
        S_prime = rng.normal(size=(5, 3))
        best = min(
            sum(np.linalg.norm(S[i] - S_prime[p[i]]) for i in range(5))
            for p in itertools.permutations(range(5))
        )

        assert emd(t(S), t(S_prime)).item() == pytest.approx(best, rel=1e-10)


def test_emd_is_a_metric_on_small_sets(rng):
    for n in range(1, 6):
        for _ in range(5):
            A, B, C = (t(rng.normal(size=(n, 3))) for _ in range(3))

            assert emd(A, B).item() == pytest.approx(emd(B, A).item(), rel=1e-12)
            assert emd(A, A).item() == pytest.approx(0.0, abs=1e-12)
            assert emd(A, C).item() <= emd(A, B).item() + emd(B, C).item() + 1e-12


def test_emd_rejects_unequal_sizes():
    with pytest.raises(DataError):
        emd(torch.zeros(3, 3), torch.zeros(4, 3))


def test_distances_are_rotation_invariant(rng):
    S = rng.normal(size=(12, 3))
    S_prime = rng.normal(size=(12, 3))
    sigma_sq = rng.uniform(0.5, 1.5, size=12)
    R = _rotation(rng)

    assert emd(t(S @ R.T), t(S_prime @ R.T)).item() == pytest.approx(emd(t(S), t(S_prime)).item(), rel=1e-9)
    assert uncertainty_chamfer(t(S @ R.T), t(S_prime @ R.T), t(sigma_sq)).item() == pytest.approx(
        uncertainty_chamfer(t(S), t(S_prime), t(sigma_sq)).item(), rel=1e-9
    )


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([1.0, 0, 0], [1.0, 0, 0], 0.0),
        ([1.0, 0, 0], [-1.0, 0, 0], 2.0),
        ([1.0, 0, 0], [0.0, 1, 0], 1.0),
        ([2.0, 0, 0], [0.0, 0, 5], 1.0),
    ],
)
def test_normal_loss_hand_values(a, b, expected):
    assert normal_loss(t([a]), t([b])).item() == pytest.approx(expected)


def test_normal_loss_is_a_mean():
    a = t([[1.0, 0, 0], [1.0, 0, 0]])
    b = t([[1.0, 0, 0], [-1.0, 0, 0]])

    assert normal_loss(a, b).item() == pytest.approx(1.0)


def test_zero_normal_is_rejected_unless_lenient():
    a = t([[0.0, 0, 0], [1.0, 0, 0]])
    b = t([[1.0, 0, 0], [1.0, 0, 0]])

    with pytest.raises(DataError):
        normal_loss(a, b)
    assert normal_loss(a, b, strict=False).item() == pytest.approx(0.5)


def test_smooth_loss_of_a_rigid_offset_is_zero(rng):
    S = rng.uniform(-0.1, 0.1, size=(20, 3))
    offsets = np.tile([0.3, -0.2, 0.1], (20, 1))

    assert smooth_loss(t(S), t(offsets), radius=0.5).item() == pytest.approx(0.0, abs=1e-12)


def test_smooth_loss_hand_value():
    S = t([[0.0, 0, 0], [0.05, 0, 0], [1.0, 0, 0]])
    offsets = t([[0.0, 0, 0], [3.0, 4.0, 0], [9.0, 9.0, 9.0]])

    # only the first two points are neighbours; the ordered double sum counts them twice
    assert smooth_loss(S, offsets, radius=0.1).item() == pytest.approx(10.0)


def test_smooth_loss_matches_brute_force(rng):
    S = rng.uniform(-0.3, 0.3, size=(25, 3))
    offsets = rng.normal(size=(25, 3))
    radius = 0.2
    expected = sum(
        np.linalg.norm(offsets[a] - offsets[b])
        for a in range(25) for b in range(25)
        if a != b and np.linalg.norm(S[a] - S[b]) <= radius
    )

    assert smooth_loss(t(S), t(offsets), radius).item() == pytest.approx(expected, rel=1e-10)


def test_total_loss_adds_the_three_parts():
    assert total_loss(1.0, 2.0, 3.0) == 6.0
    assert total_loss(1.0, 2.0, 3.0, weights=(1.0, 0.0, 2.0)) == 7.0


def test_total_loss_of_tensors_is_a_tensor():
    out = total_loss(torch.tensor(1.0), torch.tensor(2.0), 0.0, weights=(2.0, 1.0, 1.0))

    assert isinstance(out, torch.Tensor)
    assert out.item() == 4.0


def _batch(model, rng, n=16):
    pa = t(rng.uniform(-0.3, 0.3, size=(n, 3)))
    pb = t(rng.uniform(-0.3, 0.3, size=(n, 3)))
    na = t(rng.normal(size=(n, 3)))
    nb = t(rng.normal(size=(n, 3)))
    return build_cross_batch(model, pa, pb, encode(model, pa), encode(model, pb), na, nb)


def test_cross_terms_recompose_into_the_weighted_loss(model, rng):
    batch = _batch(model, rng)
    w = LossWeights(cd=10.0, emd=1.0, normal=0.01, smooth=0.1)

    terms = cross_recon_terms(batch, w, radius=0.2)

    assert set(terms) == set(TERMS)
    manual = 10.0 * terms["cd"] + terms["emd"] + 0.01 * terms["normal"] + 0.1 * terms["smooth"]
    assert weighted_sum(terms, w).item() == pytest.approx(manual.item())
    assert cross_recon_loss(batch, w, radius=0.2).item() == pytest.approx(manual.item())


def test_zero_weight_terms_are_skipped(model, rng):
    batch = _batch(model, rng)

    terms = cross_recon_terms(batch, LossWeights(cd=1.0, emd=0.0, normal=0.0, smooth=0.0))

    assert terms["emd"].item() == 0.0
    assert terms["normal"].item() == 0.0
    assert terms["cd"].item() != 0.0


def test_cross_batch_swaps_embeddings(model, rng):
    batch = _batch(model, rng)

    expected = model.decode(batch.pev_b.o_mu[None], batch.z_a[None])[0]

    assert torch.allclose(batch.recon_a, expected)
    assert torch.allclose(batch.offsets_ab, batch.recon_b - batch.points_a)


def test_cross_batch_needs_equal_point_counts(model):
    with pytest.raises(DataError):
        build_cross_batch(model, torch.zeros(4, 3), torch.zeros(5, 3), torch.zeros(8), torch.zeros(8))


def test_subsample_index():
    rng = np.random.default_rng(0)

    assert subsample_index(5, 10, rng).tolist() == [0, 1, 2, 3, 4]
    idx = subsample_index(100, 10, rng)
    assert len(idx) == 10
    assert len(set(idx.tolist())) == 10
    assert np.all(np.diff(idx) > 0)
