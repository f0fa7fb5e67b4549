import math

import numpy as np
import pytest
import torch

from conftest import tiny_model
from shapecorr.errors import DataError
from shapecorr.inference import (
    confidence_raw,
    correspond,
    correspond_arrays,
    cross_reconstruct,
    embed_points,
    export_embeddings,
    interpolate,
    normalize_scores,
    read_correspondences_csv,
    read_embeddings_csv,
    reconstruct,
    segment,
    shape_code,
    transfer_attribute,
    write_correspondences_csv,
    write_embeddings_csv,
)
from shapecorr.models import GRID_BOUND, ScoreNormalizer
from shapecorr.nets import PartEmbedding


@pytest.fixture
def shapes(rng):
    return rng.uniform(-0.3, 0.3, size=(40, 3)), rng.uniform(-0.3, 0.3, size=(30, 3))


def test_confidence_of_identical_embeddings():
    mu = torch.full((2, 3), 0.4, dtype=torch.float64)
    pev = PartEmbedding(mu, torch.zeros_like(mu))

    raw = confidence_raw(pev, pev)

    assert raw == pytest.approx([-3 * math.log(2.0)] * 2)


def test_confidence_drops_with_distance_and_variance():
    mu = torch.zeros(1, 2, dtype=torch.float64)
    near = PartEmbedding(torch.full((1, 2), 0.1, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
    far = PartEmbedding(torch.full((1, 2), 0.9, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
    noisy = PartEmbedding(torch.full((1, 2), 0.1, dtype=torch.float64), torch.full((1, 2), 2.0, dtype=torch.float64))
    base = PartEmbedding(mu, torch.zeros_like(mu))

    assert confidence_raw(base, near)[0] > confidence_raw(base, far)[0]
    assert confidence_raw(base, near)[0] > confidence_raw(base, noisy)[0]


def test_confidence_is_symmetric(rng):
    a = PartEmbedding(torch.as_tensor(rng.uniform(size=(6, 4))), torch.as_tensor(rng.normal(size=(6, 4))))
    b = PartEmbedding(torch.as_tensor(rng.uniform(size=(6, 4))), torch.as_tensor(rng.normal(size=(6, 4))))

    assert np.array_equal(confidence_raw(a, b), confidence_raw(b, a))


def test_confidence_peaks_where_total_variance_equals_the_squared_gap():
    gap = 0.5
    total = np.linspace(0.05, 0.45, 41)
    log_var = torch.as_tensor(np.log(total / 2))[:, None]
    a = PartEmbedding(torch.zeros(41, 1, dtype=torch.float64), log_var)
    b = PartEmbedding(torch.full((41, 1), gap, dtype=torch.float64), log_var)

    raw = confidence_raw(a, b)

    assert total[np.argmax(raw)] == pytest.approx(gap ** 2)


def test_normalize_scores():
    conf, normalizer = normalize_scores([1.0, 2.0, 3.0])

    assert conf.tolist() == [0.0, 0.5, 1.0]
    assert normalizer.to_dict() == {"min": 1.0, "max": 3.0}


def test_constant_scores_normalize_to_one_half():
    conf, _ = normalize_scores([2.0, 2.0])

    assert conf.tolist() == [0.5, 0.5]


def test_normalize_scores_needs_input():
    with pytest.raises(ValueError):
        normalize_scores([])


def test_correspondence_structure(model, shapes):
    a, b = shapes

    results = correspond(model, a, b, tau=0.2)

    assert [r.source_index for r in results] == list(range(40))
    for r in results:
        assert 0.0 <= r.confidence <= 1.0
        assert r.valid == (r.confidence > 0.2)
        if r.valid:
            assert 0 <= r.target_index < 30
        else:
            assert r.target_index is None


def test_confidence_preserves_the_raw_order(model, shapes):
    a, b = shapes

    results = correspond(model, a, b)
    raw = np.array([r.raw_score for r in results])
    conf = np.array([r.confidence for r in results])

    assert np.argmax(conf) == np.argmax(raw)
    assert np.argmin(conf) == np.argmin(raw)
    assert conf.min() == 0.0 and conf.max() == 1.0


def test_tau_extremes(model, shapes):
    a, b = shapes

    assert not any(r.valid for r in correspond(model, a, b, tau=1.0))
    assert all(r.valid for r in correspond(model, a, b, tau=-0.1))


def test_fixed_normalizer_is_used(model, shapes):
    a, b = shapes

    results = correspond(model, a, b, normalizer=ScoreNormalizer(minimum=1.0, maximum=1.0))

    assert all(r.confidence == 0.5 for r in results)


def test_correspondence_targets_are_nearest_reconstructions(model, shapes):
    a, b = shapes
    z_a = shape_code(model, a)
    pev_b = embed_points(model, b, shape_code(model, b))
    with torch.no_grad():
        recon = model.decode(pev_b.o_mu[None], z_a[None])[0].numpy()

    target, _ = correspond_arrays(model, a, b)

    d = ((a[:, None, :] - recon[None, :, :]) ** 2).sum(axis=-1)
    assert np.array_equal(target, np.argmin(d, axis=1))


def test_empty_shape_is_rejected(model, shapes):
    with pytest.raises(DataError):
        correspond(model, np.zeros((0, 3)), shapes[1])


def test_correspondence_csv_round_trip(tmp_path, model, shapes):
    results = correspond(model, *shapes)
    path = tmp_path / "corr.csv"

    write_correspondences_csv(str(path), results)
    loaded = read_correspondences_csv(str(path))

    assert path.read_text().splitlines()[0] == "src_index,tgt_index,raw_score,confidence,valid"
    assert [r.target_index for r in loaded] == [r.target_index for r in results]
    assert [r.valid for r in loaded] == [r.valid for r in results]


def test_chunking_does_not_change_embeddings(model, shapes):
    a, _ = shapes
    z = shape_code(model, a)

    whole = embed_points(model, a, z)
    pieces = embed_points(model, a, z, chunk=7)

    assert torch.allclose(whole.o_mu, pieces.o_mu, atol=1e-12)


def test_segment_labels_are_branch_argmax(model, shapes):
    a, _ = shapes

    labels = segment(model, a)

    pev = embed_points(model, a, shape_code(model, a))
    assert labels.shape == (40,)
    assert np.array_equal(labels, np.argmax(pev.o_mu.numpy(), axis=1))


def test_reconstruct_constant_field_is_empty(shapes):
    model = tiny_model()
    with torch.no_grad():
        model.implicit.mu_head.weight.zero_()
        model.implicit.mu_head.bias.fill_(5.0)

    mesh = reconstruct(model, shapes[0], resolution=8)

    assert mesh.is_empty


def test_reconstruction_stays_in_the_grid(model, shapes):
    mesh = reconstruct(model, shapes[0], resolution=12, iso=0.5)

    if not mesh.is_empty:
        assert np.all(np.abs(mesh.vertices) <= GRID_BOUND + 1e-9)


def test_interpolation_endpoints(model, shapes):
    a, b = shapes

    start = interpolate(model, a, b, 1.0)
    end = interpolate(model, a, b, 0.0)
    recon_b_side, _, _, _ = cross_reconstruct(model, b, a)

    assert start.shape == (40, 3)
    # alpha = 0 decodes A's embeddings under B's code
    assert np.allclose(end, recon_b_side, atol=1e-12)


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_interpolation_rejects_alpha_outside_unit_interval(model, shapes, alpha):
    with pytest.raises(ValueError):
        interpolate(model, *shapes, alpha)


def test_cross_reconstruct_shapes(model, shapes):
    a, b = shapes

    recon_a, recon_b, u_a, u_b = cross_reconstruct(model, a, b)

    assert recon_a.shape == (30, 3)
    assert recon_b.shape == (40, 3)
    assert u_a.shape == (30,) and np.all(u_a > 0)
    assert u_b.shape == (40,) and np.all(u_b > 0)


def test_transfer_attribute(model, shapes):
    a, b = shapes
    attributes = [f"p{i}" for i in range(40)]

    values = transfer_attribute(model, a, attributes, b, tau=0.2)
    none = transfer_attribute(model, a, attributes, b, tau=1.0)

    assert len(values) == 30
    assert all(v is None or v in attributes for v in values)
    assert any(v is not None for v in values)
    assert all(v is None for v in none)


def test_transfer_needs_one_attribute_per_point(model, shapes):
    with pytest.raises(DataError):
        transfer_attribute(model, shapes[0], [1, 2], shapes[1])


def test_embedding_export_round_trip(tmp_path, shapes):
    model = tiny_model(float64=False)
    a, _ = shapes
    labels = np.arange(40) % 3

    table = export_embeddings(model, a, labels)
    write_embeddings_csv(str(tmp_path / "emb.csv"), table)
    loaded = read_embeddings_csv(str(tmp_path / "emb.csv"))

    assert np.array_equal(loaded["o_mu"], table["o_mu"])
    assert np.array_equal(loaded["o_log_var"], table["o_log_var"])
    assert np.array_equal(loaded["label"], labels)


def test_export_rejects_mismatched_labels(model, shapes):
    with pytest.raises(DataError):
        export_embeddings(model, shapes[0], [0, 1])
