import numpy as np
import pytest

from shapecorr.geometry import ball_query, ball_query_pairs, nearest_indices, nearest_neighbor


def test_ball_query_is_a_closed_ball_without_the_center():
    # binary-exact spacing so the boundary distance is exactly the radius
    points = np.zeros((7, 3))
    points[:, 0] = np.arange(7) * 0.0625

    idx = ball_query(points, 3, 0.125)

    assert idx.tolist() == [1, 2, 4, 5]


def test_ball_query_isolated_point():
    points = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])

    assert ball_query(points, 0, 0.1).size == 0


def test_ball_query_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        ball_query(np.zeros((2, 3)), 0, 0.0)


def test_ball_query_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        points = rng.uniform(-0.5, 0.5, size=(n, 3))
        center = int(rng.integers(0, n))
        radius = float(rng.uniform(0.05, 0.5))

        expected = [j for j in range(n) if j != center and np.linalg.norm(points[j] - points[center]) <= radius]

        assert ball_query(points, center, radius).tolist() == expected


def test_ball_query_pairs_match_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(0, 30))
        points = rng.uniform(-0.5, 0.5, size=(n, 3))
        radius = float(rng.uniform(0.05, 0.5))

        expected = {(i, j) for i in range(n) for j in range(i + 1, n)
                    if np.linalg.norm(points[i] - points[j]) <= radius}
        got = {tuple(sorted(p)) for p in ball_query_pairs(points, radius).tolist()}

        assert got == expected


def test_nearest_neighbor_exact_hit():
    points = np.array([[0.0, 0, 0], [1, 2, 3], [4, 5, 6]])

    assert nearest_neighbor(np.array([1.0, 2, 3]), points) == (1, 0.0)


def test_nearest_neighbor_tie_goes_to_smaller_index():
    points = np.array([[1.0, 0, 0], [-1.0, 0, 0]])

    idx, dist = nearest_neighbor(np.zeros(3), points)

    assert idx == 0
    assert dist == 1.0


def test_nearest_neighbor_empty_set():
    with pytest.raises(ValueError):
        nearest_neighbor(np.zeros(3), np.zeros((0, 3)))


def test_nearest_neighbor_matches_brute_force(rng):
    for _ in range(100):
        m = int(rng.integers(1, 50))
        points = rng.normal(size=(m, 3))
        query = rng.normal(size=3)

        d = [np.linalg.norm(p - query) for p in points]
        best = min(range(m), key=lambda j: (d[j], j))

        idx, dist = nearest_neighbor(query, points)
        assert idx == best
        assert dist == pytest.approx(d[best], abs=1e-12)


def test_nearest_indices_agrees_with_single_queries(rng):
    points = rng.normal(size=(200, 3))
    queries = rng.normal(size=(50, 3))

    idx, dist = nearest_indices(queries, points, chunk=7)

    for q, i, d in zip(queries, idx, dist):
        j, e = nearest_neighbor(q, points)
        assert i == j
        assert d == pytest.approx(e, abs=1e-12)
