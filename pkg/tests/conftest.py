import math

import numpy as np
import pytest
import torch

from shapecorr.models import Mesh
from shapecorr.nets import init_params

# Box corners are indexed x + 2y + 4z.
CUBE_QUADS = [(0, 4, 6, 2), (1, 3, 7, 5), (0, 1, 5, 4), (2, 6, 7, 3), (0, 2, 3, 1), (4, 5, 7, 6)]

TINY = dict(
    encoder_widths=[8, 8],
    branch_widths=[8],
    num_branches=2,
    trunk_widths=[8],
    inverse_widths=[8, 8],
)


def box_mesh(lo, hi) -> Mesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    vertices = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                         for i in range(8)])
    faces = []
    for a, b, c, d in CUBE_QUADS:
        faces += [(a, b, c), (a, c, d)]
    return Mesh(vertices=vertices, faces=np.asarray(faces, dtype=np.int64))


def uv_sphere(radius: float, stacks: int = 32, slices: int = 64) -> Mesh:
    vertices = [(0.0, 0.0, radius)]
    for i in range(1, stacks):
        theta = math.pi * i / stacks
        for j in range(slices):
            phi = 2 * math.pi * j / slices
            vertices.append((radius * math.sin(theta) * math.cos(phi),
                             radius * math.sin(theta) * math.sin(phi),
                             radius * math.cos(theta)))
    vertices.append((0.0, 0.0, -radius))
    bottom = len(vertices) - 1

    def ring(i, j):
        return 1 + (i - 1) * slices + j % slices

    faces = []
    for j in range(slices):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)))
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces += [(a, d, c), (a, c, b)]
    return Mesh(vertices=np.asarray(vertices, dtype=np.float64), faces=np.asarray(faces, dtype=np.int64))


def tiny_model(seed: int = 0, float64: bool = True, **overrides):
    params = dict(TINY)
    params.update(overrides)
    model = init_params(d=8, k=4, seed=seed, **params)
    return model.double() if float64 else model


@pytest.fixture
def cube():
    return box_mesh([-0.25, -0.25, -0.25], [0.25, 0.25, 0.25])


@pytest.fixture
def sphere():
    return uv_sphere(0.4)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
