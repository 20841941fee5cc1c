import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from openvox.errors import ValidationError
from openvox.semantics import (
    SemanticFeature,
    aggregate_by_coverage,
    aggregate_masked_feature,
    compute_distinctiveness,
    fuse_semantic,
    mean_distinctiveness,
    patch_coverage,
    quality,
    s_angle,
    s_dist,
    s_sem,
    s_size,
)


def test_uniform_grid_is_zero():
    assert np.all(compute_distinctiveness(np.ones((4, 4, 8))) == 0)


def test_two_by_two_hand_case():
    grid = np.array([[[1, 0], [1, 0]], [[1, 0], [0, 1]]], dtype=float)
    d = compute_distinctiveness(grid)
    assert np.allclose(d.ravel(), [2 / 3, 2 / 3, 2 / 3, 2.0], atol=1e-3)


grids = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5)),
                   elements=st.floats(-10, 10))


@given(grids, hnp.arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(0.1, 10))
def test_distinctiveness_translation_and_scale(grid, shift, scale):
    d = compute_distinctiveness(grid)
    resid = np.linalg.norm(grid - grid.reshape(-1, grid.shape[2]).mean(0), axis=2).mean()
    assert np.all(d >= 0)
    if resid > 1e-2:
        assert abs(d.mean() - 1) < 1e-3
        moved = compute_distinctiveness(grid + shift[: grid.shape[2]])
        assert np.allclose(moved, d, atol=1e-3)
        if resid * scale > 1e-1:
            assert np.allclose(compute_distinctiveness(grid * scale), d, rtol=1e-3, atol=1e-3)


def test_random_grid_mean_one():
    d = compute_distinctiveness(np.random.default_rng(0).normal(size=(8, 8, 16)))
    assert d.mean() == pytest.approx(1.0, abs=1e-3)


def test_patch_coverage_fraction():
    mask = np.zeros((4, 4))
    mask[:2, :1] = 1
    assert patch_coverage(mask, 2).tolist() == [[0.5, 0.0], [0.0, 0.0]]
    with pytest.raises(ValidationError):
        patch_coverage(np.zeros((3, 4)), 2)


def grid_two():
    g = np.zeros((1, 2, 3))
    g[0, 0] = [1, 0, 0]
    g[0, 1] = [0, 1, 1]
    return g


def test_aggregate_one_patch():
    g = grid_two()
    mask = np.zeros((2, 4))
    mask[:, :2] = 1
    assert np.allclose(aggregate_masked_feature(g, np.ones((1, 2)), mask, 2), [1, 0, 0])


def test_aggregate_midpoint_and_weighted():
    g = grid_two()
    mask = np.ones((2, 4))
    mid = (g[0, 0] + g[0, 1]) / 2
    assert np.allclose(aggregate_masked_feature(g, np.ones((1, 2)), mask, 2), mid / np.linalg.norm(mid), atol=1e-6)
    w = (2 * g[0, 0] + 0.5 * g[0, 1]) / 2.5
    expected = w / math.sqrt(sum(x * x for x in w))
    assert np.allclose(aggregate_masked_feature(g, np.array([[2.0, 0.5]]), mask, 2), expected, atol=1e-6)


def test_aggregate_fallback_and_empty():
    g = grid_two()
    cover = np.array([[0.1, 0.0]])
    assert np.allclose(aggregate_by_coverage(g, cover, np.ones((1, 2))), [1, 0, 0])
    with pytest.raises(ValidationError):
        aggregate_by_coverage(g, np.zeros((1, 2)), np.ones((1, 2)))


@given(hnp.arrays(np.float64, (3, 3, 4), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3, 3), elements=st.floats(0.3, 1)), st.floats(0.1, 10))
def test_aggregate_unit_norm_and_weight_scale(grid, cover, c):
    try:
        v = aggregate_by_coverage(grid, cover, np.ones((3, 3)))
    except ValidationError:
        return
    assert np.linalg.norm(v) == pytest.approx(1, abs=1e-4)
    assert np.allclose(aggregate_by_coverage(grid, cover, np.full((3, 3), c)), v, atol=1e-5)


def test_s_size_cases():
    assert s_size(0, 10, 10) == 0
    assert s_size(50, 10, 10) == 1
    assert s_size(10, 10, 10) == pytest.approx(0.33)
    for frac in np.linspace(1 / 3.3, 1, 20):
        assert s_size(frac * 10000, 100, 100) == 1
    with pytest.raises(ValidationError):
        s_size(101, 10, 10)


def test_s_angle_cases():
    n = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    assert s_angle(n, -n) == 1.0
    assert s_angle(n, np.array([[1, 0, 0.0], [0, 1, 0.0]])) == 0.0
    assert s_angle(n, np.array([[0, 0, -1.0], [0, 0, 1.0]])) == 0.5


def unit_rows(n):
    return hnp.arrays(np.float64, (n, 3), elements=st.floats(-1, 1)).filter(
        lambda a: np.all(np.linalg.norm(a, axis=1) > 0.1)).map(lambda a: a / np.linalg.norm(a, axis=1, keepdims=True))


@given(unit_rows(6), unit_rows(6))
def test_s_angle_range(normals, rays):
    assert 0 <= s_angle(normals, rays) <= 1


def test_s_sem_and_s_dist():
    v = np.array([0.6, 0.8])
    assert s_sem(v, v) == pytest.approx(1.0)
    assert s_sem(v, np.array([-0.8, 0.6])) == pytest.approx(0, abs=1e-7)
    assert s_sem(np.array([1.0, 0]), np.array([-0.3, math.sqrt(1 - 0.09)])) == 0
    assert (s_dist(1.0), s_dist(0.0), s_dist(2.0)) == (1.0, 0.5, 1.5)
    assert mean_distinctiveness(np.array([[2.0, 0.0]]), np.array([[1.0, 1.0]])) == 1.0


def test_quality_product():
    assert quality(1, 1, 1, 1).q == 1
    assert quality(0.33, 0.5, 0.8, 1.2).q == pytest.approx(0.1584, abs=1e-6)
    assert quality(0, 0.7, 0.9, 1.1).q == 0


@given(*[st.floats(0, 1, width=32)] * 3, st.floats(0.5, 2, width=32))
def test_quality_bit_exact_and_monotone(a, b, c, d):
    q = quality(a, b, c, d)
    f = np.float32
    assert q.q == ((f(a) * f(b)) * f(c)) * f(d)
    assert q.s_geo == f(a) * f(b)
    assert q.q >= 0
    assert quality(min(1.0, a + 0.1), b, c, d).q >= q.q


def feat(q, seed):
    v = np.random.default_rng(seed).normal(size=4).astype(np.float32)
    return SemanticFeature(v / np.linalg.norm(v), quality(q, 1, 1, 1))


def test_fuse_rules():
    a, b = feat(0.5, 0), feat(0.6, 1)
    assert fuse_semantic(a, b) is b
    assert fuse_semantic(a, feat(0.5, 2)) is a
    assert fuse_semantic(None, a) is a


def test_fuse_order_independent():
    obs = [feat(q, i) for i, q in enumerate([0.1, 0.7, 0.3, 0.9, 0.2])]
    best = max(obs, key=lambda o: o.q)
    for perm in itertools.permutations(obs):
        cur = None
        for o in perm:
            cur = fuse_semantic(cur, o)
        assert cur is best
