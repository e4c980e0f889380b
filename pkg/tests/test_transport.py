import itertools
import math

import numpy as np
import pytest

from flatland.errors import ValidationError
from flatland.gibbs import GridSpec, build_gibbs, sample_measure
from flatland.objective import make_quadratic
from flatland.transport import equalize_1d, wp_1d, wp_assignment, wp_to_measure


def brute_force(a, b, p):
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1) ** p
    best = min(cost[np.arange(len(a)), list(perm)].mean() for perm in itertools.permutations(range(len(a))))
    return best ** (1 / p)


def test_point_masses_and_sorted_shift():
    assert wp_1d([0.0], [3.0], 1) == 3.0
    assert wp_1d([0.0, 2.0], [1.0, 3.0], 1) == 1.0
    a = np.random.default_rng(0).normal(size=50)
    assert wp_1d(a, a + 0.7, 1) == pytest.approx(0.7)
    assert wp_1d(a, a - 0.7, 2) == pytest.approx(0.7)


def test_empty_and_bad_inputs():
    with pytest.raises(ValidationError):
        wp_1d([], [1.0])
    with pytest.raises(ValidationError):
        wp_1d([1.0], [1.0], p=3)
    with pytest.raises(ValidationError):
        wp_assignment(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValidationError):
        wp_assignment(np.zeros((1025, 1)), np.zeros((1025, 1)))
    with pytest.raises(ValidationError):
        wp_1d([np.nan], [1.0])


def test_assignment_identity():
    a = np.random.default_rng(1).normal(size=(20, 3))
    assert wp_assignment(a, a.copy(), 2) == 0.0


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(200):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        p = 1 + trial % 2
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert wp_assignment(a, b, p) == pytest.approx(brute_force(a, b, p), rel=1e-12, abs=1e-14)


def test_one_dimensional_assignment_equals_sorting():
    rng = np.random.default_rng(3)
    for p in (1, 2):
        a, b = rng.normal(size=300), rng.exponential(size=300)
        assert abs(wp_assignment(a[:, None], b[:, None], p) - wp_1d(a, b, p)) <= 1e-10


def test_metric_axioms():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b, c = (rng.normal(rng.normal(), 1.0, size=40) for _ in range(3))
        for p in (1, 2):
            assert wp_1d(a, b, p) == wp_1d(b, a, p)
            assert wp_1d(a, c, p) <= wp_1d(a, b, p) + wp_1d(b, c, p) + 1e-9
        assert wp_1d(a, b, 1) <= wp_1d(a, b, 2) + 1e-12
    assert wp_1d([1.0, 2.0], [2.0, 1.0], 2) == 0.0


def test_unequal_sizes_are_resampled():
    a = np.linspace(0, 1, 1000)
    b = np.linspace(0, 1, 10)
    x, y, flag = equalize_1d(a, b)
    assert flag and len(x) == len(y) == 10
    assert wp_1d(a, b, 1) < 0.06


def test_gaussian_shift_w2():
    rng = np.random.default_rng(5)
    n = 100_000
    vals = []
    for _ in range(8):
        vals.append(wp_1d(rng.normal(0, 1, n), rng.normal(1, 1, n), 2))
    vals = np.array(vals)
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 1.0) <= 4 * se


def test_to_measure_self_distance():
    m = build_gibbs(make_quadratic([[1.0]]), "u", 1.0, GridSpec.box(-8, 8, 4096))
    rng = np.random.default_rng(6)
    cloud = sample_measure(m, 10_000, rng)
    w, se = wp_to_measure(cloud, m, 2, 10_000, rng)
    baseline = wp_1d(sample_measure(m, 10_000, rng), sample_measure(m, 10_000, rng), 2)
    assert w <= 3 * baseline
    assert se >= 0


def test_to_measure_point_mass():
    m = build_gibbs(make_quadratic([[1.0]]), "u", 1e6, GridSpec.box(-6, 6, 1024))
    cloud = np.full((500, 1), m.mode()[0])
    w, _ = wp_to_measure(cloud, m, 2, 500, np.random.default_rng(7))
    assert w <= m.grid.spacing[0]


def test_to_measure_2d_uses_assignment():
    obj = make_quadratic(np.eye(2))
    m = build_gibbs(obj, "u", 1.0, GridSpec.box(-6, 6, 256, dim=2))
    rng = np.random.default_rng(8)
    cloud = sample_measure(m, 300, rng) + np.array([1.0, 0.0])
    w, se = wp_to_measure(cloud, m, 2, 300, rng)
    assert 0.8 < w < 1.6
