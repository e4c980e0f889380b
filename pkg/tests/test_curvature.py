import itertools

import numpy as np
import pytest

from flatland.curvature import hutchinson_trace, hvp_fd, lanczos_topk, power_iteration, spectrum
from flatland.errors import DivergenceError, ValidationError
from flatland.objective import parse_objective


def matvec(H):
    return lambda v: H @ v


def random_symmetric(n, rng):
    M = rng.normal(size=(n, n))
    return (M + M.T) / 2


def test_hutchinson_diagonal_is_exact():
    mean, se = hutchinson_trace(matvec(np.diag([1.0, 2.0, 3.0])), 3, 50, np.random.default_rng(0))
    assert mean == 6.0 and se == 0.0


def test_hutchinson_exhaustive_probes():
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    vals = sorted(float(np.array(z) @ H @ np.array(z)) for z in itertools.product([-1, 1], repeat=2))
    assert vals == [2.0, 2.0, 6.0, 6.0]
    rng = np.random.default_rng(1)
    for d in range(1, 11):
        H = random_symmetric(d, rng)
        probes = np.array(list(itertools.product([-1.0, 1.0], repeat=d)))
        assert np.mean(np.einsum("ij,jk,ik->i", probes, H, probes)) == pytest.approx(np.trace(H), abs=1e-10)


def test_hutchinson_se_scaling():
    H = random_symmetric(30, np.random.default_rng(2))
    scaled = []
    for m in (250, 1000, 4000):
        _, se = hutchinson_trace(matvec(H), 30, m, np.random.default_rng(m))
        scaled.append(se * np.sqrt(m))
    assert max(scaled) / min(scaled) <= 1.25


def test_hutchinson_errors():
    with pytest.raises(ValidationError):
        hutchinson_trace(matvec(np.eye(2)), 2, 1, np.random.default_rng(0))
    with pytest.raises(DivergenceError, match="probe 0"):
        hutchinson_trace(lambda v: v * np.nan, 2, 5, np.random.default_rng(0))


def test_lanczos_diagonal():
    H = np.diag([1.0, 2.0, 3.0])
    rep = lanczos_topk(matvec(H), 3, 1, np.random.default_rng(0))
    assert rep.top_eigenvalues[0] == pytest.approx(3.0, abs=1e-6)
    rep = lanczos_topk(matvec(H), 3, 3, np.random.default_rng(0))
    np.testing.assert_allclose(rep.top_eigenvalues, [3, 2, 1], atol=1e-6)
    assert rep.iterations <= 3 and all(rep.converged)


def test_lanczos_random_100():
    rng = np.random.default_rng(3)
    H = random_symmetric(100, rng)
    rep = lanczos_topk(matvec(H), 100, 10, rng)
    want = np.sort(np.linalg.eigvalsh(H))[::-1][:10]
    for got, ref, ok in zip(rep.top_eigenvalues, want, rep.converged):
        assert ok
        assert abs(got - ref) <= 1e-4 * abs(ref)


def test_lanczos_breakdown_restarts():
    # identity: the Krylov space is one-dimensional, so the first step breaks down
    rep = lanczos_topk(matvec(np.eye(5)), 5, 3, np.random.default_rng(4))
    np.testing.assert_allclose(rep.top_eigenvalues, [1, 1, 1], atol=1e-12)


def test_lanczos_flags_unconverged():
    H = np.diag(np.linspace(1, 1.0001, 60))
    rep = lanczos_topk(matvec(H), 60, 5, np.random.default_rng(5), max_iters=6, tol=1e-14)
    assert not all(rep.converged)


def test_lanczos_k_bounds():
    with pytest.raises(ValidationError):
        lanczos_topk(matvec(np.eye(3)), 3, 4, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        lanczos_topk(matvec(np.eye(60)), 60, 51, np.random.default_rng(0))


def test_lanczos_agrees_with_power_iteration():
    q = parse_objective("quadratic:1,2,3,7")
    hvp = lambda v: q.hvp(np.zeros(4), v)  # noqa: E731
    top = lanczos_topk(hvp, 4, 1, np.random.default_rng(6)).top_eigenvalues[0]
    assert top == pytest.approx(power_iteration(hvp, 4, np.random.default_rng(7)), abs=1e-6)


def test_hvp_fd_examples():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    v = np.array([0.3, -1.2])
    np.testing.assert_allclose(hvp_fd(lambda t: A @ t, np.array([1.0, 2.0]), v), A @ v, atol=1e-9)
    assert hvp_fd(lambda t: 4 * t**3, np.array([1.0]), np.array([1.0]))[0] == pytest.approx(12, abs=1e-4)
    g = lambda t: np.array([np.sin(t[0]) * t[1], t[0] ** 2])  # noqa: E731
    th = np.array([0.4, 1.1])
    np.testing.assert_allclose(hvp_fd(g, th, 2 * v), 2 * hvp_fd(g, th, v), rtol=1e-9)
    with pytest.raises(ValidationError):
        hvp_fd(g, th, np.zeros(2))


@pytest.mark.parametrize("name", ["doublewell2d:0.3,0.05", "quartic:3", "quadratic:2,1;1,2"])
def test_hvp_fd_symmetry(name):
    obj = parse_objective(name)
    rng = np.random.default_rng(8)
    for _ in range(20):
        th, v, w = (rng.uniform(-1, 1, obj.dim) for _ in range(3))
        a = w @ hvp_fd(obj.gradient, th, v)
        b = v @ hvp_fd(obj.gradient, th, w)
        assert abs(a - b) <= 1e-5 * max(1.0, abs(a))


def test_spectrum_report():
    H = np.diag(np.arange(1.0, 21.0))
    rep = spectrum(matvec(H), 20, k=5, m=200, rng=np.random.default_rng(9))
    np.testing.assert_allclose(rep.top_eigenvalues, [20, 19, 18, 17, 16], atol=1e-6)
    assert rep.trace_mean == pytest.approx(210) and rep.m_probes == 200
    d = rep.to_dict()
    assert d["k"] == 5 and len(d["converged"]) == 5
