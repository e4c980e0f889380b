import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatland.errors import DivergenceError, ValidationError
from flatland.kernels import (
    INF,
    KernelConfig,
    couple_beta_sigma,
    geometric_checkpoints,
    lambda_max,
    run_chain,
    run_chains,
    run_ensemble,
    sigma_from_beta,
    step,
)
from flatland.objective import exact_model, from_value_and_gradient, make_quadratic

Q1 = exact_model(make_quadratic([[1.0]]))


def test_zero_drift_is_fixed_point():
    flat = from_value_and_gradient(lambda t: np.zeros(np.shape(t)[:-1]), lambda t: np.zeros_like(np.asarray(t, float)),
                                   dim=2, name="flat")
    cfg = KernelConfig("fSGLD", 0.1, sigma=0.7)
    th = np.array([0.3, -2.0])
    np.testing.assert_array_equal(step(th, cfg, exact_model(flat), np.random.default_rng(0)), th)


def test_sgd_linear_contraction():
    cfg = KernelConfig("fSGLD", 0.1, sigma=0.0)
    assert step(np.array([1.0]), cfg, Q1, np.random.default_rng(0))[0] == pytest.approx(0.9)


def test_rwp_one_step_moments():
    cfg = KernelConfig("fSGLD", 0.1, sigma=0.5)
    rng = np.random.default_rng(11)
    out = np.array([step(np.array([1.0]), cfg, Q1, rng)[0] for _ in range(100_000)])
    se = out.std(ddof=1) / math.sqrt(len(out))
    assert abs(out.mean() - 0.9) <= 4 * se
    assert out.var(ddof=1) == pytest.approx(0.0025, rel=0.1)


def test_sam_update_formula():
    A = np.diag([1.0, 3.0])
    sgm = exact_model(make_quadratic(A))
    th = np.array([1.0, 1.0])
    cfg = KernelConfig("SAM", 0.1, rho=0.05)
    g1 = A @ th
    adv = th + 0.05 * g1 / (np.linalg.norm(g1) + 1e-12)
    np.testing.assert_allclose(step(th, cfg, sgm, np.random.default_rng(0)), th - 0.1 * A @ adv)


def test_divergence_reports_step():
    cfg = KernelConfig("SGD", 3.0)
    with pytest.raises(DivergenceError) as err:
        run_chain([1.0], cfg, exact_model(make_quadratic([[1.0]])), 5000, burn_in=0, thin=1)
    assert err.value.step is not None and err.value.step > 1


def test_sgd_geometric_decay_exact():
    traj = run_chain([1.0], KernelConfig("SGD", 0.5), Q1, 10, burn_in=0, thin=1)
    np.testing.assert_array_equal(traj.iterates[:, 0], 0.5 ** np.arange(1, 11))
    assert traj.grad_evals == 10
    np.testing.assert_array_equal(traj.steps, np.arange(1, 11))


def test_same_seed_bit_identical():
    cfg = KernelConfig("fSGLD", 0.01, beta=50.0, sigma=0.2)
    a = run_chain([0.5], cfg, Q1, 2000, seed=9, chain_id=3)
    b = run_chain([0.5], cfg, Q1, 2000, seed=9, chain_id=3)
    np.testing.assert_array_equal(a.iterates, b.iterates)
    c = run_chain([0.5], cfg, Q1, 2000, seed=9, chain_id=4)
    assert not np.array_equal(a.iterates, c.iterates)


def test_sam_grad_evals_double():
    traj = run_chain([1.0], KernelConfig("SAM", 0.01, rho=0.05), Q1, 100, burn_in=0, thin=1)
    assert traj.grad_evals == 200


def test_sgld_equals_fsgld_with_zero_sigma():
    a = run_chain([0.5], KernelConfig("SGLD", 0.01, beta=20.0, sigma=0.3), Q1, 500, seed=1)
    b = run_chain([0.5], KernelConfig("fSGLD", 0.01, beta=20.0, sigma=0.0), Q1, 500, seed=1)
    np.testing.assert_array_equal(a.iterates, b.iterates)


def test_sgd_embedding():
    a = run_chain([0.5], KernelConfig("fSGLD", 0.01, beta=INF, sigma=0.0), Q1, 500, seed=1)
    b = run_chain([0.5], KernelConfig("SGD", 0.01), Q1, 500, seed=1)
    np.testing.assert_array_equal(a.iterates, b.iterates)


def test_noise_stream_layout_independent_of_sigma():
    # with sigma = 0 the epsilon block is still drawn, so the xi stream lines up
    # with a run whose epsilon does not move the gradient (zero curvature)
    flat = from_value_and_gradient(lambda t: np.zeros(np.shape(t)[:-1]), lambda t: np.zeros_like(np.asarray(t, float)),
                                   dim=1, name="flat")
    a = run_chain([0.0], KernelConfig("fSGLD", 0.01, beta=4.0, sigma=0.0), exact_model(flat), 200, seed=2)
    b = run_chain([0.0], KernelConfig("fSGLD", 0.01, beta=4.0, sigma=5.0), exact_model(flat), 200, seed=2)
    np.testing.assert_array_equal(a.iterates, b.iterates)


def test_burn_in_validation():
    with pytest.raises(ValidationError):
        run_chain([0.0], KernelConfig("SGD", 0.1), Q1, 10, burn_in=10, thin=1)
    with pytest.raises(ValidationError):
        run_chain([0.0], KernelConfig("SGD", 0.1), Q1, 10, burn_in=0, thin=0)


def test_run_chains_threads_match_serial():
    cfg = KernelConfig("fSGLD", 0.01, beta=30.0, sigma=0.1)
    serial = run_chains([1.0], cfg, Q1, 500, 4, seed=5)
    threaded = run_chains([1.0], cfg, Q1, 500, 4, seed=5, n_jobs=3)
    for s, t in zip(serial, threaded):
        assert s.chain_id == t.chain_id
        np.testing.assert_array_equal(s.iterates, t.iterates)


@pytest.mark.parametrize("lam", [0.1, 0.01])
def test_stationary_variance(lam):
    beta = 10.0
    cfg = KernelConfig("SGLD", lam, beta=beta)
    ens = run_ensemble([0.0], cfg, Q1, 20_000, 50, seed=3, burn_in=2000, thin=1)
    var = ens.pooled[:, 0].var()
    assert var == pytest.approx(1.0 / beta, rel=0.1)


def test_ensemble_checkpoints_and_accounting():
    cfg = KernelConfig("SAM", 0.1, rho=0.01)
    ens = run_ensemble([2.0], cfg, Q1, 100, 3, seed=0)
    assert ens.checkpoints == [0, 10, 32, 100]
    np.testing.assert_array_equal(ens.at(0), np.full((3, 1), 2.0))
    assert ens.grad_evals == 2 * 100 * 3


def test_geometric_checkpoints():
    assert geometric_checkpoints(100_000)[:6] == [0, 10, 32, 100, 316, 1000]
    assert geometric_checkpoints(100_000)[-1] == 100_000
    assert geometric_checkpoints(50) == [0, 10, 32, 50]


# --- coupling and step-size ceiling


def test_coupling_examples():
    assert couple_beta_sigma(0.1, 0.0) == pytest.approx(1e4)
    assert couple_beta_sigma(0.01, 0.01) == pytest.approx(10 ** (8 / 1.01), rel=1e-12)
    assert couple_beta_sigma(0.01, 0.01) == pytest.approx(8.3328e7, rel=1e-4)
    assert sigma_from_beta(1e4, 0.0) == pytest.approx(0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 0.999), st.floats(0.0, 2.0))
def test_coupling_round_trip(sigma, eta):
    assert sigma_from_beta(couple_beta_sigma(sigma, eta), eta) == pytest.approx(sigma, rel=1e-12)


@pytest.mark.parametrize("sigma", [0.0, 1.0, 1.5, -0.1])
def test_coupling_rejects_sigma(sigma):
    with pytest.raises(ValidationError):
        couple_beta_sigma(sigma, 0.01)


def test_lambda_max_examples():
    assert lambda_max(1, 1, 16) == pytest.approx(0.00390625)
    assert lambda_max(8, 0, 1) == pytest.approx(0.125)
    assert lambda_max(0.001, 1, 1) == pytest.approx(1.5625e-5)
    with pytest.raises(ValidationError):
        lambda_max(0, 1, 1)


def test_kernel_config_validation_and_round_trip():
    with pytest.raises(ValidationError):
        KernelConfig("Adam", 0.1)
    with pytest.raises(ValidationError):
        KernelConfig("SGD", 0.0)
    with pytest.raises(ValidationError):
        KernelConfig("SAM", 0.1)
    c = KernelConfig.coupled("fSGLD", step_size=0.01, eta=0.01, beta=200.0)
    assert c.beta == pytest.approx(200.0)
    assert c.sigma == pytest.approx(200 ** (-1.01 / 4))
    for cfg in (c, KernelConfig("SGLD", 0.1, beta=5.0), KernelConfig("SAM", 0.1, rho=0.05), KernelConfig("SGD", 0.2)):
        assert KernelConfig.from_dict(cfg.to_dict()) == cfg
