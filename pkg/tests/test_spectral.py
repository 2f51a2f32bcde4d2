import math

import numpy as np
import pytest

from conftest import make_model
from stochsource.errors import InvalidConfigurationError, UnsupportedOracleError
from stochsource.experiments import RunConfig, build_model
from stochsource.forward import ExponentialFactor, covariance_matrix_spectral, expectation_variance_spectral, solve_deterministic
from stochsource.grid import eigen_pairs, l2_inner, l2_norm, linf_norm, project
from stochsource.spectral import (
    forward_map,
    homogeneous_flow,
    noise_level,
    normal_equation_residual,
    rate_study,
    reconstruct_exact,
    regularized_solution,
    spectral_forward,
)


@pytest.fixture(scope="module")
def sf_unit():
    return spectral_forward(make_model(100, 20))


def test_forward_map_first_mode(sf_unit):
    phi1 = sf_unit.eig.vectors[0]
    assert linf_norm(forward_map(sf_unit, phi1) - (1 - math.exp(-1)) * phi1) <= 1e-12


def test_forward_map_zero(sf_unit):
    assert np.all(forward_map(sf_unit, np.zeros(101)) == 0)


def test_forward_map_matches_time_stepping():
    model, f_exact = build_model(RunConfig(example="example2", K=200, theta=0.5))
    sf = spectral_forward(model)
    fd = solve_deterministic(model, u0=np.zeros(101), full=False)
    assert linf_norm(forward_map(sf, f_exact) - fd) <= 1e-3


def test_rejects_non_laplacian():
    with pytest.raises(UnsupportedOracleError):
        spectral_forward(make_model(40, 10, c=1.0))


def test_reconstruct_round_trip():
    model = make_model(100, 20, R=ExponentialFactor(1.0, 0.5))
    sf = spectral_forward(model)
    f = sf.eig.synthesize(np.random.default_rng(0).standard_normal(30) / np.arange(1, 31) ** 2)
    u0 = np.sin(2 * model.grid.x)
    mean = forward_map(sf, f) + homogeneous_flow(sf, u0)
    assert linf_norm(reconstruct_exact(sf, mean, u0) - f) <= 1e-10


def test_reconstruct_initial_state_only(sf_unit):
    u0 = np.sin(sf_unit.grid.x) + 0.3 * np.sin(4 * sf_unit.grid.x)
    assert linf_norm(reconstruct_exact(sf_unit, homogeneous_flow(sf_unit, u0), u0)) <= 1e-12


def test_reconstruct_amplifies_high_modes(sf_unit):
    # an error eps in mode n comes back as eps / q_n
    eps = 1e-6
    for n in (1, 10, 25):
        phi = sf_unit.eig.vectors[n - 1]
        out = reconstruct_exact(sf_unit, eps * phi, np.zeros(101))
        assert project(out, sf_unit.eig)[n - 1] == pytest.approx(eps / sf_unit.q[n - 1], rel=1e-10)
    assert sf_unit.q[24] < sf_unit.q[0] / 100


def test_regularized_large_gamma_returns_prior(sf_unit):
    x = sf_unit.grid.x
    f0 = np.sin(x) - 0.5 * np.sin(3 * x)
    h = forward_map(sf_unit, np.sin(2 * x))
    assert linf_norm(regularized_solution(sf_unit, h, f0, 1e8) - f0) <= 1e-8


def test_regularized_small_gamma_recovers_source(sf_unit):
    x = sf_unit.grid.x
    f = np.sin(x) + 0.2 * np.sin(5 * x)
    out = regularized_solution(sf_unit, forward_map(sf_unit, f), np.zeros(101), 1e-12)
    assert linf_norm(out - f) <= 1e-8


def test_regularized_solves_normal_equation(sf_unit):
    rng = np.random.default_rng(4)
    h, f0 = rng.standard_normal((2, 101))
    h[0] = h[-1] = f0[0] = f0[-1] = 0
    f = regularized_solution(sf_unit, h, f0, 3e-3)
    res = normal_equation_residual(sf_unit, f, h, f0, 3e-3)
    assert np.max(np.abs(res)) <= 1e-12 * max(1.0, np.max(np.abs(project(h, sf_unit.eig))))


def test_regularized_contracts_each_mode(sf_unit):
    h = sf_unit.eig.synthesize(np.ones(30))
    c = project(regularized_solution(sf_unit, h, np.zeros(101), 1e-2), sf_unit.eig)
    # |c_n| = q_n / (q_n^2 + gamma) never exceeds the unregularised 1 / q_n
    assert np.all(np.abs(c) <= 1 / sf_unit.q + 1e-12)
    assert np.all(np.abs(c) <= 1 / (2 * math.sqrt(1e-2)) + 1e-12)


def test_regularized_rejects_gamma(sf_unit):
    with pytest.raises(InvalidConfigurationError):
        regularized_solution(sf_unit, np.zeros(101), np.zeros(101), 0.0)


def test_rate_study_without_noise_has_no_slope():
    model = make_model(100, 20, f=np.sin)
    study = rate_study(model, [10, 40, 160], 4, 0.5, 0)
    assert study.slope is None
    assert all(d == 0 for d in study.delta)


def test_rate_study_needs_three_sizes(example2):
    model, _ = example2
    with pytest.raises(InvalidConfigurationError):
        rate_study(model, [10, 40, 40], 4, 0.5, 0)
    with pytest.raises(InvalidConfigurationError):
        rate_study(model, [10, 40, 160], 0, 0.5, 0)


def test_rate_study_gamma_rule(example2):
    model, _ = example2
    study = rate_study(model, [10, 40, 160], 4, 0.5, 0)
    for d1, d2, g1, g2 in zip(study.delta, study.delta[1:], study.gamma, study.gamma[1:]):
        assert d1 / d2 == pytest.approx(2.0, rel=1e-12)
        assert g1 / g2 == pytest.approx(2 ** (2 / 3), rel=1e-12)
    assert study.delta[0] == pytest.approx(math.sqrt(0.5) * l2_norm(model.g, model.grid) / math.sqrt(10), rel=1e-12)


def test_rate_study_noise_scaling_is_ensemble_scaling(example2):
    # doubling g is the same as quartering n_obs: identical errors for paired draws
    model, _ = example2
    doubled = model.replace(g=2 * model.g)
    a = rate_study(doubled, [40, 160, 640], 8, 0.5, 3)
    b = rate_study(model, [10, 40, 160], 8, 0.5, 3)
    assert np.allclose(a.delta, b.delta, rtol=1e-12)
    assert np.allclose(a.mse, b.mse, rtol=1e-8)


def test_rate_study_slope_in_range(example2):
    model, _ = example2
    study = rate_study(model, [10, 40, 160, 640], 50, 0.5, 0)
    assert 1.1 <= study.slope <= 1.6
    assert all(m1 > m2 for m1, m2 in zip(study.mse, study.mse[1:]))


def test_modal_noise_matches_integrated_variance(example2):
    # the trace of the modal covariance is the integral of the pointwise variance
    model, _ = example2
    eig = eigen_pairs(model.grid, 30)
    cov = covariance_matrix_spectral(eig, model.g, model.tmesh.T)
    _, var = expectation_variance_spectral(eig, model)
    integral = l2_inner(var, np.ones(101), model.grid)
    assert np.trace(cov) == pytest.approx(integral, rel=1e-3)


def test_noise_level_formula(example2):
    model, _ = example2
    assert noise_level(model, 4) == pytest.approx(math.sqrt(0.5) * l2_norm(model.g, model.grid) / 2, rel=1e-14)
