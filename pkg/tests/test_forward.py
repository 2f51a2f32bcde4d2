import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from stochsource.errors import InvalidConfigurationError, InvalidModelError, UnsupportedOracleError
from stochsource.experiments import FIELDS
from stochsource.forward import (
    ExponentialFactor,
    assemble_operator,
    covariance_spectral,
    discrete_variance,
    expectation_variance_spectral,
    forward_terminal,
    regularity_bound_check,
    simulate_path,
    simulate_paths,
    solve_deterministic,
    source_time_integrals,
)
from stochsource.grid import Grid, eigen_pairs, l2_inner, l2_norm, linf_norm

GRID = Grid(math.pi, 100)


def test_laplacian_of_sine():
    op = assemble_operator(GRID)
    s = GRID.sample(np.sin)
    assert linf_norm(op.apply(s) + s) <= GRID.spacing**2


def test_operator_zero_field():
    op = assemble_operator(GRID, 1.0, GRID.sample(lambda x: x))
    assert np.all(op.apply(np.zeros(101)) == 0)


def test_operator_with_reaction():
    x = GRID.x
    op = assemble_operator(GRID, 1.0, x)
    s = np.sin(x)
    assert linf_norm(op.apply(s) - (-s - x * s)) <= GRID.spacing**2


def test_operator_symmetric_negative_definite():
    op = assemble_operator(GRID, GRID.sample(lambda x: 1 + 0.3 * np.sin(x)), GRID.sample(lambda x: x))
    A = op.matrix()
    assert np.array_equal(A, A.T)
    assert np.max(np.linalg.eigvalsh(A)) < 0


@pytest.mark.parametrize("a,c", [(0.0, 0.0), (-1.0, 0.0), (1.0, -0.1)])
def test_operator_rejects_bad_coefficients(a, c):
    with pytest.raises(InvalidModelError):
        assemble_operator(GRID, a, c)


def test_model_rejects_nonpositive_time_factor():
    with pytest.raises(InvalidModelError):
        make_model(10, 5, R=ExponentialFactor(-1.0, 0.0))


def test_model_rejects_theta():
    with pytest.raises(InvalidConfigurationError):
        make_model(10, 5, theta=0.3)


def test_deterministic_zero():
    st_field = solve_deterministic(make_model(50, 10))
    assert np.all(st_field.values == 0)


@pytest.mark.parametrize("theta,tol", [(1.0, 1e-3), (0.5, 1e-4)])
def test_heat_decay(theta, tol):
    m = make_model(100, 200, u0=np.sin, theta=theta)
    u = solve_deterministic(m, full=False)
    assert linf_norm(u - math.exp(-1) * np.sin(m.grid.x)) <= tol


def test_constant_source_response():
    m = make_model(100, 200, f=np.sin, theta=0.5)
    u = solve_deterministic(m, full=False)
    assert linf_norm(u - (1 - math.exp(-1)) * np.sin(m.grid.x)) <= 1e-4


def test_second_order_in_space():
    errs = []
    for M in (25, 50, 100):
        m = make_model(M, 4000, u0=np.sin, theta=0.5)
        errs.append(linf_norm(solve_deterministic(m, full=False) - math.exp(-1) * np.sin(m.grid.x)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_full_history_boundaries_are_zero():
    m = make_model(40, 10, u0=np.sin, f=np.sin)
    hist = solve_deterministic(m).values
    assert hist.shape == (11, 41)
    assert np.all(hist[:, 0] == 0) and np.all(hist[:, -1] == 0)


def test_forward_terminal_stacked_matches_single():
    m = make_model(40, 10, R=ExponentialFactor(1.0, 1.0))
    rng = np.random.default_rng(0)
    F = rng.standard_normal((3, 41))
    stacked = forward_terminal(m, F)
    for i in range(3):
        assert np.allclose(stacked[i], forward_terminal(m, F[i]), rtol=0, atol=1e-14)


def test_noise_free_path_equals_deterministic():
    m = make_model(60, 20, u0=np.sin, f=np.sin, R=ExponentialFactor(1.0, 1.0))
    assert np.array_equal(simulate_path(m, 7), solve_deterministic(m, full=False))


def test_path_determinism_and_batch_independence():
    m = make_model(60, 20, u0=np.sin, g=lambda x: x)
    a = simulate_path(m, 3)
    assert np.array_equal(a, simulate_path(m, 3))
    batch = simulate_paths(m, [1, 2, 3, 4], chunk=3)
    assert np.allclose(batch[2], a, rtol=0, atol=1e-14)
    assert not np.allclose(batch[0], a)


def test_full_path_history():
    m = make_model(30, 8, g=0.5)
    path = simulate_path(m, 11, full=True)
    assert path.values.shape == (9, 31)
    assert np.array_equal(path.terminal, simulate_path(m, 11))


def test_monte_carlo_mean_converges():
    m = make_model(100, 200, f=FIELDS["piecewise_ramp"], g=0.5, R=ExponentialFactor(1.0, 1.0))
    mean, _ = expectation_variance_spectral(eigen_pairs(m.grid, 30), m)
    paths = simulate_paths(m, range(1, 2001))
    rms = [float(np.sqrt(np.mean((paths[:n].mean(axis=0) - mean) ** 2))) for n in (20, 200, 2000)]
    assert rms[0] > rms[1] > rms[2]


def test_spectral_variance_boundary_and_bound(example2):
    model, _ = example2
    _, var = expectation_variance_spectral(eigen_pairs(model.grid, 30), model)
    assert var[0] == 0 and var[-1] == 0
    assert np.all(var >= 0)
    bound = l2_norm(model.g, model.grid) ** 2 / 2.0
    assert l2_inner(var, np.ones_like(var), model.grid) <= bound


def test_spectral_variance_single_mode():
    T = 1.3
    m = make_model(100, 20, T=T, g=lambda x: math.sqrt(2 / math.pi) * np.sin(x))
    _, var = expectation_variance_spectral(eigen_pairs(m.grid, 30), m)
    phi = math.sqrt(2 / math.pi) * np.sin(m.grid.x)
    expected = phi**2 * (1 - math.exp(-2 * T)) / 2
    assert np.allclose(var, expected, rtol=0, atol=1e-9)


def test_discrete_variance_close_to_spectral(example2_fine):
    model, _ = example2_fine
    _, var = expectation_variance_spectral(eigen_pairs(model.grid, 30), model)
    dv = discrete_variance(model)
    inner = slice(5, -5)
    assert np.max(np.abs(dv[inner] / var[inner] - 1)) < 0.01


def test_discrete_variance_time_bias_is_first_order():
    gaps = []
    for K in (50, 100, 200):
        model = make_model(100, K, g=0.5, R=ExponentialFactor(1.0, 1.0))
        _, var = expectation_variance_spectral(eigen_pairs(model.grid, 30), model)
        gaps.append(abs(discrete_variance(model)[50] / var[50] - 1))
    assert gaps[0] / gaps[1] == pytest.approx(2.0, rel=0.15)
    assert gaps[1] / gaps[2] == pytest.approx(2.0, rel=0.15)


def test_spectral_oracle_requires_laplacian(example1):
    model, _ = example1
    with pytest.raises(UnsupportedOracleError):
        expectation_variance_spectral(eigen_pairs(model.grid, 30), model)


def test_covariance_diagonal_matches_variance(example2):
    model, _ = example2
    eig = eigen_pairs(model.grid, 30)
    _, var = expectation_variance_spectral(eig, model)
    for j in (10, 50, 77):
        assert covariance_spectral(eig, model.g, 1.0, j, j) == pytest.approx(var[j], rel=1e-6)
    assert covariance_spectral(eig, model.g, 1.0, 0, 40) == 0.0


@given(st.integers(1, 99), st.integers(1, 99))
@settings(max_examples=40, deadline=None)
def test_covariance_cauchy_schwarz(i, j):
    g = GRID.sample(lambda x: 0.5 + 0.2 * x)
    eig = eigen_pairs(GRID, 30)
    c = covariance_spectral(eig, g, 1.0, i, j)
    vi = covariance_spectral(eig, g, 1.0, i, i)
    vj = covariance_spectral(eig, g, 1.0, j, j)
    assert abs(c) <= math.sqrt(vi * vj) * (1 + 1e-12)


def test_source_time_integrals_closed_form_matches_quadrature():
    lam = np.arange(1, 11) ** 2.0
    R = ExponentialFactor(1.0, 1.0)
    closed = source_time_integrals(R, lam, 1.0)
    quad = source_time_integrals(lambda t: np.exp(t), lam, 1.0, K=20000)
    assert np.allclose(closed, quad, rtol=1e-5)
    assert np.all(closed >= (1 - np.exp(-lam)) / lam)


def test_regularity_heat_decay_case():
    m = make_model(100, 200, u0=np.sin, theta=0.5)
    rep = regularity_bound_check(m, 2, 0)
    assert rep.lhs_estimate == pytest.approx(math.pi / 2 * (1 - math.exp(-2)) / 2, rel=1e-3)
    assert rep.rhs_bound == pytest.approx(3 * math.pi / 2, rel=1e-12)
    assert rep.passed


def test_regularity_all_zero():
    rep = regularity_bound_check(make_model(20, 5), 3, 0)
    assert rep.lhs_estimate == 0 and rep.rhs_bound == 0 and rep.passed


def test_regularity_rejects_zero_paths():
    with pytest.raises(InvalidConfigurationError):
        regularity_bound_check(make_model(20, 5), 0, 0)
