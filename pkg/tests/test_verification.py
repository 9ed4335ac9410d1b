import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite_e import hermeval

from mfflow.coefficients import ModelSpec, Profile, UnsupportedModelError, make_state_invariant_model
from mfflow.grid import Grid1D, gaussian
from mfflow.value import TerminalFunctional, ValueConfig
from mfflow.verification import (
    ConfigurationError,
    TimeWeighted,
    adjusted_means,
    convergence_study,
    derivative_agreement,
    hermite_controls,
    ito_residual,
    ito_samples,
    martingale_check,
    master_pde_residual,
    orthonormal_projections,
    slope_ok,
    terminal_condition_check,
    terminal_one_step,
)

from conftest import scenario


def test_hermite_columns():
    Z = np.random.default_rng(0).standard_normal((50, 2))
    C = hermite_controls(Z, 3)
    assert C.shape == (50, 9)  # monomials of degree 1..3 in two variables
    # degree tuples run lexicographically: (0, 1), (0, 2), ...
    assert np.allclose(C[:, 1], hermeval(Z[:, 1], [0, 0, 1]))


def test_hermite_controls_are_centred():
    Z = np.random.default_rng(1).standard_normal((200000, 2))
    C = hermite_controls(Z, 4)
    assert np.abs(C.mean(axis=0)).max() < 0.05


def test_adjusted_means_without_controls():
    y = np.random.default_rng(2).normal(1.0, 2.0, 1000)
    m, se = adjusted_means(y, None)
    assert m == pytest.approx(y.mean()) and se == pytest.approx(y.std(ddof=1) / math.sqrt(1000))


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_adjusted_means_are_additive(seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((300, 2))
    Y = rng.standard_normal((300, 3)) + Z[:, :1] ** 2
    C = hermite_controls(Z, 2)
    means, _ = adjusted_means(Y, C)
    total, _ = adjusted_means(Y.sum(axis=1), C)
    assert total == pytest.approx(means.sum(), abs=1e-12)


def test_control_variates_remove_a_polynomial_exactly():
    Z = np.random.default_rng(3).standard_normal((500, 1))
    y = 0.7 + 2 * Z[:, 0] + (Z[:, 0] ** 2 - 1)
    m, se = adjusted_means(y, hermite_controls(Z, 2))
    assert m == pytest.approx(0.7, abs=1e-12) and se < 1e-12


def test_orthonormal_projections():
    W = np.random.default_rng(4).standard_normal((40, 2))
    Q = orthonormal_projections(W, 0.01)
    assert np.allclose(Q.T @ Q * 0.01, np.eye(2))
    assert orthonormal_projections(np.column_stack([W[:, 0], 2 * W[:, 0]]), 0.01).shape[1] == 1


def test_residual_constant_phi_is_exact_zero():
    sc = scenario("constant-phi")
    r = master_pde_residual(sc.model, sc.Phi, 0.0, 0.3, sc.mu, sc.value_config(), 1.0)
    assert r.residual == 0.0 and r.error_budget == 0.0
    assert all(v == 0.0 for v in r.components.values())


def test_residual_refuses_state_dependent(dep_small):
    with pytest.raises(UnsupportedModelError):
        master_pde_residual(dep_small.model, dep_small.Phi, 0.0, 0.3, dep_small.mu, dep_small.value_config(), 1.0)


def test_residual_is_sum_of_components(ref_small):
    r = master_pde_residual(ref_small.model, ref_small.Phi, 0.0, 0.3, ref_small.mu,
                            ref_small.value_config(n_paths=3000), 1.0)
    assert r.residual == pytest.approx(sum(r.components.values()), abs=1e-15)
    assert set(r.components) == {"dv_dt", "drift", "diffusion", "measure"}
    assert r.metadata["n_points"] == 201 and r.metadata["seed"] == ref_small.seed


def test_residual_control_variates_shrink_error(ref_small):
    cfg = ref_small.value_config(n_paths=3000)
    a = (ref_small.model, ref_small.Phi, 0.0, 0.3, ref_small.mu, cfg, 1.0)
    plain = master_pde_residual(*a, control_degree=0)
    adj = master_pde_residual(*a)
    assert adj.std_err < 0.2 * plain.std_err
    assert abs(adj.residual - plain.residual) < 4 * plain.std_err


def test_terminal_checks(ref_small):
    assert terminal_condition_check(ref_small.Phi, 0.3, ref_small.mu) == 0.0
    const = scenario("constant-phi")
    assert terminal_condition_check(const.Phi, 0.3, const.mu) == 0.0
    gap, env = terminal_one_step(ref_small.model, ref_small.Phi, 0.3, ref_small.mu,
                                 ref_small.value_config(n_paths=5000), 1.0)
    assert gap <= env


def test_martingale_trivial_case():
    g = Grid1D(-8, 8, 201)
    model = make_state_invariant_model(ModelSpec(s0=1.0, s1=0.3, s_outer="tanh"), g)
    Phi = TerminalFunctional(Profile("identity"), None, 0.0)
    cfg = ValueConfig(n_paths=4000, seed=5, dt=0.01)
    rep = martingale_check(model, Phi, 0.0, 0.3, gaussian(g, 0, 0.7), [0.0, 0.25, 0.5, 0.75, 1.0], cfg, 1.0)
    assert rep.passed
    assert rep.drifts[0] == 0.0 and rep.drifts[-1] == 0.0
    assert rep.values[0] == rep.v_hat


def test_martingale_budget(ref_small):
    cfg = ref_small.value_config(n_paths=10000)
    with pytest.raises(ConfigurationError):
        martingale_check(ref_small.model, ref_small.Phi, 0.0, 0.3, ref_small.mu, [0.5], cfg, 1.0, max_inner_work=1e6)


def test_martingale_reference_small(ref_small):
    cfg = ref_small.value_config(n_paths=900)
    rep = martingale_check(ref_small.model, ref_small.Phi, 0.0, 0.3, ref_small.mu, [0.0, 0.5, 1.0], cfg, 1.0)
    assert rep.n_inner == 30 and rep.passed


def test_ito_constant_functional_is_zero(ref_small):
    const = scenario("constant-phi")
    rep = ito_residual(const.model, TimeWeighted(const.Phi), 0.0, 0.3, const.mu, const.value_config(), 1.0)
    assert rep.exact_zero and rep.mean == 0.0


def test_ito_identity_telescopes(ref_small):
    f = TimeWeighted(TerminalFunctional(Profile("identity"), None, 0.0))
    r = ito_samples(ref_small.model, f, 0.0, 0.3, ref_small.mu, ref_small.value_config(n_paths=500), 1.0)
    assert np.abs(r).max() < 1e-13


def test_ito_time_weighted(ref_small):
    f = TimeWeighted(ref_small.Phi, 0.7)
    rep = ito_residual(ref_small.model, f, 0.0, 0.3, ref_small.mu, ref_small.value_config(n_paths=5000), 1.0)
    assert rep.passed and rep.c_est > 0


def test_convergence_validation(ref_small):
    with pytest.raises(ValueError):
        convergence_study("density_derivative", ref_small, [0.2, 0.1, 0.05])
    with pytest.raises(ValueError):
        convergence_study("density_derivative", ref_small, [0.1, 0.2, 0.05, 0.025])
    with pytest.raises(ValueError):
        convergence_study("other", ref_small, [0.2, 0.1, 0.05, 0.025])


def test_linear_flow_is_floor_limited():
    rep = convergence_study("density_derivative", scenario("pure-diffusion", 201, 50), [0.2, 0.1, 0.05, 0.025])
    assert rep.floor_limited and rep.slope is None and slope_ok(rep)


def test_density_derivative_rate(ref_small):
    rep = convergence_study("density_derivative", ref_small, [0.2, 0.1, 0.05, 0.025])
    assert slope_ok(rep) and not rep.floor_limited


def test_derivative_agreement_heat():
    sc = scenario("pure-diffusion", 201, 50)
    rows = derivative_agreement(sc.model, sc.Phi, 0.0, 0.3, sc.mu, sc.value_config(n_paths=5000), 1.0, [])
    assert [r.name for r in rows] == ["V_x", "V_xx", "V_t"]
    assert all(r.passed for r in rows)
