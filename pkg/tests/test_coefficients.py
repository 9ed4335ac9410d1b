import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfflow.coefficients import (
    OUTERS,
    ModelSpec,
    Profile,
    SmoothFunctional,
    bump_function,
    ellipticity_margin,
    fit_slope,
    functional_derivative_check,
    lipschitz_ratios,
    make_state_dependent_model,
    make_state_invariant_model,
    probe_densities,
)
from mfflow.grid import Grid1D, gaussian, l2_inner, l2_norm

G = Grid1D(-8.0, 8.0, 401)
REF = ModelSpec(b1=0.5, b_outer="sin", b_h=("gauss", 1.5, 0.5, 1.0),
                s0=1.0, s1=0.3, s_outer="tanh", s_h=("gauss", 1.0, -0.5, 1.5))


@pytest.fixture(scope="module")
def model():
    return make_state_invariant_model(REF, G)


@pytest.mark.parametrize("kind", ["sin", "cos", "tanh", "gauss", "identity", "const"])
@given(x=st.floats(-3, 3))
def test_profile_derivatives_match_differences(kind, x):
    p = Profile(kind, 1.3, 0.2, 0.8)
    h = 1e-4
    for k in range(3):
        fd = (p(x + h, k) - p(x - h, k)) / (2 * h)
        assert fd == pytest.approx(p(x, k + 1), abs=1e-6)


@pytest.mark.parametrize("name", list(OUTERS))
@given(u=st.floats(-3, 3))
def test_outer_derivatives(name, u):
    o = OUTERS[name]
    h = 1e-5
    assert (o.f(u + h) - o.f(u - h)) / (2 * h) == pytest.approx(o.d1(u), abs=1e-7)
    assert (o.d1(u + h) - o.d1(u - h)) / (2 * h) == pytest.approx(o.d2(u), abs=1e-6)


@pytest.mark.parametrize("name", ["tanh", "sin", "expnegsq"])
def test_outer_sup_constants(name):
    u = np.linspace(-10, 10, 200001)
    o = OUTERS[name]
    assert np.abs(o.f(u)).max() <= o.sup0 + 1e-12
    assert np.abs(o.d1(u)).max() == pytest.approx(o.sup1, rel=1e-6)


def test_unknown_profile_and_outer():
    with pytest.raises(ValueError):
        Profile("cubic")
    with pytest.raises(ValueError):
        SmoothFunctional(gaussian(G, 0, 1), "cubic")
    with pytest.raises(ValueError):
        bump_function(G, ("sin", 1, 0, 1))


def test_reference_model_values(model):
    mu = gaussian(G, 0.0, 0.7)
    hb = bump_function(G, ("gauss", 1.5, 0.5, 1.0))
    hs = bump_function(G, ("gauss", 1.0, -0.5, 1.5))
    assert model.b(0.3, mu) == pytest.approx(0.5 * math.sin(l2_inner(hb, mu)), rel=1e-14)
    assert model.sigma(0.3, mu) == pytest.approx(1 + 0.3 * math.tanh(l2_inner(hs, mu)), rel=1e-14)
    assert model.state_invariant


def test_ellipticity(model):
    # a = sigma^2/2 >= (1 - 0.3)^2 / 2
    assert model.gamma == pytest.approx(0.245)
    assert ellipticity_margin(model) >= 0.0


@pytest.mark.parametrize("field", ["b", "sigma", "a"])
def test_functional_derivative_first_order(model, field):
    mu = gaussian(G, 0.0, 0.7)
    mt = gaussian(G, 0.5, 0.8) - gaussian(G, -0.5, 1.0)
    rep = functional_derivative_check(model, field, 0.3, mu, mt, [0.2, 0.1, 0.05, 0.025])
    assert 0.9 < rep.slope < 1.1


def test_functional_derivative_linear_outer_is_floor_limited():
    spec = ModelSpec(b1=0.5, b_outer="linear")
    m = make_state_invariant_model(spec, G)
    rep = functional_derivative_check(m, "b", 0.0, gaussian(G, 0, 1), gaussian(G, 1, 1), [0.2, 0.1, 0.05, 0.025])
    assert rep.floor_limited and rep.slope is None


def test_state_dependent_model():
    spec = ModelSpec(b0=0.5, b1=0.3, beta=("tanh", -1.0, 0.0, 1.0))
    m = make_state_dependent_model(spec, G)
    mu = gaussian(G, 0, 0.7)
    assert not m.state_invariant
    assert m.b_x(0.0, mu) == pytest.approx(-m.state(mu).drift_level)


def test_lipschitz_bound(model):
    for f in ("b", "sigma", "a"):
        assert lipschitz_ratios(model, f).max() <= model.lip_bound


def test_probes_cover_signed_and_rough_elements():
    probes = probe_densities(G)
    assert any(l2_norm(p) == 0 for p in probes)
    assert any(p.values.min() < 0 for p in probes)
    assert all(np.all(np.isfinite(p.values)) for p in probes)


def test_fit_slope_power_law():
    h = np.array([0.2, 0.1, 0.05, 0.025])
    assert fit_slope(h, 3 * h**2)[0] == pytest.approx(2.0)
    assert fit_slope(h, np.zeros(4)) == (None, True)


@given(st.floats(-3, 3), st.floats(0.3, 2.0))
def test_expnegsq_derivative_bound(mean, std):
    # |dF/dm| = |outer'| ||h|| <= sqrt(2) e^{-1/2} ||h||
    h = bump_function(G, ("gauss", 0.8, 0.0, 1.0))
    F = SmoothFunctional(h, "expnegsq")
    d = F.derivative(gaussian(G, mean, std))
    assert l2_norm(d) <= math.sqrt(2) * math.exp(-0.5) * l2_norm(h) * (1 + 1e-12)
