import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import zeta

from mfflow.coefficients import ellipticity_margin
from mfflow.grid import Grid1D, gaussian, quadrature
from mfflow.scenarios import (
    CATALOG,
    STAIR_COEF,
    ConfigError,
    build,
    load,
    parse_density,
    read_config,
    staircase_grid_function,
    staircase_moments,
    staircase_tails,
)

G = Grid1D(-8, 8, 401)


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_catalog_invariants(name):
    sc = build(name)
    assert max(abs(sc.mu.values[0]), abs(sc.mu.values[-1])) < 1e-10
    assert ellipticity_margin(sc.model) >= 0
    assert sc.T > sc.t and sc.n_steps >= 1


def test_pure_diffusion_definition():
    sc = build("pure-diffusion")
    assert sc.model.b0 == sc.model.b1 == 0 and sc.model.s1 == 0
    assert sc.model.s0 == pytest.approx(math.sqrt(2))
    assert sc.grid.x_min == -8 and sc.grid.x_max == 8


def test_reference_gamma():
    assert build("state-invariant-ref").model.gamma == pytest.approx(0.245)


def test_state_dependent_flag():
    assert not build("state-dep-drift").model.state_invariant


def test_parse_density_terms():
    d = parse_density("2*N(0.5, 0.8) - 1*dN(0, 1.2)", G)
    want = 2 * gaussian(G, 0.5, 0.8).values + (G.nodes / 1.2**2) * gaussian(G, 0, 1.2).values
    assert np.allclose(d.values, want, atol=1e-15)


@pytest.mark.parametrize("bad", ["", "N(0)", "1*N(0, -1)", "3*Q(0,1)"])
def test_parse_density_rejects(bad):
    with pytest.raises(ConfigError):
        parse_density(bad, G)


def test_unknown_name():
    with pytest.raises(ConfigError):
        build("nope")


def test_overrides_and_base(tmp_path):
    sc = build("state-invariant-ref", grid={"n_points": 201}, mc={"seed": 7})
    assert sc.grid.n_points == 201 and sc.seed == 7
    f = tmp_path / "c.ini"
    f.write_text("[scenario]\nbase = pure-diffusion\n[time]\nn_steps = 20  # coarse\n[check]\nx0 = -0.2\n")
    sc = load(f)
    assert sc.n_steps == 20 and sc.x0 == -0.2 and sc.model.s0 == pytest.approx(math.sqrt(2))


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_config(tmp_path / "missing.ini")
    f = tmp_path / "c.ini"
    f.write_text("[solver]\nx = 1\n")
    with pytest.raises(ConfigError):
        read_config(f)
    with pytest.raises(ConfigError):
        build("pure-diffusion", time={"n_steps": "many"})
    with pytest.raises(ConfigError):
        build("pure-diffusion", mu={"density": "1*N(7.9, 1)"})


def test_staircase_partial_sums_oracle():
    n = np.arange(1, 1001, dtype=float)
    mass, l2, first = staircase_moments(1000)
    assert mass == pytest.approx(STAIR_COEF * np.sum(1 / n**2), rel=1e-14)
    assert l2 == pytest.approx(STAIR_COEF**2 * np.sum(1 / n**3), rel=1e-14)
    assert first >= STAIR_COEF * np.sum(1 / n)


def test_staircase_tails_complete_the_series():
    mass, l2, _ = staircase_moments(50)
    tm, tl = staircase_tails(50)
    assert mass + tm == pytest.approx(STAIR_COEF * math.pi**2 / 6, rel=1e-13)
    assert l2 + tl == pytest.approx(STAIR_COEF**2 * zeta(3), rel=1e-13)


@given(st.integers(1, 6))
def test_staircase_grid_masses(k):
    g = Grid1D(0, 10, 2001)
    rho = staircase_grid_function(g, k)
    want = STAIR_COEF * sum(1 / n**2 for n in range(1, k + 1))
    assert quadrature(rho) == pytest.approx(want, rel=1e-12)


def test_staircase_rejects_zero_terms():
    with pytest.raises(ValueError):
        staircase_moments(0)
