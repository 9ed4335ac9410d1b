import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfflow.grid import (
    DensityPath,
    Grid1D,
    GridFunction,
    GridMismatchError,
    OffMeshError,
    UnsupportedOrderError,
    derivative_values,
    gaussian,
    l2_inner,
    l2_norm,
    quadrature,
    sobolev_norm,
    spatial_derivative,
    time_index,
)

G = Grid1D(-8.0, 8.0, 401)
coef = st.floats(-3, 3, allow_nan=False)


def test_nodes_weights():
    assert G.dx == pytest.approx(0.04)
    assert G.nodes[0] == -8.0 and G.nodes[-1] == pytest.approx(8.0)
    assert G.weights.sum() == pytest.approx(16.0, abs=1e-12)
    assert len(G.midpoints) == 400


def test_invalid_grid():
    with pytest.raises(ValueError):
        Grid1D(0, 1, 2)
    with pytest.raises(ValueError):
        Grid1D(1, 0, 10)


def test_trapezoid_exact_for_affine():
    u = G.sample(lambda x: 2.0 * x + 3.0)
    assert quadrature(u) == pytest.approx(48.0, rel=1e-13)


def test_gaussian_moments():
    # decayed Gaussian: trapezoid is spectrally accurate
    g = gaussian(G, 0.5, 0.7)
    assert quadrature(g) == pytest.approx(1.0, abs=1e-12)
    assert l2_norm(g) ** 2 == pytest.approx(1 / (2 * 0.7 * np.sqrt(np.pi)), rel=1e-10)


@pytest.mark.parametrize(
    "order, poly",
    [
        (1, [1.0, -2.0, 0.5]),
        (2, [1.0, -2.0, 0.5]),
        (3, [0.1, 1.0, -2.0, 0.5, 3.0]),
    ],
)
def test_derivative_exact_on_polynomials(order, poly):
    # each stencil (central inside, one-sided at the walls) reproduces
    # polynomials up to its width minus one
    x = G.nodes
    p = np.polynomial.Polynomial(poly[::-1])
    got = derivative_values(p(x), G.dx, order)
    assert np.allclose(got, p.deriv(order)(x), rtol=1e-9, atol=1e-6)


def test_derivative_rate():
    errs = []
    for n in (201, 401, 801):
        g = Grid1D(-8, 8, n)
        u = np.sin(g.nodes)
        errs.append(np.max(np.abs(derivative_values(u, g.dx, 2) + u)))
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.1)


def test_derivative_order_errors():
    with pytest.raises(UnsupportedOrderError):
        spatial_derivative(gaussian(G, 0, 1), 4)


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        l2_inner(gaussian(G, 0, 1), gaussian(Grid1D(-8, 8, 201), 0, 1))


def test_sobolev_norm_gaussian():
    # ||g'||^2 = 1/(4 sqrt(pi) s^3) for a unit N(0, s^2) density
    s = 0.7
    g = gaussian(G, 0, s)
    want = np.sqrt(1 / (2 * s * np.sqrt(np.pi)) + 1 / (4 * np.sqrt(np.pi) * s**3))
    assert sobolev_norm(g, 1) == pytest.approx(want, rel=1e-3)


@given(coef, coef)
def test_inner_product_bilinear(a, b):
    u, v, w = gaussian(G, 0, 1), gaussian(G, 1, 0.5), gaussian(G, -1, 2)
    lhs = l2_inner(a * u + b * v, w)
    assert lhs == pytest.approx(a * l2_inner(u, w) + b * l2_inner(v, w), abs=1e-12)


@given(st.floats(-2, 2), st.floats(0.3, 2), st.floats(-2, 2), st.floats(0.3, 2))
def test_cauchy_schwarz(m1, s1, m2, s2):
    u, v = gaussian(G, m1, s1), gaussian(G, m2, s2)
    assert abs(l2_inner(u, v)) <= l2_norm(u) * l2_norm(v) * (1 + 1e-12)


def test_gridfunction_immutable():
    g = gaussian(G, 0, 1)
    with pytest.raises(ValueError):
        g.values[0] = 1.0


def test_time_index():
    assert time_index(0.0, 0.1, 10, 0.3) == 3
    with pytest.raises(OffMeshError):
        time_index(0.0, 0.1, 10, 0.35)
    with pytest.raises(OffMeshError):
        time_index(0.0, 0.1, 10, 1.2)


def test_density_path_shape():
    with pytest.raises(ValueError):
        DensityPath(G, 0.0, 1.0, 3, np.zeros((3, G.n_points)))
    p = DensityPath(G, 0.0, 1.0, 2, np.zeros((3, G.n_points)))
    assert p.dt == 0.5 and isinstance(p.at(0.5), GridFunction)
