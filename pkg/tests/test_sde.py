import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfflow.fp import FpConfig, march, solve_fp
from mfflow.grid import DensityPath
from mfflow.linearized import solve_directional, solve_kernel
from mfflow.sde import (
    EscapeError,
    NoiseBank,
    simulate_first_variation,
    simulate_second_variation,
    simulate_u,
    simulate_x,
    simulate_y,
    summary_rows,
)

from conftest import scenario


def test_bank_reproducible_and_chunk_invariant():
    b = NoiseBank(5, 20, 30, 0.01)
    full = b.increments
    assert np.array_equal(full, NoiseBank(5, 20, 30, 0.01).increments)
    assert np.array_equal(full[:, 7:12], b.block(7, 5))


@settings(max_examples=20)
@given(st.integers(1, 40), st.integers(0, 40))
def test_banks_share_their_tail(n_short, extra):
    long = NoiseBank(3, 4, n_short + extra, 0.1)
    short = NoiseBank(3, 4, n_short, 0.1)
    assert np.array_equal(long.increments[extra:], short.increments)


def test_coarse_bank_sums_fine_steps():
    fine = NoiseBank(9, 6, 20, 0.005)
    coarse = NoiseBank(9, 6, 10, 0.01, coarsen=2)
    f = fine.increments
    assert np.allclose(coarse.increments, f[0::2] + f[1::2], atol=1e-15)
    assert coarse.refined() == NoiseBank(9, 6, 20, 0.005)


def test_streams_are_distinct():
    assert not np.allclose(NoiseBank(1, 3, 5, 0.1).increments, NoiseBank(1, 3, 5, 0.1, stream=1).increments)


def test_grouped_shape():
    g = NoiseBank(1, 10, 8, 0.1).grouped(2, 3, 4, 5)
    assert g.shape == (5, 12)
    with pytest.raises(ValueError):
        NoiseBank(1, 10, 8, 0.1).grouped(8, 3, 4, 5)


def test_increment_variance():
    dW = NoiseBank(0, 20000, 4, 0.25).increments
    assert dW.var() == pytest.approx(0.25, rel=0.03)


def _path(sc):
    cfg = FpConfig(sc.n_steps)
    return solve_fp(sc.model, sc.mu, sc.t, sc.T, cfg, dt=sc.dt), cfg


def test_pure_diffusion_terminal_law():
    sc = scenario("pure-diffusion", 201, 50)
    path, _ = _path(sc)
    n = 20000
    X = simulate_x(sc.model, path, 0.0, 0.3, NoiseBank(1, n, 50, sc.dt))
    xT = X.terminal
    assert abs(xT.mean() - 0.3) < 4 * np.sqrt(2.0 / n)
    assert xT.var() == pytest.approx(2.0, rel=0.05)


def test_escape_detected(ref_small):
    path, _ = _path(ref_small)
    with pytest.raises(EscapeError):
        simulate_x(ref_small.model, path, 0.0, 7.9, NoiseBank(1, 500, 100, ref_small.dt))


def test_noise_mesh_must_match(ref_small):
    path, _ = _path(ref_small)
    with pytest.raises(ValueError):
        simulate_x(ref_small.model, path, 0.0, 0.0, NoiseBank(1, 10, 100, 0.02))


def test_first_variation_trivial_for_constant_beta(ref_small):
    path, _ = _path(ref_small)
    X = simulate_x(ref_small.model, path, 0.0, 0.3, NoiseBank(1, 100, 100, ref_small.dt))
    assert np.all(simulate_first_variation(ref_small.model, path, X).states == 1.0)


def test_variations_match_crn_differences(dep_small):
    path, _ = _path(dep_small)
    noise = NoiseBank(2, 400, 100, dep_small.dt)
    h = 1e-4
    sim = lambda x: simulate_x(dep_small.model, path, 0.0, x, noise)
    X, Xp, Xm = sim(0.3), sim(0.3 + h), sim(0.3 - h)
    D = simulate_first_variation(dep_small.model, path, X)
    D2 = simulate_second_variation(dep_small.model, path, X, D)
    assert np.allclose((Xp.states - Xm.states) / (2 * h), D.states, atol=1e-6)
    assert np.allclose((Xp.states - 2 * X.states + Xm.states) / h**2, D2.states, atol=1e-3)


def test_y_matches_crn_quotient(dep_small):
    sc = dep_small
    path, cfg = _path(sc)
    d = sc.directions[0]
    tang = solve_directional(sc.model, path, d, cfg)
    noise = NoiseBank(3, 300, 100, sc.dt)
    X = simulate_x(sc.model, path, 0.0, 0.3, noise)
    Y = simulate_y(sc.model, path, tang, X)
    errs = []
    for h in (1e-2, 5e-3):
        sl, _ = march(sc.model, (sc.mu + h * d).values, sc.grid, sc.dt, 100, cfg)
        Xh = simulate_x(sc.model, DensityPath(sc.grid, 0.0, 1.0, 100, sl, {"dt": sc.dt}), 0.0, 0.3, noise)
        errs.append(np.abs((Xh.states - X.states) / h - Y.states).max())
    assert errs[1] < 0.6 * errs[0] and errs[1] < 1e-3


def test_u_pairs_to_y(ref_small):
    sc = ref_small
    path, cfg = _path(sc)
    k = solve_kernel(sc.model, path, cfg)[2]
    X = simulate_x(sc.model, path, 0.0, 0.3, NoiseBank(4, 500, 100, sc.dt))
    U = simulate_u(sc.model, path, k, X, store_sup=True)
    for d in sc.directions:
        Y = simulate_y(sc.model, path, solve_directional(sc.model, path, d, cfg), X).terminal
        assert np.sqrt(np.mean((U.pair(d.values) - Y) ** 2)) < 0.05 * np.sqrt(np.mean(Y**2))
    w = np.linspace(-1, 1, 500)
    assert np.allclose(U.weighted_mean(w), w @ U.terminal / 500, atol=1e-14)
    assert np.all(U.sup_sq.max(axis=1) >= 0) and U.sup_sq.shape == (500, sc.grid.n_points)


def test_summary_rows(ref_small):
    path, _ = _path(ref_small)
    X = simulate_x(ref_small.model, path, 0.0, 0.3, NoiseBank(4, 50, 100, ref_small.dt))
    rows = summary_rows(X)
    assert rows.shape == (101, 6)
    assert rows[0, 1] == pytest.approx(0.3) and rows[0, 2] == pytest.approx(0.0, abs=1e-30)
