"""Euler-Maruyama ensembles for the state, its variations and its measure derivatives.

Brownian increments come from per-path generator streams keyed by
``(seed, stream, path)``, so any subset of paths can be regenerated
independently of chunking or thread scheduling.  Increments are aligned at
the terminal time: a run of ``n`` steps consumes the last ``n`` increments
of the bank, which makes runs started at later times share noise with
earlier-started ones over their common window.

The coefficients see the density only through the per-slice scalars of
``CoefficientModel.state``, precomputed once per path of densities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientModel, UnsupportedModelError
from .grid import DensityPath, GridMismatchError


class EscapeError(RuntimeError):
    """Too many paths left the truncated domain."""


ESCAPE_LIMIT = 0.01


@dataclass(frozen=True)
class NoiseBank:
    """Reproducible Brownian increments, shape (n_steps, n_paths) when realized.

    ``coarsen`` > 1 sums consecutive groups of a finer bank with step
    ``dt / coarsen``; coarse and fine runs then share the same Brownian path.
    """

    seed: int
    n_paths: int
    n_steps: int
    dt: float
    stream: int = 0
    coarsen: int = 1

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1 or self.dt <= 0 or self.coarsen < 1:
            raise ValueError("invalid noise bank dimensions")

    def block(self, first: int = 0, count: int | None = None, n_use: int | None = None) -> np.ndarray:
        """Increments for paths ``first .. first+count-1`` over the last ``n_use`` steps.

        Draws are consumed backwards from the terminal time, so banks of
        different lengths agree on their common tail.
        """
        count = self.n_paths - first if count is None else count
        n_use = self.n_steps if n_use is None else n_use
        if first < 0 or first + count > self.n_paths or not 0 <= n_use <= self.n_steps:
            raise ValueError("noise block out of range")
        scale = np.sqrt(self.dt / self.coarsen)
        out = np.empty((n_use, count))
        for k in range(count):
            rng = np.random.default_rng([self.seed, self.stream, first + k])
            z = rng.standard_normal(n_use * self.coarsen)
            if self.coarsen > 1:
                z = z.reshape(n_use, self.coarsen).sum(axis=1)
            out[:, k] = z[::-1]
        return out * scale

    @property
    def increments(self) -> np.ndarray:
        return self.block()

    def grouped(self, first: int, count: int, group: int, n_use: int) -> np.ndarray:
        """(n_use, count * group) increments, one generator per group of ``group`` paths.

        Used for nested simulations: each outer path owns one stream that
        feeds all of its inner paths.
        """
        if first < 0 or first + count > self.n_paths or not 0 <= n_use <= self.n_steps:
            raise ValueError("noise block out of range")
        out = np.empty((n_use, count * group))
        for k in range(count):
            rng = np.random.default_rng([self.seed, self.stream, first + k])
            out[:, k * group : (k + 1) * group] = rng.standard_normal((n_use, group))
        return out * np.sqrt(self.dt)

    def refined(self) -> "NoiseBank":
        """The same Brownian paths resolved at half the step."""
        if self.coarsen % 2:
            raise ValueError("bank is not a coarsening of a finer one")
        return NoiseBank(self.seed, self.n_paths, 2 * self.n_steps, self.dt / 2, self.stream, self.coarsen // 2)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated trajectories (n_steps+1, n_paths) with the increments that drove them."""

    label: str
    t0: float
    t1: float
    states: np.ndarray
    increments: np.ndarray
    escaped: np.ndarray | None = None
    noise: NoiseBank | None = None
    first_path: int = 0

    def __post_init__(self):
        n_steps, n_paths = self.increments.shape
        if self.states.shape != (n_steps + 1, n_paths):
            raise ValueError("states and increments disagree in shape")
        if not np.all(np.isfinite(self.states)):
            raise ValueError(f"non-finite values in {self.label} ensemble")

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True, eq=False)
class KernelEnsemble:
    """U_T(y) = coef_b @ q_b + coef_s @ q_s, kept in factored form.

    ``coef_*`` are per-path, per-step weights (n_paths, n_steps); ``q_*`` are the
    kernel projections (n_steps, n_points).  U(t, y) = 0 holds by construction.
    """

    coef_b: np.ndarray
    coef_s: np.ndarray
    q_b: np.ndarray
    q_s: np.ndarray
    weights: np.ndarray
    sup_sq: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.coef_b @ self.q_b + self.coef_s @ self.q_s

    def weighted_mean(self, w: np.ndarray) -> np.ndarray:
        """y -> mean_p w_p U_T(y) without forming the full (paths x nodes) array."""
        n = len(w)
        return ((w @ self.coef_b) @ self.q_b + (w @ self.coef_s) @ self.q_s) / n

    def pair(self, nu: np.ndarray) -> np.ndarray:
        """Per-path quadrature of U_T(y) nu(y) dy."""
        wn = self.weights * nu
        return self.coef_b @ (self.q_b @ wn) + self.coef_s @ (self.q_s @ wn)


# ---------------------------------------------------------------------------
# helpers


def path_states(model: CoefficientModel, m_path: DensityPath):
    """Per-slice coefficient scalars broadcast to arrays of length n_steps+1."""
    st = model.state(m_path.slices)
    k = m_path.n_steps + 1
    return tuple(np.broadcast_to(np.asarray(v, float), (k,)) for v in st)


def _noise_for(m_path: DensityPath, noise: NoiseBank, first: int, count: int | None):
    if abs(noise.dt - m_path.dt) > 1e-12 * max(1.0, noise.dt):
        raise ValueError(f"noise step {noise.dt} differs from the density mesh step {m_path.dt}")
    if m_path.n_steps > noise.n_steps:
        raise ValueError("noise bank is shorter than the density path")
    return noise.block(first, count, m_path.n_steps)


def euler_x(model, levels, sigmas, x0, dW, dt):
    """X_{j+1} = X_j + beta(X_j) level_j dt + sigma_j dW_j for x0 of shape (P,)."""
    n = dW.shape[0]
    X = np.empty((n + 1,) + np.shape(dW)[1:])
    X[0] = x0
    const_beta = model.state_invariant
    beta0 = float(model.beta(0.0)) if const_beta else 0.0
    for j in range(n):
        drift = beta0 * levels[j] if const_beta else model.beta(X[j]) * levels[j]
        X[j + 1] = X[j] + drift * dt + sigmas[j] * dW[j]
    return X


def _check_escape(X: np.ndarray, grid) -> np.ndarray:
    esc = ((X < grid.x_min) | (X > grid.x_max)).any(axis=0)
    frac = esc.mean()
    if frac > ESCAPE_LIMIT:
        raise EscapeError(
            f"{100 * frac:.2f}% of paths left [{grid.x_min}, {grid.x_max}]; enlarge the domain"
        )
    return esc


# ---------------------------------------------------------------------------
# simulations


def simulate_x(
    model: CoefficientModel,
    m_path: DensityPath,
    t: float,
    x,
    noise: NoiseBank,
    first_path: int = 0,
    n_paths: int | None = None,
) -> PathEnsemble:
    """State process from (t, x) on the density mesh; ``x`` may be per-path."""
    if abs(t - m_path.t0) > 1e-12:
        raise ValueError(f"start time {t} differs from the density path start {m_path.t0}")
    dW = _noise_for(m_path, noise, first_path, n_paths)
    lv, _, sg, _ = path_states(model, m_path)
    x0 = np.broadcast_to(np.asarray(x, float), dW.shape[1:])
    X = euler_x(model, lv, sg, x0, dW, m_path.dt)
    esc = _check_escape(X, m_path.grid)
    return PathEnsemble("X", m_path.t0, m_path.t1, X, dW, esc, noise, first_path)


def _check_pair(m_path: DensityPath, ens: PathEnsemble):
    if ens.n_steps != m_path.n_steps:
        raise ValueError("ensemble and density path have different time meshes")


def simulate_first_variation(model, m_path: DensityPath, x_ens: PathEnsemble) -> PathEnsemble:
    """d/dx of the state: D_{j+1} = D_j (1 + b_x dt + sigma_x dW), D_0 = 1."""
    _check_pair(m_path, x_ens)
    lv = path_states(model, m_path)[0]
    X, dW, dt = x_ens.states, x_ens.increments, m_path.dt
    D = np.empty_like(X)
    D[0] = 1.0
    if model.state_invariant:
        D[:] = 1.0
    else:
        for j in range(x_ens.n_steps):
            D[j + 1] = D[j] * (1.0 + model.beta(X[j], 1) * lv[j] * dt)
    return PathEnsemble("DX", x_ens.t0, x_ens.t1, D, dW, x_ens.escaped, x_ens.noise, x_ens.first_path)


def simulate_second_variation(model, m_path, x_ens: PathEnsemble, dx_ens: PathEnsemble) -> PathEnsemble:
    """Second x-derivative of the state, zero initial value."""
    _check_pair(m_path, x_ens)
    lv = path_states(model, m_path)[0]
    X, D, dW, dt = x_ens.states, dx_ens.states, x_ens.increments, m_path.dt
    D2 = np.zeros_like(X)
    if not model.state_invariant:
        for j in range(x_ens.n_steps):
            bx = model.beta(X[j], 1) * lv[j]
            bxx = model.beta(X[j], 2) * lv[j]
            # sigma carries no x-dependence in the catalog, so the dW terms vanish
            D2[j + 1] = D2[j] + (bx * D2[j] + bxx * D[j] ** 2) * dt
    return PathEnsemble("D2X", x_ens.t0, x_ens.t1, D2, dW, x_ens.escaped, x_ens.noise, x_ens.first_path)


def y_sources(model, m_path: DensityPath, mt_path: DensityPath):
    """Per-step scalars b_slope_j <h_b, mt_j> and sigma_slope_j <h_s, mt_j>."""
    if mt_path.grid != m_path.grid:
        raise GridMismatchError("direction path and density path grids differ")
    if mt_path.n_steps != m_path.n_steps:
        raise ValueError("direction path and density path have different time meshes")
    _, ds, _, ss = path_states(model, m_path)
    w = m_path.grid.weights
    pb = mt_path.slices @ (w * model.h_b)
    ps = mt_path.slices @ (w * model.h_sigma)
    return ds * pb, ss * ps


def simulate_y(model, m_path: DensityPath, mt_path: DensityPath, x_ens: PathEnsemble) -> PathEnsemble:
    """Derivative of the state along a density direction, zero initial value.

    Y_{j+1} = Y_j + (b_x Y_j + beta(X_j) c_b,j) dt + (sigma_x Y_j + c_s,j) dW_j
    """
    _check_pair(m_path, x_ens)
    cb, cs = y_sources(model, m_path, mt_path)
    lv = path_states(model, m_path)[0]
    X, dW, dt = x_ens.states, x_ens.increments, m_path.dt
    Y = np.zeros_like(X)
    inv = model.state_invariant
    beta0 = float(model.beta(0.0))
    for j in range(x_ens.n_steps):
        if inv:
            Y[j + 1] = Y[j] + beta0 * cb[j] * dt + cs[j] * dW[j]
        else:
            Y[j + 1] = Y[j] + (model.beta(X[j], 1) * lv[j] * Y[j] + model.beta(X[j]) * cb[j]) * dt + cs[j] * dW[j]
    return PathEnsemble("Y", x_ens.t0, x_ens.t1, Y, dW, x_ens.escaped, x_ens.noise, x_ens.first_path)


def propagators(model, m_path: DensityPath, x_ens: PathEnsemble) -> np.ndarray:
    """R[j] = prod_{i>j} (1 + b_x(X_i) dt), shape (n_steps, n_paths)."""
    n = x_ens.n_steps
    if model.state_invariant:
        return np.ones((n, x_ens.n_paths))
    lv = path_states(model, m_path)[0]
    fac = 1.0 + model.beta(x_ens.states[:-1], 1) * lv[:-1, None] * m_path.dt
    R = np.ones((n, x_ens.n_paths))
    for j in range(n - 2, -1, -1):
        R[j] = R[j + 1] * fac[j + 1]
    return R


def simulate_u(model, m_path: DensityPath, k_path, x_ens: PathEnsemble, store_sup: bool = False) -> KernelEnsemble:
    """Kernel-valued measure derivative of the state, U(t, y) = 0.

    Sources per step are beta(X_j) b_slope_j q_b(j, y) dt and
    sigma_slope_j q_s(j, y) dW_j with q the kernel projections on h_b, h_s.
    """
    if k_path is None:
        raise UnsupportedModelError("U-process needs the kernel (state-invariant coefficients)")
    _check_pair(m_path, x_ens)
    if k_path.n_steps != m_path.n_steps or k_path.grid != m_path.grid:
        raise ValueError("kernel and density path meshes differ")
    _, ds, _, ss = path_states(model, m_path)
    X, dW, dt = x_ens.states, x_ens.increments, m_path.dt
    R = propagators(model, m_path, x_ens)
    coef_b = (R * model.beta(X[:-1]) * ds[:-1, None] * dt).T
    coef_s = (R * ss[:-1, None] * dW).T
    q_b = k_path.projections["b"][:-1]
    q_s = k_path.projections["sigma"][:-1]
    sup_sq = None
    if store_sup:
        lv = path_states(model, m_path)[0]
        U = np.zeros((x_ens.n_paths, m_path.grid.n_points))
        sup_sq = np.zeros_like(U)
        for j in range(x_ens.n_steps):
            bx = 0.0 if model.state_invariant else (model.beta(X[j], 1) * lv[j] * dt)[:, None]
            U = U * (1.0 + bx) + np.outer(coef_b[:, j] / R[j], q_b[j]) + np.outer(coef_s[:, j] / R[j], q_s[j])
            np.maximum(sup_sq, U**2, out=sup_sq)
    return KernelEnsemble(coef_b, coef_s, q_b, q_s, m_path.grid.weights, sup_sq)


def summary_rows(ens: PathEnsemble, quantiles=(0.05, 0.5, 0.95)):
    """(s, mean, var, quantiles...) per time node."""
    s = ens.t0 + (ens.t1 - ens.t0) / ens.n_steps * np.arange(ens.n_steps + 1)
    q = np.quantile(ens.states, quantiles, axis=1)
    return np.column_stack([s, ens.states.mean(axis=1), ens.states.var(axis=1, ddof=1), q.T])
