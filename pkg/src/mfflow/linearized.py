"""Frechet derivative of the density flow: directional solves and the kernel k = f + g.

The directional derivative is the exact tangent of the forward scheme
(without Picard correction).  Writing the step as ``P_j m_{j+1} = Q_j m_j``
with ``P_j = I - theta dt L_j``, ``Q_j = I + (1-theta) dt L_j`` and
``L_j = L(m_j)``, differentiation gives

    P_j v_{j+1} = Q_j v_j + dt * dL_j[v_j] mbar_j,
    mbar_j = theta m_{j+1} + (1 - theta) m_j.

Because the coefficients see the density only through <h_b, m> and
<h_s, m>, the term ``dL_j[v] mbar_j`` is rank two:

    dL_j[v] mbar = sigma sigma' <h_s, v> * D mbar + b_slope <h_b, v> * B_j mbar

with D the unit diffusion operator and B the transport operator for the
drift profile.  Finite-difference quotients of the forward solver therefore
converge to the tangent at first order in the perturbation size.

The kernel route (state-invariant coefficients only) solves the
translation-invariant problem for h(s, z) once on a doubled grid, sets
f(s, x, y) = h(s, x - y), and recovers g column-by-column with the same
tangent recursion, sourced by f through its two projections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve_banded

from .coefficients import CoefficientModel, UnsupportedModelError
from .fp import FpConfig, SolverError, apply_bands, flux_bands, march, solve_fp
from .grid import DensityPath, Grid1D, GridFunction, GridMismatchError, time_index


class MeshMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KernelPath:
    """Dense kernel slices ``K[i, l] ~ k(s_j, x_i, y_l)`` at thinned time nodes.

    ``projections["b"][j, l] = <h_b, K_j[:, l]>`` (same for ``"sigma"``) are kept
    at every time node; they are all that the correction recursion and the
    U-process need.
    """

    grid: Grid1D
    t0: float
    t1: float
    n_steps: int
    stored_indices: tuple
    slices: np.ndarray
    projections: dict
    reg_width: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_points
        if self.slices.shape != (len(self.stored_indices), n, n):
            raise ValueError("kernel slices inconsistent with grid/stored indices")
        for key, p in self.projections.items():
            if p.shape != (self.n_steps + 1, n):
                raise ValueError(f"projection {key!r} has shape {p.shape}")
        if not np.all(np.isfinite(self.slices)):
            raise ValueError("non-finite kernel entries")

    @property
    def dt(self) -> float:
        return self.metadata.get("dt", (self.t1 - self.t0) / self.n_steps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def slice_at(self, s: float) -> np.ndarray:
        j = time_index(self.t0, self.dt, self.n_steps, s)
        try:
            pos = self.stored_indices.index(j)
        except ValueError:
            raise KeyError(
                f"time {s} (index {j}) was thinned away; stored indices are {self.stored_indices}"
            ) from None
        return self.slices[pos]

    @property
    def final(self) -> np.ndarray:
        return self.slices[-1]


def stored_schedule(n_steps: int, every: int | None) -> tuple:
    if every is None:
        every = max(1, n_steps // 10)
    if every < 1:
        raise ValueError("snapshot_every must be >= 1")
    idx = list(range(0, n_steps + 1, every))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    return tuple(idx)


def _check_mesh(m_path: DensityPath, grid: Grid1D, cfg: FpConfig):
    if m_path.grid != grid:
        raise GridMismatchError(f"grid mismatch: {m_path.grid} vs {grid}")
    if cfg.n_steps != m_path.n_steps:
        raise MeshMismatchError(
            f"time mesh mismatch: path has {m_path.n_steps} steps, config {cfg.n_steps}"
        )


# ---------------------------------------------------------------------------
# per-step tangent data


@dataclass
class _TangentStep:
    lhs: np.ndarray  # banded P_j
    bands: np.ndarray  # L_j
    r_sigma: np.ndarray  # sigma sigma' * D mbar
    r_b: np.ndarray  # b_slope * B mbar


class TangentOperator:
    """Per-step operators of the linearized scheme along a fixed density path."""

    def __init__(self, model: CoefficientModel, m_path: DensityPath, theta: float = 0.5):
        self.model = model
        self.path = m_path
        self.theta = theta
        grid = m_path.grid
        self.dt = m_path.dt
        self.w_hb = grid.weights * model.h_b
        self.w_hs = grid.weights * model.h_sigma
        self._diff = flux_bands(1.0, 0.0, grid)
        self._transport = flux_bands(0.0, model.beta(grid.midpoints), grid)
        self.states = model.state(m_path.slices)
        self.linear = model.b1 == 0.0 and model.s1 == 0.0

    def step(self, j: int) -> _TangentStep:
        st = self.states
        sig = float(np.asarray(st.sigma)[j])
        lvl = float(np.asarray(st.drift_level)[j])
        grid = self.path.grid
        bands = flux_bands(0.5 * sig**2, self.model.beta(grid.midpoints) * lvl, grid)
        lhs = -self.theta * self.dt * bands
        lhs[1] += 1.0
        m = self.path.slices
        mbar = self.theta * m[j + 1] + (1 - self.theta) * m[j]
        c_s = sig * float(np.asarray(st.sigma_slope)[j])
        c_b = float(np.asarray(st.drift_slope)[j])
        return _TangentStep(
            lhs, bands, c_s * apply_bands(self._diff, mbar), c_b * apply_bands(self._transport, mbar)
        )

    def advance(self, ts: _TangentStep, v: np.ndarray, source_from: np.ndarray | None = None, j=None):
        """One tangent step for v of shape (n,) or (n, k).

        The rank-two source is evaluated on ``source_from`` (defaults to v).
        """
        src = v if source_from is None else source_from
        rhs = v + (1 - self.theta) * self.dt * apply_bands(ts.bands, v)
        if not self.linear:
            ps = self.w_hs @ src
            pb = self.w_hb @ src
            rhs = rhs + self.dt * (np.multiply.outer(ts.r_sigma, ps) + np.multiply.outer(ts.r_b, pb))
        out = solve_banded((1, 1), ts.lhs, rhs, check_finite=False)
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite values in tangent solve", j)
        return out


# ---------------------------------------------------------------------------
# directional derivative


def directional_slices(model, m_path: DensityPath, v0: np.ndarray, theta: float = 0.5) -> np.ndarray:
    """Tangent recursion for a batch of initial directions ``v0`` (n,) or (n, k)."""
    op = TangentOperator(model, m_path, theta)
    out = np.empty((m_path.n_steps + 1,) + np.shape(v0))
    out[0] = v0
    for j in range(m_path.n_steps):
        out[j + 1] = op.advance(op.step(j), out[j], j=j)
    return out


def solve_directional(
    model: CoefficientModel, m_path: DensityPath, mu_tilde: GridFunction, cfg: FpConfig
) -> DensityPath:
    """Directional derivative of the density flow along ``mu_tilde``."""
    _check_mesh(m_path, mu_tilde.grid, cfg)
    slices = directional_slices(model, m_path, mu_tilde.values, cfg.theta)
    return DensityPath(m_path.grid, m_path.t0, m_path.t1, m_path.n_steps, slices, {"dt": m_path.dt})


# ---------------------------------------------------------------------------
# kernel route


def regularized_delta(grid: Grid1D, width: float | None = None) -> tuple[Grid1D, np.ndarray, float]:
    """Narrow Gaussian of unit discrete mass on the doubled offset grid.

    Node ``k`` of the returned grid sits at offset ``(k - (n-1)) dx``.
    """
    n, dx = grid.n_points, grid.dx
    width = 2.0 * dx if width is None else width
    ext = Grid1D(-(n - 1) * dx, (n - 1) * dx, 2 * n - 1)
    z = ext.nodes
    h0 = np.exp(-0.5 * (z / width) ** 2)
    h0 /= np.dot(ext.weights, h0)
    return ext, h0, width


def translate(h: np.ndarray, n: int) -> np.ndarray:
    """f[i, l] = h[i - l + n - 1] as a read-only strided view."""
    return sliding_window_view(h, n)[:, ::-1]


def solve_fundamental(
    model: CoefficientModel,
    m_path: DensityPath,
    cfg: FpConfig,
    snapshot_every: int | None = None,
    reg_width: float | None = None,
) -> KernelPath:
    """f(s, x, y) = h(s, x - y) from the translation-invariant problem for h."""
    if not model.state_invariant:
        raise UnsupportedModelError(
            "kernel representation requires x-independent coefficients (the fundamental "
            "solution is only constructive in that case); use solve_directional"
        )
    grid = m_path.grid
    _check_mesh(m_path, grid, cfg)
    n = grid.n_points
    ext, h0, width = regularized_delta(grid, reg_width)
    st = model.state(m_path.slices)
    lvl = np.broadcast_to(np.asarray(st.drift_level, float), (m_path.n_steps + 1,))
    sig = np.broadcast_to(np.asarray(st.sigma, float), (m_path.n_steps + 1,))
    beta = float(model.beta(0.0))
    theta = cfg.theta
    dt = m_path.dt
    hist = np.empty((m_path.n_steps + 1, ext.n_points))
    hist[0] = h0
    for j in range(m_path.n_steps):
        bands = flux_bands(0.5 * sig[j] ** 2, beta * lvl[j], ext)
        lhs = -theta * dt * bands
        lhs[1] += 1.0
        rhs = hist[j] + (1 - theta) * dt * apply_bands(bands, hist[j])
        try:
            hist[j + 1] = solve_banded((1, 1), lhs, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"fundamental solve failed: {exc}", j) from exc
    w_hb = grid.weights * model.h_b
    w_hs = grid.weights * model.h_sigma
    proj_b = np.empty((m_path.n_steps + 1, n))
    proj_s = np.empty((m_path.n_steps + 1, n))
    for j in range(m_path.n_steps + 1):
        f = translate(hist[j], n)
        proj_b[j] = w_hb @ f
        proj_s[j] = w_hs @ f
    stored = stored_schedule(m_path.n_steps, snapshot_every)
    slices = np.stack([translate(hist[j], n) for j in stored])
    return KernelPath(
        grid,
        m_path.t0,
        m_path.t1,
        m_path.n_steps,
        stored,
        slices,
        {"b": proj_b, "sigma": proj_s},
        width,
        {"dt": dt, "h": hist, "h_grid": ext},
    )


def solve_correction(
    model: CoefficientModel,
    m_path: DensityPath,
    f_path: KernelPath,
    cfg: FpConfig,
    snapshot_every: int | None = None,
) -> KernelPath:
    """Correction g: tangent recursion from zero data, sourced by f's projections.

    All y-columns share one tridiagonal factor per step and are advanced as
    the columns of a single matrix.
    """
    grid = m_path.grid
    _check_mesh(m_path, grid, cfg)
    if f_path.grid != grid or f_path.n_steps != m_path.n_steps or abs(f_path.dt - m_path.dt) > 1e-14:
        raise MeshMismatchError("f_path mesh does not match the density path")
    n = grid.n_points
    stored = f_path.stored_indices if snapshot_every is None else stored_schedule(m_path.n_steps, snapshot_every)
    op = TangentOperator(model, m_path, cfg.theta)
    g = np.zeros((n, n))
    proj_b = np.zeros((m_path.n_steps + 1, n))
    proj_s = np.zeros((m_path.n_steps + 1, n))
    slices = np.zeros((len(stored), n, n))
    fb, fs = f_path.projections["b"], f_path.projections["sigma"]
    for j in range(m_path.n_steps):
        if op.linear:
            break
        ts = op.step(j)
        rhs = g + (1 - op.theta) * op.dt * apply_bands(ts.bands, g)
        pb = proj_b[j] + fb[j]
        ps = proj_s[j] + fs[j]
        rhs += op.dt * (np.multiply.outer(ts.r_sigma, ps) + np.multiply.outer(ts.r_b, pb))
        g = solve_banded((1, 1), ts.lhs, rhs, check_finite=False)
        if not np.all(np.isfinite(g)):
            raise SolverError("non-finite values in correction solve", j)
        proj_b[j + 1] = op.w_hb @ g
        proj_s[j + 1] = op.w_hs @ g
        if j + 1 in stored:
            slices[stored.index(j + 1)] = g
    return KernelPath(
        grid, m_path.t0, m_path.t1, m_path.n_steps, stored, slices,
        {"b": proj_b, "sigma": proj_s}, f_path.reg_width, {"dt": m_path.dt},
    )


def assemble_kernel(f_path: KernelPath, g_path: KernelPath) -> KernelPath:
    """k = f + g, slice by slice."""
    if (
        f_path.grid != g_path.grid
        or f_path.stored_indices != g_path.stored_indices
        or f_path.n_steps != g_path.n_steps
    ):
        raise MeshMismatchError("f and g kernels live on different meshes")
    proj = {k: f_path.projections[k] + g_path.projections[k] for k in f_path.projections}
    return KernelPath(
        f_path.grid, f_path.t0, f_path.t1, f_path.n_steps, f_path.stored_indices,
        f_path.slices + g_path.slices, proj, f_path.reg_width, {"dt": f_path.dt},
    )


def solve_kernel(model, m_path, cfg, snapshot_every=None, reg_width=None):
    """Convenience: (f, g, k) in one call."""
    f = solve_fundamental(model, m_path, cfg, snapshot_every, reg_width)
    g = solve_correction(model, m_path, f, cfg)
    return f, g, assemble_kernel(f, g)


def apply_kernel(k_path: KernelPath, mu_tilde: GridFunction, s: float) -> GridFunction:
    """x -> integral of k(s, x, y) mu_tilde(y) dy."""
    if mu_tilde.grid != k_path.grid:
        raise GridMismatchError("direction and kernel grids differ")
    K = k_path.slice_at(s)
    return GridFunction(k_path.grid, K @ (k_path.grid.weights * mu_tilde.values))


def kernel_test_function(k_path: KernelPath, phi: GridFunction, s: float) -> GridFunction:
    """y -> integral of k(s, x, y) phi(x) dx."""
    if phi.grid != k_path.grid:
        raise GridMismatchError("test function and kernel grids differ")
    K = k_path.slice_at(s)
    return GridFunction(k_path.grid, (k_path.grid.weights * phi.values) @ K)


def kernel_directional_discrepancy(k_path, dir_path: DensityPath, mu_tilde: GridFunction) -> np.ndarray:
    """Relative L2 gap between the kernel action and the directional solve at stored nodes."""
    w = k_path.grid.weights
    norm = np.sqrt(np.dot(w, mu_tilde.values**2))
    out = []
    for pos, j in enumerate(k_path.stored_indices):
        d = k_path.slices[pos] @ (w * mu_tilde.values) - dir_path.slices[j]
        out.append(np.sqrt(np.dot(w, d**2)) / norm)
    return np.asarray(out)


def fd_quotient_errors(model, mu: GridFunction, mu_tilde: GridFunction, t, T, cfg: FpConfig, h_values):
    """sup_s || (m^{mu + h mu~} - m^mu)/h - m~ ||_L2 for each h."""
    base = solve_fp(model, mu, t, T, cfg)
    tang = solve_directional(model, base, mu_tilde, cfg)
    w = mu.grid.weights
    errs = []
    for h in h_values:
        pert, _ = march(model, (mu + h * mu_tilde).values, mu.grid, base.dt, cfg.n_steps, cfg)
        q = (pert - base.slices) / h - tang.slices
        errs.append(float(np.sqrt((q**2 @ w).max())))
    return np.asarray(errs)


__all__ = [
    "KernelPath",
    "MeshMismatchError",
    "TangentOperator",
    "apply_kernel",
    "assemble_kernel",
    "directional_slices",
    "fd_quotient_errors",
    "kernel_directional_discrepancy",
    "kernel_test_function",
    "regularized_delta",
    "solve_correction",
    "solve_directional",
    "solve_fundamental",
    "solve_kernel",
    "stored_schedule",
    "translate",
]
