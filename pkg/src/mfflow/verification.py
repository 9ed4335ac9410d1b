"""Checks of the identities tying V to the flow: the master-PDE residual, the
martingale property along the flow, the mean-field Ito formula, and
finite-difference convergence studies.

Monte-Carlo means of smooth path functionals are regression-adjusted with
Hermite polynomials of independent standard-normal Brownian projections.
Those controls have mean exactly zero, so the adjusted mean stays
consistent; its standard error is computed from the regression residuals.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermeval

from .coefficients import ConvergenceReport, UnsupportedModelError, fit_slope
from .fp import FpConfig, apply_bands, march, model_bands, solve_fp
from .grid import DensityPath, GridFunction, derivative_values, l2_norm
from .linearized import fd_quotient_errors, solve_directional
from .sde import NoiseBank, euler_x, path_states, simulate_u, simulate_x, simulate_y
from .value import (
    Estimate,
    TerminalFunctional,
    ValueConfig,
    dv_dmu,
    ensemble_samples,
    prepare_flow,
    value_samples,
)


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# regression-adjusted means


def hermite_controls(Z: np.ndarray, degree: int) -> np.ndarray:
    """Products of probabilists' Hermite polynomials of independent N(0,1) columns.

    All monomials of total degree 1..degree; each has mean exactly zero.
    """
    Z = np.atleast_2d(Z.T).T
    k = Z.shape[1]
    basis = []
    for i in range(k):
        cols = [np.ones(len(Z))]
        for d in range(1, degree + 1):
            e = np.zeros(d + 1)
            e[d] = 1.0
            cols.append(hermeval(Z[:, i], e))
        basis.append(cols)
    out = []
    for degs in itertools.product(range(degree + 1), repeat=k):
        if 0 < sum(degs) <= degree:
            c = np.ones(len(Z))
            for i, d in enumerate(degs):
                c = c * basis[i][d]
            out.append(c)
    return np.column_stack(out) if out else np.zeros((len(Z), 0))


def adjusted_means(Y: np.ndarray, C: np.ndarray | None):
    """Intercepts and standard errors of a least-squares fit of each column of Y on C.

    The intercepts are linear in Y, so they add up exactly like the columns do.
    """
    Y = np.asarray(Y, dtype=float)
    one = Y.ndim == 1
    Y = Y[:, None] if one else Y
    n = len(Y)
    A = np.ones((n, 1)) if C is None or C.shape[1] == 0 else np.column_stack([np.ones(n), C])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    res = Y - A @ coef
    dof = max(n - A.shape[1], 1)
    se = np.sqrt((res**2).sum(axis=0) / dof / n)
    mean = coef[0]
    return (float(mean[0]), float(se[0])) if one else (mean, se)


def orthonormal_projections(weights: np.ndarray, dt: float) -> np.ndarray:
    """Columns q_k with sum_j q_jk dB_j iid N(0,1) spanning the given step weights."""
    W = np.atleast_2d(np.asarray(weights, dtype=float).T).T
    keep = np.linalg.norm(W, axis=0) > 0
    Q, R = np.linalg.qr(W[:, keep])
    rank = np.abs(np.diag(R)) > 1e-12 * np.abs(np.diag(R)).max(initial=1.0)
    return Q[:, rank] / math.sqrt(dt)


# ---------------------------------------------------------------------------
# master PDE residual


@dataclass
class ResidualReport:
    residual: float
    components: dict
    error_budget: float
    std_err: float
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return abs(self.residual) <= self.error_budget


RESIDUAL_TERMS = ("dv_dt", "drift", "diffusion", "measure")


def generator_density(model, mu: GridFunction) -> np.ndarray:
    """d_xx(a mu) - d_x(b mu) by finite differences on the grid."""
    x, dx = mu.grid.nodes, mu.grid.dx
    a = model.a(x, mu) * mu.values
    b = model.b(x, mu) * mu.values
    return derivative_values(a, dx, 2) - derivative_values(b, dx, 1)


def master_pde_residual(
    model,
    Phi: TerminalFunctional,
    t: float,
    x: float,
    mu: GridFunction,
    cfg: ValueConfig,
    T: float,
    c_est: float | None = None,
    control_degree: int = 6,
) -> ResidualReport:
    """dV/dt + V_x b + V_xx a + <dV/dmu, d_xx(a mu) - d_x(b mu)> at (t, x, mu)."""
    if not model.state_invariant:
        raise UnsupportedModelError(
            "the full dV/dmu needs the kernel, which exists only for x-independent "
            "coefficients; pairing mode cannot assemble the measure term"
        )
    meta = {"n_paths": cfg.n_paths, "seed": cfg.seed, "dt": cfg.dt, "dx": mu.grid.dx,
            "n_points": mu.grid.n_points, "c_est": c_est}
    if Phi.is_constant:
        return ResidualReport(0.0, {k: 0.0 for k in RESIDUAL_TERMS}, 0.0, 0.0, meta)
    flow = prepare_flow(model, t, T, mu, cfg, kernel=True)
    nu = generator_density(model, mu)
    lv, ds, sg, ss = path_states(model, flow.m_path)
    q_nu = flow.k_path.projections["sigma"][:-1] @ (mu.grid.weights * nu)
    Q = orthonormal_projections(np.column_stack([sg[:-1], ss[:-1] * q_nu]), cfg.dt)
    s = ensemble_samples(
        model, Phi, x, flow, cfg, ("gen", "vx", "vxx", "u_nu", "k_nu", "proj"), nu=nu, proj_weights=Q
    )
    b0 = float(model.b(x, mu))
    a0 = float(model.a(x, mu))
    cols = np.column_stack([-s["gen"], s["vx"] * b0, s["vxx"] * a0, s["u_nu"] + s["k_nu"]])
    C = hermite_controls(s["proj"], control_degree) if control_degree > 0 else None
    means, ses = adjusted_means(cols, C)
    _, se_tot = adjusted_means(cols.sum(axis=1), C)
    comps = dict(zip(RESIDUAL_TERMS, (float(v) for v in means)))
    residual = float(sum(comps.values()))
    budget = 3.0 * se_tot + (c_est or 0.0) * (cfg.dt + mu.grid.dx**2)
    meta["component_std_err"] = dict(zip(RESIDUAL_TERMS, (float(v) for v in ses)))
    meta["escaped"] = int(s["escaped"].sum())
    return ResidualReport(residual, comps, budget, se_tot, meta)


@dataclass
class RefinementResult:
    coarse: ResidualReport
    fine: ResidualReport
    c_est: float
    ratio: float


def residual_refinement(build_level: Callable[[int], tuple], control_degree: int = 6) -> RefinementResult:
    """Residual at a reference level and one refinement (dt, dx halved, paths x4).

    ``build_level(k)`` returns ``(model, Phi, t, x, mu, cfg, T)`` for level k in
    {0, 1}.  The discretization constant is calibrated from the two levels and
    folded into both error budgets.
    """
    args0 = build_level(0)
    args1 = build_level(1)
    r0 = master_pde_residual(*args0, control_degree=control_degree)
    r1 = master_pde_residual(*args1, control_degree=control_degree)
    h0 = r0.metadata["dt"] + r0.metadata["dx"] ** 2
    h1 = r1.metadata["dt"] + r1.metadata["dx"] ** 2
    c_est = abs(r0.residual - r1.residual) / (h0 - h1)
    for r, h in ((r0, h0), (r1, h1)):
        r.error_budget = 3.0 * r.std_err + c_est * h
        r.metadata["c_est"] = c_est
    ratio = abs(r0.residual) / abs(r1.residual) if r1.residual != 0 else math.inf
    return RefinementResult(r0, r1, c_est, ratio)


# ---------------------------------------------------------------------------
# terminal condition


def terminal_condition_check(Phi: TerminalFunctional, x: float, mu: GridFunction, model=None,
                             cfg: ValueConfig | None = None, steps: int = 0) -> float:
    """|V(T - steps*dt, x, mu) - Phi(x, mu)|; zero steps means no evolution at all."""
    target = float(Phi.phi(x, mu))
    if steps == 0 or Phi.is_constant:
        return abs(float(Phi.phi(x, mu)) - target)
    T = steps * cfg.dt
    v = value_samples(model, Phi, 0.0, x, mu, cfg, T).mean()
    return abs(float(v) - target)


# ---------------------------------------------------------------------------
# martingale property


@dataclass
class MartingaleReport:
    checkpoints: list
    values: list  # M_s
    drifts: list  # M_s - V(t)
    std_errs: list
    v_hat: float
    v_std_err: float
    n_outer: int
    n_inner: int
    sigmas: float = 3.0

    @property
    def max_drift(self) -> float:
        return max(abs(d) for d in self.drifts)

    @property
    def passed(self) -> bool:
        return all(abs(d) <= self.sigmas * s for d, s in zip(self.drifts, self.std_errs))


def _explicit_inner(model, Phi: TerminalFunctional) -> bool:
    """Phi affine in x, free of m, and X a martingale: V(s, y, .) = Phi(y)."""
    return (
        Phi.F is None
        and Phi.g.kind in ("identity", "const")
        and model.b0 == 0.0
        and model.b1 == 0.0
    )


def martingale_check(
    model,
    Phi: TerminalFunctional,
    t: float,
    x: float,
    mu: GridFunction,
    checkpoints: Sequence[float],
    cfg: ValueConfig,
    T: float,
    n_inner: int | None = None,
    max_inner_work: float = 5e9,
) -> MartingaleReport:
    """Nested Monte Carlo of M_s = E[V(s, X_s, m_s)] against V(t, x, mu).

    The inner values restart from (s, X_s, m_s) with fresh noise and reuse the
    tail of the density path (the discrete flow property).  Drifts are paired
    per outer path against Phi(X_T, m_T), so their expectation is exactly zero
    for the discrete scheme.
    """
    flow = prepare_flow(model, t, T, mu, cfg)
    m_path = flow.m_path
    n_out = cfg.n_paths
    n_in = max(1, int(round(math.sqrt(n_out)))) if n_inner is None else n_inner
    idx = [m_path.index_of(s) for s in checkpoints]
    explicit = _explicit_inner(model, Phi)
    work = sum(n_out * n_in * (m_path.n_steps - k) for k in idx) if not explicit else 0
    if work > max_inner_work:
        raise ConfigurationError(
            f"nested budget exceeded: {work:.3g} inner path-steps > {max_inner_work:.3g}"
        )
    lv, _, sg, _ = path_states(model, m_path)
    noise = cfg.noise(m_path.n_steps)
    mT = m_path.final
    phi_T = []
    inner = {k: [] for k in idx}
    for first in range(0, n_out, cfg.chunk_size):
        count = min(cfg.chunk_size, n_out - first)
        X = simulate_x(model, m_path, t, x, noise, first, count)
        phi_T.append(Phi.phi(X.terminal, mT) + np.zeros(count))
        for ci, k in enumerate(idx):
            Xs = X.states[k]
            if k == 0:
                continue
            if explicit or k == m_path.n_steps:
                inner[k].append(Phi.phi(Xs, mT) + np.zeros(count))
                continue
            bank = NoiseBank(cfg.seed, n_out, m_path.n_steps, cfg.dt, stream=cfg.stream + 1 + ci)
            # keep each inner batch near chunk_size paths; one generator per outer path
            sub = max(1, cfg.chunk_size // n_in)
            for o in range(0, count, sub):
                c = min(sub, count - o)
                dW = bank.grouped(first + o, c, n_in, m_path.n_steps - k)
                Xin = euler_x(model, lv[k:], sg[k:], np.repeat(Xs[o : o + c], n_in), dW, cfg.dt)
                inner[k].append(Phi.phi(Xin[-1], mT).reshape(c, n_in).mean(axis=1))
    phi_T = np.concatenate(phi_T)
    v_hat = Estimate.of(phi_T)
    M, drifts, ses = [], [], []
    for k in idx:
        if k == 0:
            M.append(v_hat.value)
            drifts.append(0.0)
            ses.append(0.0)
            continue
        vals = np.concatenate(inner[k])
        d = Estimate.of(vals - phi_T)
        M.append(float(vals.mean()))
        drifts.append(d.value)
        ses.append(d.std_err)
    return MartingaleReport(list(checkpoints), M, drifts, ses, v_hat.value, v_hat.std_err, n_out, n_in)


# ---------------------------------------------------------------------------
# Ito formula


@dataclass(frozen=True, eq=False)
class TimeWeighted:
    """f(s, x, m) = exp(rate * (s - t0)) * Phi(x, m)."""

    Phi: TerminalFunctional
    rate: float = 0.0
    t0: float = 0.0

    def weight(self, s):
        return np.exp(self.rate * (np.asarray(s, float) - self.t0))

    @property
    def is_constant(self) -> bool:
        return self.Phi.is_constant and self.rate == 0.0


@dataclass
class ItoReport:
    mean: float
    std_err: float
    c_est: float
    dt: float
    exact_zero: bool = False

    @property
    def bound(self) -> float:
        return 3.0 * self.std_err + self.c_est * self.dt

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= self.bound


def ito_samples(model, f: TimeWeighted, t, x, mu, cfg: ValueConfig, T: float) -> np.ndarray:
    """Per-path f(T, X_T, m_T) - f(t, x, mu) - sum[generator] dt - sum f_x sigma dB."""
    if f.is_constant:
        return np.zeros(cfg.n_paths)
    fcfg = cfg.fp(t, T)
    m_path = solve_fp(model, mu, t, T, fcfg, dt=cfg.dt)
    grid = mu.grid
    Phi = f.Phi
    lv, ds, sg, ss = path_states(model, m_path)
    s_nodes = m_path.times
    w = f.weight(s_nodes)
    # per-slice scalars of the m-dependence
    Fv = np.broadcast_to(np.asarray(Phi.F_value(m_path.slices), float), (len(s_nodes),))
    if Phi.F is not None:
        Fs = np.asarray(Phi.F_slope(m_path.slices), float)
        rates = np.array(
            [
                float(np.dot(grid.weights * Phi.F.h.values,
                             apply_bands(model_bands(model, grid, model.state(GridFunction(grid, m))), m)))
                for m in m_path.slices
            ]
        )
        meas = Fs * rates
    else:
        meas = np.zeros(len(s_nodes))
    beta_const = model.state_invariant
    noise = cfg.noise(m_path.n_steps)
    out = []
    for first in range(0, cfg.n_paths, cfg.chunk_size):
        count = min(cfg.chunk_size, cfg.n_paths - first)
        X = simulate_x(model, m_path, t, x, noise, first, count)
        S, dW = X.states, X.increments
        g0, g1, g2 = Phi.g(S), Phi.g(S, 1), Phi.g(S, 2)
        phi = g0 * Fv[:, None] + Phi.c
        b = (float(model.beta(0.0)) if beta_const else model.beta(S)) * lv[:, None]
        a = 0.5 * sg[:, None] ** 2
        fx = w[:, None] * g1 * Fv[:, None]
        gen = (
            f.rate * w[:, None] * phi
            + b * fx
            + a * w[:, None] * g2 * Fv[:, None]
            + w[:, None] * g0 * meas[:, None]
        )
        lhs = w[-1] * phi[-1] - w[0] * phi[0]
        drift = gen[:-1].sum(axis=0) * cfg.dt
        stoch = (fx[:-1] * sg[:-1, None] * dW).sum(axis=0)
        out.append(lhs - drift - stoch)
    return np.concatenate(out)


def ito_residual(model, f: TimeWeighted, t, x, mu, cfg: ValueConfig, T: float, calibrate: bool = True) -> ItoReport:
    """Mean pathwise Ito residual with a weak-order-one bias envelope.

    The envelope constant comes from a coarser run on the same Brownian
    paths (every pair of steps merged).
    """
    r = ito_samples(model, f, t, x, mu, cfg, T)
    if f.is_constant:
        return ItoReport(0.0, 0.0, 0.0, cfg.dt, exact_zero=True)
    est = Estimate.of(r)
    c_est = 0.0
    n = cfg.n_steps(t, T)
    if calibrate and n % 2 == 0:
        coarse = cfg.replace(dt=2 * cfg.dt, coarsen=2 * cfg.coarsen)
        rc = Estimate.of(ito_samples(model, f, t, x, mu, coarse, T))
        c_est = abs(rc.value - est.value) / cfg.dt
    return ItoReport(est.value, est.std_err, c_est, cfg.dt, exact_zero=bool(np.all(r == 0.0)))


# ---------------------------------------------------------------------------
# finite-difference agreement of the value derivatives


@dataclass
class Agreement:
    name: str
    derivative: float
    quotient: float
    std_err: float  # of the paired difference
    envelope: float
    sigmas: float = 3.0

    @property
    def gap(self) -> float:
        return abs(self.quotient - self.derivative)

    @property
    def tolerance(self) -> float:
        return self.sigmas * self.std_err + self.envelope

    @property
    def passed(self) -> bool:
        return self.gap <= self.tolerance


def _paired(q: np.ndarray, d: np.ndarray) -> float:
    return Estimate.of(q - d).std_err


def derivative_agreement(
    model,
    Phi: TerminalFunctional,
    t: float,
    x: float,
    mu: GridFunction,
    cfg: ValueConfig,
    T: float,
    directions: Sequence[GridFunction],
    dx_step: float = 0.05,
    dmu_step: float = 0.05,
    dt_steps: int | None = None,
    coarse: tuple | None = None,
) -> list[Agreement]:
    """Each derivative estimator against its central CRN quotient.

    Envelope = |Q(2h) - Q(h)|, about three times the leading O(h^2) bias of
    the quotient.  Kernel-mode measure pairings carry an O(dx^2) bias of
    their own: with ``coarse = (model, Phi, mu, directions)`` on a grid of
    double spacing, |P(2dx) - P(dx)| is added; without it the leading
    delta-regularization term (w^2/2)|<dV/dmu, mu~''>| is used.
    """
    rows = []

    def V(tt=t, xx=x, mm=mu):
        return value_samples(model, Phi, tt, xx, mm, cfg, T)

    flow = prepare_flow(model, t, T, mu, cfg)
    s = ensemble_samples(model, Phi, x, flow, cfg, ("phi", "vx", "vxx", "gen"))
    base = s["phi"]

    def qx(h):
        return (V(xx=x + h) - V(xx=x - h)) / (2 * h)

    def qxx(h, up, dn):
        return (up - 2 * base + dn) / h**2

    up1, dn1, up2, dn2 = V(xx=x + dx_step), V(xx=x - dx_step), V(xx=x + 2 * dx_step), V(xx=x - 2 * dx_step)
    q1 = (up1 - dn1) / (2 * dx_step)
    q2 = (up2 - dn2) / (4 * dx_step)
    rows.append(Agreement("V_x", float(s["vx"].mean()), float(q1.mean()), _paired(q1, s["vx"]), abs(q2.mean() - q1.mean())))
    c1 = qxx(dx_step, up1, dn1)
    c2 = qxx(2 * dx_step, up2, dn2)
    rows.append(Agreement("V_xx", float(s["vxx"].mean()), float(c1.mean()), _paired(c1, s["vxx"]), abs(c2.mean() - c1.mean())))

    if directions:
        mud = dv_dmu(model, Phi, t, x, mu, cfg, T, directions)
        coarse_pairs = None
        if coarse is not None:
            cm, cP, cmu, cdirs = coarse
            coarse_pairs = dv_dmu(cm, cP, t, x, cmu, cfg, T, cdirs).pairings
        width = 2.0 * mu.grid.dx
        for i, d in enumerate(directions):
            qa = (V(mm=mu + dmu_step * d) - V(mm=mu - dmu_step * d)) / (2 * dmu_step)
            qb = (V(mm=mu + 2 * dmu_step * d) - V(mm=mu - 2 * dmu_step * d)) / (4 * dmu_step)
            est = mud.pairings[i]
            env = abs(qb.mean() - qa.mean())
            if mud.mode == "kernel" and coarse_pairs is not None:
                env += abs(coarse_pairs[i].value - est.value)
            elif mud.mode == "kernel":
                d2 = derivative_values(d.values, mu.grid.dx, 2)
                env += 0.5 * width**2 * abs(float(np.dot(mu.grid.weights, mud.function.values * d2)))
            rows.append(Agreement(f"V_mu[{i}]", est.value, float(qa.mean()), _paired(qa, est.samples), env))

    k = dt_steps if dt_steps is not None else max(1, int(round(0.05 / cfg.dt)))
    D = k * cfg.dt
    qa = (V(tt=t + D) - V(tt=t - D)) / (2 * D)
    qb = (V(tt=t + 2 * D) - V(tt=t - 2 * D)) / (4 * D)
    dvt = -s["gen"]
    rows.append(Agreement("V_t", float(dvt.mean()), float(qa.mean()), _paired(qa, dvt), abs(qb.mean() - qa.mean())))
    return rows


# ---------------------------------------------------------------------------
# convergence studies


def state_derivative_errors(model, mu, mu_tilde, t, T, x, cfg: ValueConfig, h_values) -> np.ndarray:
    """RMS over paths of sup_s |(X^{mu + h mu~}_s - X^mu_s)/h - Y_s| per h (shared noise)."""
    fcfg = cfg.fp(t, T)
    base = solve_fp(model, mu, t, T, fcfg, dt=cfg.dt)
    tang = solve_directional(model, base, mu_tilde, fcfg)
    noise = cfg.noise(fcfg.n_steps)
    X = simulate_x(model, base, t, x, noise)
    Y = simulate_y(model, base, tang, X)
    errs = []
    for h in h_values:
        slices, _ = march(model, (mu + h * mu_tilde).values, mu.grid, cfg.dt, fcfg.n_steps, fcfg)
        ph = DensityPath(mu.grid, t, T, fcfg.n_steps, slices, {"dt": cfg.dt})
        Xh = simulate_x(model, ph, t, x, noise)
        q = (Xh.states - X.states) / h - Y.states
        errs.append(float(np.sqrt(np.mean(np.max(q**2, axis=0)))))
    return np.asarray(errs)


def pairing_errors(model, Phi, mu, mu_tilde, t, T, x, cfg: ValueConfig, h_values) -> np.ndarray:
    """RMS over paths of the forward CRN quotient of Phi minus the Y-based pairing sample."""
    flow = prepare_flow(model, t, T, mu, cfg, [mu_tilde])
    s = ensemble_samples(model, Phi, x, flow, cfg, ("phi", "pair"))
    errs = []
    for h in h_values:
        ph = value_samples(model, Phi, t, x, mu + h * mu_tilde, cfg, T)
        q = (ph - s["phi"]) / h - s["pair"][:, 0]
        errs.append(float(np.sqrt(np.mean(q**2))))
    return np.asarray(errs)


TARGETS = ("density_derivative", "state_derivative", "value_mu_pairing")


def convergence_study(target: str, scenario, h_values: Sequence[float], direction: int = 0,
                      n_paths: int | None = None) -> ConvergenceReport:
    """Finite-difference errors per h and the fitted log-log slope."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from {TARGETS}")
    h = np.asarray(h_values, dtype=float)
    if len(h) < 4 or np.any(np.diff(h) >= 0) or np.any(h <= 0):
        raise ValueError("need at least 4 positive, decreasing h values")
    sc = scenario
    mt = sc.directions[direction]
    cfg = sc.value_config(**({"n_paths": n_paths} if n_paths else {}))
    if target == "density_derivative":
        errs = fd_quotient_errors(sc.model, sc.mu, mt, sc.t, sc.T, FpConfig(sc.n_steps), h)
        floor = 1e-10 * max(1.0, l2_norm(mt))
    elif target == "state_derivative":
        errs = state_derivative_errors(sc.model, sc.mu, mt, sc.t, sc.T, sc.x0, cfg, h)
        floor = 1e-10
    else:
        errs = pairing_errors(sc.model, sc.Phi, sc.mu, mt, sc.t, sc.T, sc.x0, cfg, h)
        floor = 1e-10
    slope, floored = fit_slope(h, errs, floor)
    return ConvergenceReport(h, errs, slope, floored, extra={"target": target, "scenario": sc.name})


SLOPE_WINDOW = (0.7, 1.3)


def slope_ok(rep: ConvergenceReport) -> bool:
    return rep.floor_limited or (rep.slope is not None and SLOPE_WINDOW[0] <= rep.slope <= SLOPE_WINDOW[1])


def u_representation_discrepancy(model, mu: GridFunction, mu_tilde: GridFunction, t: float, T: float,
                                 x: float, cfg: ValueConfig) -> tuple[float, float]:
    """(RMS over paths of <U_T, mu~> - Y_T, RMS of Y_T) on shared noise."""
    flow = prepare_flow(model, t, T, mu, cfg, [mu_tilde], kernel=True)
    noise = cfg.noise(flow.m_path.n_steps)
    X = simulate_x(model, flow.m_path, t, x, noise)
    Y = simulate_y(model, flow.m_path, flow.dir_paths[0], X).states[-1]
    U = simulate_u(model, flow.m_path, flow.k_path, X).pair(mu_tilde.values)
    return float(np.sqrt(np.mean((U - Y) ** 2))), float(np.sqrt(np.mean(Y**2)))


def terminal_one_step(model, Phi: TerminalFunctional, x: float, mu: GridFunction, cfg: ValueConfig,
                      T: float) -> tuple[float, float]:
    """|V(T - dt, x, mu) - Phi(x, mu)| and its one-step Taylor envelope.

    Envelope: sup|Phi_x| (sup|b| dt + sigma sqrt(dt) E|N|) + sup|g| |F(m_T) - F(mu)|.
    """
    if Phi.is_constant:
        return 0.0, 0.0
    t = T - cfg.dt
    flow = prepare_flow(model, t, T, mu, cfg)
    v = float(ensemble_samples(model, Phi, x, flow, cfg, ("phi",))["phi"].mean())
    mT = flow.m_path.final
    fsup = 1.0 if Phi.F is None else Phi.F.sup
    lip = Phi.g.sup(1) * fsup
    b_sup = drift_sup(model, mu)
    sig = float(np.max(np.abs(path_states(model, flow.m_path)[2])))
    env = lip * (b_sup * cfg.dt + sig * math.sqrt(cfg.dt) * math.sqrt(2 / math.pi))
    env += Phi.g.sup(0) * abs(float(Phi.F_value(mT)) - float(Phi.F_value(mu)))
    return abs(v - float(Phi.phi(x, mu))), env


def drift_sup(model, mu: GridFunction) -> float:
    """Uniform bound sup|beta| (|b0| + |b1| sup|outer|) on the drift."""
    return model.beta.sup(0) * (abs(model.b0) + abs(model.b1) * model.b_functional.sup)
