"""Monte-Carlo value function V(t, x, mu) = E[Phi(X_T, m_T)] and its derivatives.

All estimators are sample means over per-path quantities, so every returned
number carries a standard error, and estimators evaluated on one noise bank
can be differenced path by path.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coefficients import CoefficientModel, Profile, SmoothFunctional
from .fp import FpConfig, apply_bands, model_bands, solve_fp
from .grid import DensityPath, GridFunction, OffMeshError, l2_inner, sobolev_norm
from .linearized import KernelPath, directional_slices, solve_kernel
from .sde import (
    NoiseBank,
    simulate_first_variation,
    simulate_second_variation,
    simulate_u,
    simulate_x,
    simulate_y,
)


@dataclass(frozen=True, eq=False)
class TerminalFunctional:
    """Phi(x, m) = g(x) * F(m) + c; ``F=None`` means F = 1."""

    g: Profile = Profile("const")
    F: SmoothFunctional | None = None
    c: float = 0.0

    def F_value(self, m):
        return 1.0 if self.F is None else self.F.value(m)

    def F_slope(self, m):
        return 0.0 if self.F is None else self.F.slope(m)

    def phi(self, x, m):
        return self.g(x) * self.F_value(m) + self.c

    def dphi_dx(self, x, m):
        return self.g(x, 1) * self.F_value(m)

    def d2phi_dx2(self, x, m):
        return self.g(x, 2) * self.F_value(m)

    def dphi_dm(self, x: float, m: GridFunction) -> GridFunction:
        if self.F is None:
            return m.grid.zeros()
        return float(self.g(x)) * self.F.derivative(m)

    @property
    def is_constant(self) -> bool:
        return (self.g.is_constant or self.g.amp == 0.0) and self.F is None

    @property
    def bound(self) -> float:
        """Uniform bound on Phi, its two x-derivatives and the W^{1,2} norm of dPhi/dm."""
        fs = 1.0 if self.F is None else self.F.sup
        cands = [self.g.sup(k) * fs for k in range(3)]
        cands[0] += abs(self.c)
        if self.F is not None:
            cands.append(self.g.sup(0) * self.F.sup_slope * sobolev_norm(self.F.h, 1))
        return max(cands)


@dataclass(frozen=True)
class ValueConfig:
    n_paths: int
    seed: int
    dt: float
    chunk_size: int = 5000
    threads: int = 1
    snapshot_every: int | None = None
    theta: float = 0.5
    picard_iters: int = 0
    picard_tol: float = 1e-12
    stream: int = 0
    coarsen: int = 1

    def __post_init__(self):
        if self.n_paths < 1 or self.chunk_size < 1 or self.threads < 1 or self.dt <= 0:
            raise ValueError("invalid value configuration")

    def n_steps(self, t: float, T: float) -> int:
        k = (T - t) / self.dt
        n = int(round(k))
        if abs(k - n) > 1e-9 * max(1.0, k):
            raise OffMeshError(f"horizon {T - t} is not a multiple of dt={self.dt}")
        return n

    def fp(self, t: float, T: float) -> FpConfig:
        return FpConfig(self.n_steps(t, T), self.picard_iters, self.picard_tol, self.theta)

    def noise(self, n_steps: int) -> NoiseBank:
        return NoiseBank(self.seed, self.n_paths, n_steps, self.dt, self.stream, self.coarsen)

    def replace(self, **kw) -> "ValueConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Estimate:
    value: float
    std_err: float
    samples: np.ndarray | None = None

    @classmethod
    def of(cls, samples: np.ndarray, keep: bool = True) -> "Estimate":
        s = np.asarray(samples, dtype=float)
        n = s.size
        se = float(s.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(s.mean()), se, s if keep else None)


@dataclass
class MuDerivative:
    """dV/dmu as a function of y (kernel mode) and/or its pairings with directions."""

    function: GridFunction | None
    pairings: list
    mode: str


@dataclass
class ValueReport:
    v: float
    std_err: float
    dv_dx: float
    d2v_dx2: float
    dv_dmu: GridFunction | None
    dv_dt: float
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared flow data


@dataclass
class FlowData:
    """Everything the ensembles read: densities, directional slices, the kernel."""

    t: float
    T: float
    m_path: DensityPath
    directions: list
    dir_paths: list
    k_path: KernelPath | None = None


def prepare_flow(
    model: CoefficientModel,
    t: float,
    T: float,
    mu: GridFunction,
    cfg: ValueConfig,
    directions: Sequence[GridFunction] = (),
    kernel: bool = False,
) -> FlowData:
    fcfg = cfg.fp(t, T)
    m_path = solve_fp(model, mu, t, T, fcfg, dt=cfg.dt)
    dirs = list(directions)
    dir_paths = []
    if dirs:
        batch = directional_slices(model, m_path, np.column_stack([d.values for d in dirs]), cfg.theta)
        for i in range(len(dirs)):
            dir_paths.append(DensityPath(mu.grid, t, T, fcfg.n_steps, batch[:, :, i], {"dt": cfg.dt}))
    k_path = None
    if kernel:
        k_path = solve_kernel(model, m_path, fcfg, cfg.snapshot_every)[2]
    return FlowData(t, T, m_path, dirs, dir_paths, k_path)


def generator_at(model: CoefficientModel, Phi: TerminalFunctional, xT: np.ndarray, mT: GridFunction) -> np.ndarray:
    """b Phi_x + a Phi_xx + <dPhi/dm, d_s m> at (X_T, m_T); d_s m from the flux operator."""
    out = model.b(xT, mT) * Phi.dphi_dx(xT, mT) + model.a(xT, mT) * Phi.d2phi_dx2(xT, mT)
    if Phi.F is not None:
        rate = apply_bands(model_bands(model, mT.grid, model.state(mT)), mT.values)
        out = out + Phi.g(xT) * Phi.F_slope(mT) * float(np.dot(mT.grid.weights, Phi.F.h.values * rate))
    return out


def _chunk_list(n_paths: int, size: int):
    return [(a, min(size, n_paths - a)) for a in range(0, n_paths, size)]


def ensemble_samples(
    model: CoefficientModel,
    Phi: TerminalFunctional,
    x,
    flow: FlowData,
    cfg: ValueConfig,
    quantities: Sequence[str] = ("phi",),
    nu: np.ndarray | None = None,
    noise: NoiseBank | None = None,
    proj_weights: np.ndarray | None = None,
) -> dict:
    """Per-path samples, concatenated over chunks in path order.

    Quantities: ``phi``, ``vx``, ``vxx``, ``pair`` (Y-based, one column per
    direction), ``kpair`` (kernel-based), ``gen`` (terminal generator),
    ``u_nu`` (Phi_x <U_T, nu>), ``k_nu`` (kernel term paired with nu),
    ``u_acc`` (summed Phi_x-weighted U coefficients), ``g``, ``proj``
    (increments projected on the columns of ``proj_weights``).
    """
    q = set(quantities)
    m_path = flow.m_path
    mT = m_path.final
    noise = cfg.noise(m_path.n_steps) if noise is None else noise
    grid = m_path.grid
    need_u = bool(q & {"kpair", "u_nu", "u_acc"})
    if need_u and flow.k_path is None:
        raise ValueError("kernel quantities requested without a kernel")
    if Phi.F is not None:
        hF_w = grid.weights * Phi.F.h.values
        slopeF = float(Phi.F_slope(mT))
    dir_T = [p.slices[-1] for p in flow.dir_paths]

    def run(chunk):
        first, count = chunk
        X = simulate_x(model, m_path, flow.t, x, noise, first, count)
        xT = X.terminal
        res = {}
        phx = Phi.dphi_dx(xT, mT)
        gx = Phi.g(xT)
        if "phi" in q:
            res["phi"] = Phi.phi(xT, mT) + np.zeros(count)
        if "g" in q:
            res["g"] = gx + np.zeros(count)
        if q & {"vx", "vxx"}:
            D = simulate_first_variation(model, m_path, X)
            res["vx"] = phx * D.terminal
            if "vxx" in q:
                D2 = simulate_second_variation(model, m_path, X, D)
                res["vxx"] = Phi.d2phi_dx2(xT, mT) * D.terminal**2 + phx * D2.terminal
        if "pair" in q:
            cols = []
            for dp, vT in zip(flow.dir_paths, dir_T):
                Y = simulate_y(model, m_path, dp, X)
                col = phx * Y.terminal
                if Phi.F is not None:
                    col = col + gx * slopeF * float(hF_w @ vT)
                cols.append(col)
            res["pair"] = np.column_stack(cols) if cols else np.zeros((count, 0))
        if "gen" in q:
            res["gen"] = generator_at(model, Phi, xT, mT) + np.zeros(count)
        if need_u:
            U = simulate_u(model, m_path, flow.k_path, X)
            if "u_acc" in q:
                res["u_acc"] = (phx @ U.coef_b, phx @ U.coef_s)
            kT = flow.k_path.final
            ktest = hF_w @ kT if Phi.F is not None else None
            if "kpair" in q:
                cols = []
                for d in flow.directions:
                    col = phx * U.pair(d.values)
                    if ktest is not None:
                        col = col + gx * slopeF * float(ktest @ (grid.weights * d.values))
                    cols.append(col)
                res["kpair"] = np.column_stack(cols) if cols else np.zeros((count, 0))
            if nu is not None and q & {"u_nu", "k_nu"}:
                res["u_nu"] = phx * U.pair(nu)
                kv = float(ktest @ (grid.weights * nu)) if ktest is not None else 0.0
                res["k_nu"] = gx * slopeF * kv + np.zeros(count)
        if "proj" in q:
            res["proj"] = X.increments.T @ proj_weights
        res["escaped"] = X.escaped
        return res

    chunks = _chunk_list(noise.n_paths, cfg.chunk_size)
    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    out = {}
    for key in parts[0]:
        if key == "u_acc":
            out[key] = tuple(sum(p[key][i] for p in parts) for i in range(2))
        else:
            out[key] = np.concatenate([p[key] for p in parts])
    return out


# ---------------------------------------------------------------------------
# public estimators


def value_samples(model, Phi, t, x, mu, cfg: ValueConfig, T: float, noise: NoiseBank | None = None) -> np.ndarray:
    """Per-path Phi(X_T, m_T); with a shared ``noise`` bank these are CRN samples."""
    if Phi.is_constant:
        return np.full(cfg.n_paths, Phi.c + Phi.g.amp * float(Phi.g.is_constant))
    flow = prepare_flow(model, t, T, mu, cfg)
    return ensemble_samples(model, Phi, x, flow, cfg, ("phi",), noise=noise)["phi"]


def eval_v(model, Phi, t, x, mu, cfg: ValueConfig, T: float) -> Estimate:
    if t == T:
        return Estimate(float(Phi.phi(x, mu)), 0.0)
    return Estimate.of(value_samples(model, Phi, t, x, mu, cfg, T))


def dv_dx(model, Phi, t, x, mu, cfg: ValueConfig, T: float) -> tuple[Estimate, Estimate]:
    """(V_x, V_xx) from the first and second variation processes."""
    if Phi.is_constant:
        return Estimate(0.0, 0.0), Estimate(0.0, 0.0)
    flow = prepare_flow(model, t, T, mu, cfg)
    s = ensemble_samples(model, Phi, x, flow, cfg, ("vx", "vxx"))
    return Estimate.of(s["vx"]), Estimate.of(s["vxx"])


def dv_dmu(
    model,
    Phi,
    t,
    x,
    mu,
    cfg: ValueConfig,
    T: float,
    directions: Sequence[GridFunction] = (),
) -> MuDerivative:
    """Functional derivative of V in mu.

    State-invariant models get the full y-function via the kernel; other
    models only get pairings with the supplied directions (via Y).
    """
    grid = mu.grid
    if Phi.F is None and model.b1 == 0.0 and model.s1 == 0.0:
        z = [Estimate(0.0, 0.0) for _ in directions]
        return MuDerivative(grid.zeros(), z, "kernel" if model.state_invariant else "pairing")
    if not model.state_invariant:
        flow = prepare_flow(model, t, T, mu, cfg, directions)
        s = ensemble_samples(model, Phi, x, flow, cfg, ("pair",))
        return MuDerivative(None, [Estimate.of(s["pair"][:, i]) for i in range(len(directions))], "pairing")
    flow = prepare_flow(model, t, T, mu, cfg, directions, kernel=True)
    s = ensemble_samples(model, Phi, x, flow, cfg, ("u_acc", "g", "kpair"))
    acc_b, acc_s = s["u_acc"]
    n = cfg.n_paths
    fn = (acc_b @ flow.k_path.projections["b"][:-1] + acc_s @ flow.k_path.projections["sigma"][:-1]) / n
    if Phi.F is not None:
        mT = flow.m_path.final
        ktest = (grid.weights * Phi.F.h.values) @ flow.k_path.final
        fn = fn + float(s["g"].mean()) * float(Phi.F_slope(mT)) * ktest
    pairs = [Estimate.of(s["kpair"][:, i]) for i in range(len(directions))]
    return MuDerivative(GridFunction(grid, fn), pairs, "kernel")


def dv_dmu_pairing(model, Phi, t, x, mu, cfg, T, directions) -> list:
    """<dV/dmu, mu~> via the directional process Y (works for every model)."""
    flow = prepare_flow(model, t, T, mu, cfg, directions)
    s = ensemble_samples(model, Phi, x, flow, cfg, ("pair",))
    return [Estimate.of(s["pair"][:, i]) for i in range(len(directions))]


def dv_dt(model, Phi, t, x, mu, cfg: ValueConfig, T: float) -> Estimate:
    """-E[b Phi_x + a Phi_xx + <dPhi/dm, d_s m(T)>] at (X_T, m_T)."""
    if Phi.is_constant:
        return Estimate(0.0, 0.0)
    flow = prepare_flow(model, t, T, mu, cfg)
    return Estimate.of(-ensemble_samples(model, Phi, x, flow, cfg, ("gen",))["gen"])


def value_report(model, Phi, t, x, mu, cfg: ValueConfig, T: float) -> ValueReport:
    """All four derivative representations from one ensemble."""
    kernel = model.state_invariant and not Phi.is_constant
    flow = prepare_flow(model, t, T, mu, cfg, kernel=kernel)
    qs = ["phi", "vx", "vxx", "gen", "g"] + (["u_acc"] if kernel else [])
    s = ensemble_samples(model, Phi, x, flow, cfg, qs)
    fn = None
    if kernel:
        acc_b, acc_s = s["u_acc"]
        kp = flow.k_path
        fn = (acc_b @ kp.projections["b"][:-1] + acc_s @ kp.projections["sigma"][:-1]) / cfg.n_paths
        if Phi.F is not None:
            ktest = (mu.grid.weights * Phi.F.h.values) @ kp.final
            fn = fn + float(s["g"].mean()) * float(Phi.F_slope(flow.m_path.final)) * ktest
        fn = GridFunction(mu.grid, fn)
    elif Phi.is_constant:
        fn = mu.grid.zeros()
    v = Estimate.of(s["phi"])
    return ValueReport(
        v=v.value,
        std_err=v.std_err,
        dv_dx=float(s["vx"].mean()),
        d2v_dx2=float(s["vxx"].mean()),
        dv_dmu=fn,
        dv_dt=float(-s["gen"].mean()),
        metadata={
            "n_paths": cfg.n_paths,
            "seed": cfg.seed,
            "dt": cfg.dt,
            "n_points": mu.grid.n_points,
            "escaped": int(s["escaped"].sum()),
        },
    )


def pairing_with(fn: GridFunction, direction: GridFunction) -> float:
    return l2_inner(fn, direction)
