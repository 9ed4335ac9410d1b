"""Coefficient models b(x, m), sigma(m), a = sigma^2/2 built from a small catalog.

The density enters only through scalar functionals <h, m>, composed with a
bounded smooth "outer" map:

    b(x, m)     = beta(x) * (b0 + b1 * outer_b(scale_b <h_b, m> + offset_b))
    sigma(m)    = s0 + s1 * outer_s(scale_s <h_s, m> + offset_s)

so that db/dm(x, m)(.) = beta(x) * b1 * outer_b'(.) * scale_b * h_b(.) and
dsigma/dm(m)(.) = s1 * outer_s'(.) * scale_s * h_s(.).  Every bound the
well-posedness theory asks for (ellipticity constant, uniform bound L) is a
closed-form function of the catalog parameters.

The solvers exploit the rank-one structure of these functional derivatives:
``CoefficientModel.state`` condenses a density into a handful of scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .grid import (
    Grid1D,
    GridFunction,
    gaussian,
    l2_inner,
    l2_norm,
    sobolev_norm,
)


class ModelConstructionError(ValueError):
    pass


class UnsupportedModelError(RuntimeError):
    """Requested machinery needs a state-invariant model (kernel route)."""


# ---------------------------------------------------------------------------
# scalar catalogs


class _Outer(NamedTuple):
    f: Callable
    d1: Callable
    d2: Callable
    sup0: float
    sup1: float
    sup2: float


def _sech2(u):
    return 1.0 / np.cosh(u) ** 2


OUTERS: dict[str, _Outer] = {
    "tanh": _Outer(
        np.tanh,
        _sech2,
        lambda u: -2.0 * np.tanh(u) * _sech2(u),
        1.0,
        1.0,
        4.0 / (3.0 * math.sqrt(3.0)),
    ),
    "sin": _Outer(np.sin, np.cos, lambda u: -np.sin(u), 1.0, 1.0, 1.0),
    # F(m) = exp(-f(m)^2), the template functional of the L^2 theory
    "expnegsq": _Outer(
        lambda u: np.exp(-(u**2)),
        lambda u: -2.0 * u * np.exp(-(u**2)),
        lambda u: (4.0 * u**2 - 2.0) * np.exp(-(u**2)),
        1.0,
        math.sqrt(2.0) * math.exp(-0.5),
        2.0,
    ),
    # unbounded; only for floor-limited convergence checks
    "linear": _Outer(
        lambda u: np.asarray(u, dtype=float),
        lambda u: np.ones_like(np.asarray(u, dtype=float)),
        lambda u: np.zeros_like(np.asarray(u, dtype=float)),
        math.inf,
        1.0,
        0.0,
    ),
}


def _gauss_k(u, k):
    e = np.exp(-0.5 * u**2)
    return [e, -u * e, (u**2 - 1) * e, (3 * u - u**3) * e][k]


def _tanh_k(u, k):
    t = np.tanh(u)
    s = 1.0 - t**2
    return [t, s, -2 * t * s, (6 * t**2 - 2) * s][k]


def _sin_k(u, k):
    return [np.sin, np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v)][k](u)


def _cos_k(u, k):
    return [np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v), np.sin][k](u)


def _const_k(u, k):
    u = np.asarray(u, dtype=float)
    return np.ones_like(u) if k == 0 else np.zeros_like(u)


def _identity_k(u, k):
    u = np.asarray(u, dtype=float)
    return [u, np.ones_like(u), np.zeros_like(u), np.zeros_like(u)][k]


# base shape, derivative, sup norms of derivatives 0..3
_PROFILES = {
    "const": (_const_k, (1.0, 0.0, 0.0, 0.0)),
    "identity": (_identity_k, (math.inf, 1.0, 0.0, 0.0)),
    "sin": (_sin_k, (1.0, 1.0, 1.0, 1.0)),
    "cos": (_cos_k, (1.0, 1.0, 1.0, 1.0)),
    "tanh": (_tanh_k, (1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0)), 2.0)),
    "gauss": (_gauss_k, (1.0, math.exp(-0.5), 1.0, 1.5)),
}


@dataclass(frozen=True)
class Profile:
    """x-dependence ``amp * base((x - center) / width)`` with closed-form derivatives."""

    kind: str = "const"
    amp: float = 1.0
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in _PROFILES:
            raise ValueError(f"unknown profile {self.kind!r}; choose from {sorted(_PROFILES)}")
        if self.width <= 0:
            raise ValueError("profile width must be positive")

    def __call__(self, x, k: int = 0):
        fn, _ = _PROFILES[self.kind]
        u = (np.asarray(x, dtype=float) - self.center) / self.width
        return self.amp * fn(u, k) / self.width**k

    def sup(self, k: int = 0) -> float:
        return abs(self.amp) * _PROFILES[self.kind][1][k] / self.width**k

    @property
    def is_constant(self) -> bool:
        return self.kind == "const"


@dataclass(frozen=True, eq=False)
class SmoothFunctional:
    """F(m) = outer(scale * <h, m> + offset) with dF/dm(m) = outer'(.) * scale * h."""

    h: GridFunction
    outer: str = "expnegsq"
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.outer not in OUTERS:
            raise ValueError(f"unknown outer map {self.outer!r}; choose from {sorted(OUTERS)}")

    @property
    def grid(self) -> Grid1D:
        return self.h.grid

    def argument(self, m) -> float | np.ndarray:
        """Inner argument; ``m`` may be a GridFunction or an array of slices."""
        if isinstance(m, GridFunction):
            return self.scale * l2_inner(self.h, m) + self.offset
        vals = np.asarray(m, dtype=float)
        return self.scale * (vals @ (self.grid.weights * self.h.values)) + self.offset

    def value(self, m):
        return OUTERS[self.outer].f(self.argument(m))

    def slope(self, m):
        """Scalar c with dF/dm(m) = c * h."""
        return OUTERS[self.outer].d1(self.argument(m)) * self.scale

    def curvature(self, m):
        return OUTERS[self.outer].d2(self.argument(m)) * self.scale**2

    def derivative(self, m: GridFunction) -> GridFunction:
        return GridFunction(self.grid, float(self.slope(m)) * self.h.values)

    @property
    def sup(self) -> float:
        return OUTERS[self.outer].sup0

    @property
    def sup_slope(self) -> float:
        return OUTERS[self.outer].sup1 * abs(self.scale)


# ---------------------------------------------------------------------------
# models


class CoefState(NamedTuple):
    """Scalars that fully describe the coefficients at one density.

    b(x, m) = beta(x) * drift_level;  db/dm(x, m) = beta(x) * drift_slope * h_b
    sigma(m) = sigma;  dsigma/dm(m) = sigma_slope * h_s
    """

    drift_level: float | np.ndarray
    drift_slope: float | np.ndarray
    sigma: float | np.ndarray
    sigma_slope: float | np.ndarray


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    beta: Profile
    b0: float
    b1: float
    b_functional: SmoothFunctional
    s0: float
    s1: float
    s_functional: SmoothFunctional
    gamma: float = 0.0
    lip_bound: float = 0.0
    name: str = ""

    @property
    def grid(self) -> Grid1D:
        return self.b_functional.grid

    @property
    def state_invariant(self) -> bool:
        return self.beta.is_constant

    # -- condensed state ---------------------------------------------------
    def state(self, m) -> CoefState:
        """Coefficient scalars for a density (GridFunction) or a stack of slices."""
        fb, fs = self.b_functional, self.s_functional
        if self.b1 == 0.0:
            z = 0.0 if isinstance(m, GridFunction) else np.zeros(np.shape(m)[:-1])
            level, dlev = self.b0 + z, z
        else:
            level = self.b0 + self.b1 * fb.value(m)
            dlev = self.b1 * fb.slope(m)
        if self.s1 == 0.0:
            z = 0.0 if isinstance(m, GridFunction) else np.zeros(np.shape(m)[:-1])
            sig, dsig = self.s0 + z, z
        else:
            sig = self.s0 + self.s1 * fs.value(m)
            dsig = self.s1 * fs.slope(m)
        return CoefState(level, dlev, sig, dsig)

    @property
    def h_b(self) -> np.ndarray:
        return self.b_functional.h.values

    @property
    def h_sigma(self) -> np.ndarray:
        return self.s_functional.h.values

    # -- pointwise evaluation ------------------------------------------------
    def b(self, x, m):
        return self.beta(x) * self.state(m).drift_level

    def sigma(self, x, m):
        return np.broadcast_to(self.state(m).sigma, np.shape(x)) + 0.0

    def a(self, x, m):
        return 0.5 * self.sigma(x, m) ** 2

    def b_x(self, x, m):
        return self.beta(x, 1) * self.state(m).drift_level

    def b_xx(self, x, m):
        return self.beta(x, 2) * self.state(m).drift_level

    def sigma_x(self, x, m):
        return np.zeros(np.shape(x))

    sigma_xx = sigma_x
    a_xxx = sigma_x

    def db_dm(self, x: float, m: GridFunction) -> GridFunction:
        st = self.state(m)
        return GridFunction(self.grid, float(self.beta(x)) * st.drift_slope * self.h_b)

    def dsigma_dm(self, x: float, m: GridFunction) -> GridFunction:
        return GridFunction(self.grid, self.state(m).sigma_slope * self.h_sigma)

    def da_dm(self, x: float, m: GridFunction) -> GridFunction:
        st = self.state(m)
        return GridFunction(self.grid, st.sigma * st.sigma_slope * self.h_sigma)

    def eval(self, field_name: str, x: float, m: GridFunction) -> float:
        return float({"b": self.b, "sigma": self.sigma, "a": self.a}[field_name](x, m))

    def functional_derivative(self, field_name: str, x: float, m: GridFunction) -> GridFunction:
        return {"b": self.db_dm, "sigma": self.dsigma_dm, "a": self.da_dm}[field_name](x, m)


@dataclass
class ModelSpec:
    """Structured parameters for the catalog (profile and functional pieces)."""

    b0: float = 0.0
    b1: float = 0.0
    b_outer: str = "sin"
    b_h: tuple = ("gauss", 1.0, 0.0, 1.0)  # (kind, amp, center, width)
    b_scale: float = 1.0
    b_offset: float = 0.0
    s0: float = 1.0
    s1: float = 0.0
    s_outer: str = "tanh"
    s_h: tuple = ("gauss", 1.0, 0.0, 1.0)
    s_scale: float = 1.0
    s_offset: float = 0.0
    beta: tuple = ("const", 1.0, 0.0, 1.0)
    name: str = ""


def bump_function(grid: Grid1D, spec: Sequence) -> GridFunction:
    """Test function h in W^{1,2} from ``(kind, amp, center, width)``."""
    kind, amp, center, width = spec
    prof = Profile(kind, amp, center, width)
    if kind not in ("gauss",):
        raise ValueError(f"test functions must decay (kind 'gauss'), got {kind!r}")
    return GridFunction(grid, prof(grid.nodes))


def _bound_constants(beta: Profile, b0, b1, fb: SmoothFunctional, s0, s1, fs: SmoothFunctional):
    """gamma and a uniform bound for the catalog (values, x-derivatives, dm-norms)."""
    s_sup = abs(s1) * fs.sup if s1 != 0 else 0.0
    s_min = s0 - s_sup
    gamma = 0.5 * s_min**2 if s_min > 0 else 0.0
    lvl = abs(b0) + (abs(b1) * fb.sup if b1 != 0 else 0.0)
    hb = sobolev_norm(fb.h, 1)
    hs = sobolev_norm(fs.h, 1)
    cands = []
    for k in range(3):
        cands.append(beta.sup(k) * lvl + beta.sup(k) * abs(b1) * fb.sup_slope * hb)
    cands.append(abs(s0) + s_sup + abs(s1) * fs.sup_slope * hs)
    return gamma, max(cands)


def probe_densities(grid: Grid1D) -> list[GridFunction]:
    """Fixed probe set for ellipticity/Lipschitz sampling."""
    span = grid.x_max - grid.x_min
    c = 0.5 * (grid.x_min + grid.x_max)
    probes = [grid.zeros()]
    for mean, std in [(c, span / 40), (c, span / 16), (c - span / 8, span / 24), (c + span / 6, span / 10)]:
        probes.append(gaussian(grid, mean, std))
    probes.append(0.5 * gaussian(grid, c - span / 10, span / 30) + 0.5 * gaussian(grid, c + span / 10, span / 20))
    probes.append(3.0 * gaussian(grid, c, span / 30) - 1.5 * gaussian(grid, c + span / 12, span / 25))
    # staircase with infinite first moment, restricted to the grid (rough shape)
    x = grid.nodes - grid.x_min
    stair = np.zeros_like(x)
    for n in range(1, 20):
        stair += (math.pi**2 / (6 * n)) * ((x >= n * span / 25) & (x < (n + 1.0 / n) * span / 25))
    probes.append(GridFunction(grid, stair))
    rng = np.random.default_rng(7)
    for _ in range(6):
        mean = rng.uniform(grid.x_min + 0.2 * span, grid.x_max - 0.2 * span)
        probes.append(rng.uniform(-4, 4) * gaussian(grid, mean, rng.uniform(0.02, 0.2) * span))
    return probes


def _build(spec: ModelSpec, grid: Grid1D, beta: Profile) -> CoefficientModel:
    fb = SmoothFunctional(bump_function(grid, spec.b_h), spec.b_outer, spec.b_scale, spec.b_offset)
    fs = SmoothFunctional(bump_function(grid, spec.s_h), spec.s_outer, spec.s_scale, spec.s_offset)
    if spec.s1 != 0 and not math.isfinite(fs.sup):
        raise ModelConstructionError("sigma needs a bounded outer map to stay elliptic")
    gamma, lip = _bound_constants(beta, spec.b0, spec.b1, fb, spec.s0, spec.s1, fs)
    model = CoefficientModel(
        beta=beta,
        b0=spec.b0,
        b1=spec.b1,
        b_functional=fb,
        s0=spec.s0,
        s1=spec.s1,
        s_functional=fs,
        gamma=gamma,
        lip_bound=lip,
        name=spec.name,
    )
    if gamma <= 0:
        raise ModelConstructionError(
            f"ellipticity fails: s0={spec.s0} <= |s1|*sup|outer|={abs(spec.s1) * fs.sup}"
        )
    for m in probe_densities(grid):
        a = float(model.a(0.0, m))
        if a < gamma * (1 - 1e-12):
            raise ModelConstructionError(
                f"ellipticity probe failed: a={a} < gamma={gamma} at density with "
                f"<h_s, m>={l2_inner(fs.h, m):.6g}, |m|={l2_norm(m):.6g}"
            )
    return model


def make_state_invariant_model(spec: ModelSpec, grid: Grid1D) -> CoefficientModel:
    return _build(spec, grid, Profile("const"))


def make_state_dependent_model(spec: ModelSpec, grid: Grid1D) -> CoefficientModel:
    beta = Profile(*spec.beta)
    if not all(math.isfinite(beta.sup(k)) for k in range(3)):
        raise ModelConstructionError("beta must be bounded with bounded derivatives")
    return _build(spec, grid, beta)


# ---------------------------------------------------------------------------
# checks


@dataclass
class ConvergenceReport:
    h_values: np.ndarray
    errors: np.ndarray
    slope: float | None
    floor_limited: bool
    derivative: float = 0.0
    extra: dict = field(default_factory=dict)


def fit_slope(h_values, errors, floor: float = 1e-12):
    """Least-squares log-log slope; ``None`` if the errors sit at the noise floor."""
    h = np.asarray(h_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    if np.all(e <= floor) or np.count_nonzero(e > floor) < 2:
        return None, True
    keep = e > floor
    slope = np.polyfit(np.log(h[keep]), np.log(e[keep]), 1)[0]
    return float(slope), False


def functional_derivative_check(
    model: CoefficientModel,
    field_name: str,
    x: float,
    m: GridFunction,
    mtilde: GridFunction,
    h_values: Sequence[float],
) -> ConvergenceReport:
    """Forward-quotient error |(f(m + h mt) - f(m))/h - <df/dm, mt>| per h."""
    base = model.eval(field_name, x, m)
    deriv = l2_inner(model.functional_derivative(field_name, x, m), mtilde)
    errs = np.array(
        [abs((model.eval(field_name, x, m + h * mtilde) - base) / h - deriv) for h in h_values]
    )
    # relative floor: roundoff in the quotient is ~eps*|f|/h
    floor = 1e-10 * max(1.0, abs(base))
    slope, floored = fit_slope(h_values, errs, floor)
    return ConvergenceReport(np.asarray(h_values, float), errs, slope, floored, deriv)


def ellipticity_margin(model: CoefficientModel, probes=None) -> float:
    """min over probes of a(x, m) - gamma (sigma is state-invariant in the catalog)."""
    probes = probe_densities(model.grid) if probes is None else probes
    return min(float(model.a(0.0, m)) for m in probes) - model.gamma


def lipschitz_ratios(model: CoefficientModel, field_name: str, probes=None, xs=None) -> np.ndarray:
    """|f(x', m') - f(x, m)| / (|x'-x| + |m'-m|_L2) over probe pairs."""
    probes = probe_densities(model.grid) if probes is None else probes
    xs = np.linspace(-2.0, 2.0, 5) if xs is None else xs
    out = []
    for i, m in enumerate(probes):
        for m2 in probes[i + 1 :]:
            for x in xs:
                for x2 in xs:
                    d = abs(x2 - x) + l2_norm(m2 - m)
                    if d > 0:
                        out.append(abs(model.eval(field_name, x2, m2) - model.eval(field_name, x, m)) / d)
    return np.asarray(out)
