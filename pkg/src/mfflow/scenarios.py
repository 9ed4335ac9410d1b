"""Named problem instances and the sectioned key-value config format.

A scenario is a dict of sections (``grid``, ``time``, ``model``, ``mu``,
``phi``, ``mc``, ``check``) of string values.  Catalog entries and config
files share this schema; a config file may start from a catalog entry via
``[scenario] base = NAME`` and override individual keys.

Density and direction expressions are sums of Gaussian terms, for example
``0.5*N(-1, 0.5) + 0.5*N(1, 0.7)``; ``dN(m, s)`` is the x-derivative of the
Gaussian density.  Profiles are written ``kind amp center width``.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import polygamma, zeta

from .coefficients import (
    ModelSpec,
    Profile,
    SmoothFunctional,
    bump_function,
    make_state_dependent_model,
    make_state_invariant_model,
)
from .grid import Grid1D, GridFunction
from .value import TerminalFunctional, ValueConfig


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


SECTIONS = ("scenario", "grid", "time", "model", "mu", "phi", "mc", "check")

CATALOG: dict[str, dict[str, dict[str, str]]] = {
    "pure-diffusion": {
        "grid": {"x_min": "-8", "x_max": "8", "n_points": "801"},
        "time": {"t": "0", "T": "1", "n_steps": "1000"},
        "model": {"kind": "state_invariant", "b0": "0", "b1": "0", "s0": "1.4142135623730951", "s1": "0"},
        "mu": {"density": "1*N(0, 0.5)"},
        "phi": {"g": "sin 1 0 1", "outer": "none"},
        "mc": {"n_paths": "10000", "seed": "20240601"},
        "check": {"x0": "0.3", "directions": "1*N(0.5, 0.8); 1*N(-1, 1) - 1*N(1, 1); 1*dN(0, 1.2)"},
    },
    "state-invariant-ref": {
        "grid": {"x_min": "-8", "x_max": "8", "n_points": "401"},
        "time": {"t": "0", "T": "1", "n_steps": "1000"},
        "model": {
            "kind": "state_invariant",
            "b0": "0",
            "b1": "0.5",
            "b_outer": "sin",
            "b_h": "gauss 1.5 0.5 1",
            "s0": "1",
            "s1": "0.3",
            "s_outer": "tanh",
            "s_h": "gauss 1 -0.5 1.5",
        },
        "mu": {"density": "1*N(0, 0.7)"},
        "phi": {"g": "sin 1 0 1", "outer": "expnegsq", "h": "gauss 0.8 0 1", "scale": "1", "offset": "0", "c": "0"},
        "mc": {"n_paths": "10000", "seed": "20240601"},
        "check": {"x0": "0.3", "directions": "1*N(0.5, 0.8); 1*N(-1, 1) - 1*N(1, 1); 1*dN(0, 1.2)"},
    },
    "state-dep-drift": {
        "grid": {"x_min": "-8", "x_max": "8", "n_points": "401"},
        "time": {"t": "0", "T": "1", "n_steps": "1000"},
        "model": {
            "kind": "state_dependent",
            "beta": "tanh -1 0 1",
            "b0": "0.5",
            "b1": "0.3",
            "b_outer": "sin",
            "b_h": "gauss 1.5 0.5 1",
            "s0": "1",
            "s1": "0.3",
            "s_outer": "tanh",
            "s_h": "gauss 1 -0.5 1.5",
        },
        "mu": {"density": "1*N(0, 0.7)"},
        "phi": {"g": "sin 1 0 1", "outer": "expnegsq", "h": "gauss 0.8 0 1"},
        "mc": {"n_paths": "10000", "seed": "20240601"},
        "check": {"x0": "0.3", "directions": "1*N(0.5, 0.8); 1*N(-1, 1) - 1*N(1, 1); 1*dN(0, 1.2)"},
    },
    "constant-phi": {
        "grid": {"x_min": "-8", "x_max": "8", "n_points": "201"},
        "time": {"t": "0", "T": "1", "n_steps": "200"},
        "model": {
            "kind": "state_invariant",
            "b0": "0",
            "b1": "0.5",
            "b_outer": "sin",
            "b_h": "gauss 1.5 0.5 1",
            "s0": "1",
            "s1": "0.3",
            "s_outer": "tanh",
            "s_h": "gauss 1 -0.5 1.5",
        },
        "mu": {"density": "1*N(0, 0.7)"},
        "phi": {"g": "const 0 0 1", "outer": "none", "c": "2.5"},
        "mc": {"n_paths": "2000", "seed": "20240601"},
        "check": {"x0": "0.3", "directions": "1*N(0.5, 0.8)"},
    },
}


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    grid: Grid1D
    t: float
    T: float
    n_steps: int
    model: object
    mu: GridFunction
    Phi: TerminalFunctional
    x0: float
    n_paths: int
    seed: int
    directions: tuple
    sections: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return (self.T - self.t) / self.n_steps

    def value_config(self, **kw) -> ValueConfig:
        base = dict(n_paths=self.n_paths, seed=self.seed, dt=self.dt)
        base.update(kw)
        return ValueConfig(**base)

    def check(self, key: str, default=None):
        return self.sections.get("check", {}).get(key, default)


# ---------------------------------------------------------------------------
# parsing helpers

_TERM = re.compile(
    r"\s*([+-])?\s*([0-9.eE+-]*)\s*\*?\s*(dN|N)\(\s*([-0-9.eE+]+)\s*,\s*([-0-9.eE+]+)\s*\)\s*"
)


def parse_density(expr: str, grid: Grid1D) -> GridFunction:
    """Sum of weighted Gaussian densities / Gaussian-derivative terms on a grid."""
    pos, total = 0, np.zeros(grid.n_points)
    x = grid.nodes
    expr = expr.strip()
    if not expr:
        raise ConfigError("empty density expression")
    while pos < len(expr):
        m = _TERM.match(expr, pos)
        if not m or m.end() == pos:
            raise ConfigError(f"cannot parse density expression near {expr[pos:]!r}")
        sign = -1.0 if m.group(1) == "-" else 1.0
        coef = float(m.group(2)) if m.group(2) not in ("", None) else 1.0
        mean, std = float(m.group(4)), float(m.group(5))
        if std <= 0:
            raise ConfigError(f"non-positive std in {m.group(0)!r}")
        u = (x - mean) / std
        g = np.exp(-0.5 * u**2) / (std * math.sqrt(2 * math.pi))
        if m.group(3) == "dN":
            g = -u / std * g
        total += sign * coef * g
        pos = m.end()
    return GridFunction(grid, total)


def _profile(text: str) -> tuple:
    parts = text.split()
    if len(parts) != 4:
        raise ConfigError(f"profile needs 'kind amp center width', got {text!r}")
    try:
        return (parts[0], float(parts[1]), float(parts[2]), float(parts[3]))
    except ValueError as exc:
        raise ConfigError(f"bad number in profile {text!r}") from exc


def _get(sec: dict, key: str, conv=float, default=None, where=""):
    if key not in sec:
        if default is None:
            raise ConfigError(f"missing key {key!r} in [{where}]")
        return default
    try:
        return conv(sec[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} in [{where}]: {sec[key]!r}") from exc


def merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in over.items():
        out.setdefault(sec, {}).update(vals)
    return out


# ---------------------------------------------------------------------------
# building


def build(name_or_sections, **overrides) -> Scenario:
    """Scenario from a catalog name or a sections dict; ``overrides`` are {section: {key: value}}."""
    if isinstance(name_or_sections, str):
        if name_or_sections not in CATALOG:
            raise ConfigError(f"unknown scenario {name_or_sections!r}; catalog: {sorted(CATALOG)}")
        secs = merge(CATALOG[name_or_sections], {"scenario": {"name": name_or_sections}})
    else:
        secs = dict(name_or_sections)
        base = secs.get("scenario", {}).get("base")
        if base:
            if base not in CATALOG:
                raise ConfigError(f"unknown base scenario {base!r}")
            secs = merge(CATALOG[base], secs)
    secs = merge(secs, {k: {kk: str(vv) for kk, vv in v.items()} for k, v in overrides.items()})
    return _from_sections(secs)


def _from_sections(secs: dict) -> Scenario:
    name = secs.get("scenario", {}).get("name", secs.get("scenario", {}).get("base", "custom"))
    g = secs.get("grid", {})
    grid = Grid1D(_get(g, "x_min", where="grid"), _get(g, "x_max", where="grid"), _get(g, "n_points", int, where="grid"))
    tm = secs.get("time", {})
    t, T = _get(tm, "t", where="time"), _get(tm, "T", where="time")
    n_steps = _get(tm, "n_steps", int, where="time")
    if not T > t or n_steps < 1:
        raise ConfigError("time section needs T > t and n_steps >= 1")

    md = secs.get("model", {})
    spec = ModelSpec(
        b0=_get(md, "b0", default=0.0, where="model"),
        b1=_get(md, "b1", default=0.0, where="model"),
        b_outer=md.get("b_outer", "sin"),
        b_h=_profile(md.get("b_h", "gauss 1 0 1")),
        b_scale=_get(md, "b_scale", default=1.0, where="model"),
        b_offset=_get(md, "b_offset", default=0.0, where="model"),
        s0=_get(md, "s0", default=1.0, where="model"),
        s1=_get(md, "s1", default=0.0, where="model"),
        s_outer=md.get("s_outer", "tanh"),
        s_h=_profile(md.get("s_h", "gauss 1 0 1")),
        s_scale=_get(md, "s_scale", default=1.0, where="model"),
        s_offset=_get(md, "s_offset", default=0.0, where="model"),
        beta=_profile(md.get("beta", "const 1 0 1")),
        name=name,
    )
    kind = md.get("kind", "state_invariant")
    try:
        if kind == "state_invariant":
            model = make_state_invariant_model(spec, grid)
        elif kind == "state_dependent":
            model = make_state_dependent_model(spec, grid)
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model construction failed: {exc}") from exc

    mu_sec = secs.get("mu", {})
    if "staircase" in mu_sec:
        mu = staircase_grid_function(grid, int(mu_sec["staircase"]))
    else:
        mu = parse_density(mu_sec.get("density", "1*N(0, 1)"), grid)
    edge = max(abs(mu.values[0]), abs(mu.values[-1]))
    if edge >= 1e-10:
        raise ConfigError(f"initial density is {edge:.3g} at the domain edge (needs < 1e-10)")

    ph = secs.get("phi", {})
    try:
        gprof = Profile(*_profile(ph.get("g", "const 1 0 1")))
        outer = ph.get("outer", "none")
        F = None
        if outer != "none":
            F = SmoothFunctional(
                bump_function(grid, _profile(ph.get("h", "gauss 1 0 1"))),
                outer,
                _get(ph, "scale", default=1.0, where="phi"),
                _get(ph, "offset", default=0.0, where="phi"),
            )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"terminal functional: {exc}") from exc
    Phi = TerminalFunctional(gprof, F, _get(ph, "c", default=0.0, where="phi"))

    mc = secs.get("mc", {})
    ck = secs.get("check", {})
    dirs = tuple(
        parse_density(d, grid) for d in ck.get("directions", "").split(";") if d.strip()
    )
    return Scenario(
        name=name,
        grid=grid,
        t=t,
        T=T,
        n_steps=n_steps,
        model=model,
        mu=mu,
        Phi=Phi,
        x0=_get(ck, "x0", default=0.0, where="check"),
        n_paths=_get(mc, "n_paths", int, default=10000, where="mc"),
        seed=_get(mc, "seed", int, default=0, where="mc"),
        directions=dirs,
        sections=secs,
    )


def read_config(path) -> dict:
    """Sections dict from a config file (keys are case-sensitive)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}; allowed {SECTIONS}")
    return {s: dict(cp[s]) for s in cp.sections()}


def load(path, **overrides) -> Scenario:
    return build(read_config(path), **overrides)


# ---------------------------------------------------------------------------
# square-integrable density with infinite first moment


STAIR_COEF = math.pi**2 / 6


def staircase_moments(n_terms: int) -> tuple[float, float, float]:
    """Partial sums for rho = sum_n c/n 1_[n, n+1/n), c = pi^2/6.

    Returns (mass, squared L2 norm, first moment) of the first ``n_terms``
    steps, each in closed form per step.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    n = np.arange(1, n_terms + 1, dtype=float)
    c = STAIR_COEF
    # sum smallest terms first to limit rounding
    mass = c * np.sum((1.0 / n**2)[::-1])
    l2 = c**2 * np.sum((1.0 / n**3)[::-1])
    first = c * np.sum((1.0 / n + 0.5 / n**3)[::-1])
    return float(mass), float(l2), float(first)


def staircase_tails(n_terms: int) -> tuple[float, float]:
    """Exact remainders of the mass and L2 series beyond ``n_terms``."""
    c = STAIR_COEF
    return float(c * polygamma(1, n_terms + 1)), float(c**2 * zeta(3, n_terms + 1))


def staircase_grid_function(grid: Grid1D, n_terms: int) -> GridFunction:
    """Nodal values whose trapezoid integrals reproduce the step masses on the grid."""
    c = STAIR_COEF
    x = grid.nodes

    def antider(z):
        # cumulative mass of rho on (-inf, z] for the first n_terms steps
        n = np.arange(1, n_terms + 1, dtype=float)
        lo, hi = n, n + 1.0 / n
        return np.sum(c / n * np.clip(z[:, None] - lo, 0.0, hi - lo), axis=1)

    edges = np.concatenate([[x[0]], 0.5 * (x[:-1] + x[1:]), [x[-1]]])
    cell = np.diff(antider(edges))
    return GridFunction(grid, cell / grid.weights)
