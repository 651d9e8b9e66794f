"""Vertical derivatives, representation formulas and spectral-gap checks.

The vertical derivative of a random variable ``X(A)`` at a vertex ``x`` is
``D_x X = X(A) - X(A^(x))`` where ``A^(x)`` redraws the d forward edges at
``x`` and keeps everything else.  For the linear functionals

    F1(A) = sum grad phi_i . g,        F2(A) = sum grad sigma_ijk . g,

the derivative has a closed form in terms of auxiliary solutions (see
:func:`representation_F1` and :func:`representation_F2`), which gives an exact
identity coupling the whole solve chain.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .calculus import forward_gradient
from .corrector import (
    compute_bundle,
    compute_corrector,
    sigma_component,
    solve_aux,
    unit_field,
    w_source,
)
from .env import Environment, EnvironmentSpec, replace_vertex, resample_vertex, sample_environment, stream
from .errors import ConfigurationError, ContractError

__all__ = [
    "Observable",
    "vertical_derivative",
    "changed_vertex",
    "representation_F1",
    "representation_F2",
    "representation_check_F1",
    "representation_check_F2",
    "spectral_gap_check",
    "SpectralGapReport",
]

MAX_CONFIGURATIONS = 2 ** 20


@dataclass
class Observable:
    """Scalar random variable ``X(A)``.

    ``kind`` is ``"F1"`` (needs ``i``, ``g``), ``"F2"`` (needs ``i, j, k, g``),
    ``"edge"`` (value of the edge ``(i, x...)`` given in ``edge``) or
    ``"custom"`` with a callable ``func(env) -> float``.
    """

    kind: str
    i: int = 0
    j: int = 0
    k: int = 1
    g: np.ndarray | None = None
    edge: tuple | None = None
    func: Callable | None = None
    tol: float = 1e-10
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind in ("F1", "F2"):
            if self.g is None:
                raise ConfigurationError(f"{self.kind} observable needs a test field g")
            if not np.isfinite(self.g).all():
                raise ConfigurationError("test field g must be finite")
        elif self.kind == "edge":
            if self.edge is None:
                raise ConfigurationError("edge observable needs an edge (i, x...)")
        elif self.kind == "custom":
            if self.func is None:
                raise ConfigurationError("custom observable needs a callable")
        else:
            raise ConfigurationError(f"unknown observable kind {self.kind!r}")

    def __call__(self, env: Environment) -> float:
        key = env.a.tobytes()
        if key in self._cache:
            return self._cache[key]
        if self.kind == "F1":
            b = compute_corrector(env, self.i, self.tol)
            val = float(np.sum(b.grad_phi * self.g))
        elif self.kind == "F2":
            if env.d < 2:
                val = 0.0
            else:
                b = compute_bundle(env, self.i, self.tol)
                val = float(np.sum(forward_gradient(sigma_component(b, self.j, self.k)) * self.g))
        elif self.kind == "edge":
            val = float(env.a[tuple(self.edge)])
        else:
            val = float(self.func(env))
        if len(self._cache) < 4096:
            self._cache[key] = val
        return val


def vertical_derivative(obs: Observable, env: Environment, x, rng_stream: int = 0) -> float:
    """``X(A) - X(A^(x))`` with the resample drawn from ``rng_stream``."""
    env_x = resample_vertex(env, x, rng_stream)
    if np.array_equal(env_x.a, env.a):
        return 0.0
    return obs(env) - obs(env_x)


def changed_vertex(env: Environment, env_x: Environment):
    """The single vertex whose forward edges differ, or None if identical."""
    diff = np.any(env.a != env_x.a, axis=0)
    idx = np.argwhere(diff)
    if len(idx) == 0:
        return None
    if len(idx) > 1:
        raise ContractError("environments differ at more than one vertex")
    return tuple(int(c) for c in idx[0])


def _edge_factor(env, env_x, i, tol):
    """``(A - A') (grad phi_i(A') + e_i)`` as a vector field (supported at one vertex)."""
    bx = compute_corrector(env_x, i, tol)
    return (env.a - env_x.a) * (bx.grad_phi + unit_field(env.d, env.spec.shape, i)), bx


def representation_F1(env, env_x, i, g, tol=1e-10):
    """Right-hand side of the F1 derivative formula."""
    factor, _ = _edge_factor(env, env_x, i, tol)
    aux = solve_aux(env, g, "u", tol)
    return float(np.sum(factor * forward_gradient(aux.u))), aux


def representation_F2(env, env_x, i, j, k, g, tol=1e-10):
    """Right-hand side of the F2 derivative formula.

    With ``w`` solving ``-div*(A grad w) = div*(A (div*_k v e_j - div*_j v e_k))``
    the derivative pairs the edge factor with ``div*_j v e_k - div*_k v e_j - grad w``.
    """
    factor, _ = _edge_factor(env, env_x, i, tol)
    aux = solve_aux(env, g, ["v", ("w", j, k)], tol)
    h = -w_source(aux.v, j, k) - forward_gradient(aux.w[(j, k)])
    return float(np.sum(factor * h)), aux


def _gap(direct, rep, scale):
    den = max(abs(direct), abs(rep), scale)
    return abs(direct - rep) / den if den > 0 else 0.0


def representation_check_F1(env, env_x, i, g, tol=1e-10, factor=50.0) -> dict:
    """Compare ``F1(A) - F1(A^(x))`` with the representation formula.

    The relative gap is ``|direct - rep| / max(|direct|, |rep|, S)`` with
    ``S = sum |g . (grad phi_i + e_i)|``, the size of ``F1 + sum g_i`` without
    cancellations.  Solver errors are relative to that size, so the floor keeps
    the comparison meaningful when x is far from the support of ``g`` and the
    derivative itself is tiny.
    """
    obs = Observable("F1", i=i, g=g, tol=tol)
    f_a, f_ax = obs(env), obs(env_x)
    direct = f_a - f_ax
    rep, _ = representation_F1(env, env_x, i, g, tol)
    b = compute_corrector(env, i, tol)
    scale = float(np.abs(g * (b.grad_phi + unit_field(env.d, env.spec.shape, i))).sum())
    gap = _gap(direct, rep, scale)
    return dict(probe="representation_F1", vertex=changed_vertex(env, env_x), direct=direct, rep=rep,
                F=f_a, gap=gap, threshold=factor * tol, passed=bool(gap <= factor * tol))


def representation_check_F2(env, env_x, i, j, k, g, tol=1e-10, factor=100.0) -> dict:
    """As :func:`representation_check_F1` for ``F2 = sum grad sigma_ijk . g``.

    The floor of the relative gap is ``sum |g . grad sigma_ijk|``.
    """
    if env.d < 2:
        raise ConfigurationError("F2 needs d >= 2")
    obs = Observable("F2", i=i, j=j, k=k, g=g, tol=tol)
    f_a, f_ax = obs(env), obs(env_x)
    direct = f_a - f_ax
    rep, _ = representation_F2(env, env_x, i, j, k, g, tol)
    b = compute_bundle(env, i, tol)
    scale = float(np.abs(g * forward_gradient(sigma_component(b, j, k))).sum())
    gap = _gap(direct, rep, scale)
    return dict(probe="representation_F2", vertex=changed_vertex(env, env_x), direct=direct, rep=rep,
                F=f_a, gap=gap, threshold=factor * tol, passed=bool(gap <= factor * tol))


# --------------------------------------------------------------------------
# Spectral gap
# --------------------------------------------------------------------------

@dataclass
class SpectralGapReport:
    mode: str
    variance: float
    bound: float
    holds: bool
    ratio: float
    p_ratios: dict
    n_configurations: int = 0
    n_samples: int = 0
    variance_se: float = 0.0
    bound_se: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


def _moments_of_sum(moment_rows: np.ndarray, p: int) -> float:
    """``E[(sum_x Y_x)^p]`` for independent ``Y_x`` with raw moments ``moment_rows[x, m] = E[Y_x^m]``."""
    acc = np.zeros(p + 1)
    acc[0] = 1.0
    for row in moment_rows:
        new = np.zeros(p + 1)
        for kk in range(p + 1):
            new[kk] = sum(special.comb(kk, m, exact=True) * acc[m] * row[kk - m] for m in range(kk + 1))
        acc = new
    return float(acc[p])


def spectral_gap_check(obs: Observable, spec: EnvironmentSpec, mode: str = "exhaustive",
                       n_samples: int = 200, n_inner: int = 2, p_list=(1, 2, 3)) -> SpectralGapReport:
    """Check ``Var X <= 1/2 E[sum_x |D_x X|^2]`` and report the higher-moment ratios.

    ``mode="exhaustive"`` integrates exactly over a finite-support law (all
    configurations and all resampled values).  ``mode="monte-carlo"`` draws
    ``n_samples`` environments and ``n_inner`` resamples per vertex; the
    inequality is then judged with a two-standard-error allowance.

    The ratio reported for each ``p`` is
    ``E[|X - EX|^(2p)]^(1/p) / (4 p^2 E[(sum_x |D_x X|^2)^p]^(1/p))``.
    """
    if mode == "exhaustive":
        return _spectral_gap_exhaustive(obs, spec, p_list)
    if mode in ("monte-carlo", "mc"):
        return _spectral_gap_mc(obs, spec, n_samples, n_inner, p_list)
    raise ConfigurationError(f"unknown spectral-gap mode {mode!r}")


def _spectral_gap_exhaustive(obs, spec, p_list):
    atoms = spec.atoms()
    if atoms is None:
        raise ContractError("exhaustive mode needs a finite-support distribution")
    values = np.array([v for v, _ in atoms])
    probs = np.array([w for _, w in atoms])
    n_edges = spec.n_edges
    n_conf = len(values) ** n_edges
    if n_conf > MAX_CONFIGURATIONS:
        raise ContractError(f"{n_conf} configurations exceed the exhaustive limit {MAX_CONFIGURATIONS}")
    d, shape = spec.d, spec.shape
    vertices = list(itertools.product(*[range(spec.L)] * d))
    local = list(itertools.product(range(len(values)), repeat=d))
    local_p = [math.prod(probs[list(c)]) for c in local]
    pmax = max(p_list) if p_list else 1

    xs, ws, dmoments = [], [], []
    for conf in itertools.product(range(len(values)), repeat=n_edges):
        w = math.prod(probs[list(conf)])
        if w == 0:
            continue
        a = values[list(conf)].reshape((d,) + shape)
        env = Environment(spec, a)
        X = obs(env)
        rows = []
        for x in vertices:
            row = np.zeros(2 * pmax + 1)
            for c, pc in zip(local, local_p):
                envx = replace_vertex(env, x, values[list(c)])
                D2 = (X - obs(envx)) ** 2
                row += pc * D2 ** np.arange(2 * pmax + 1)
            rows.append(row)
        xs.append(X)
        ws.append(w)
        dmoments.append(np.array(rows))
    xs = np.array(xs)
    ws = np.array(ws)
    mean = math.fsum(ws * xs)
    var = math.fsum(ws * (xs - mean) ** 2)
    bound = 0.5 * math.fsum(w * math.fsum(rows[:, 1]) for w, rows in zip(ws, dmoments))
    p_ratios = {}
    for p in p_list:
        lhs = math.fsum(ws * np.abs(xs - mean) ** (2 * p)) ** (1 / p)
        rhs = math.fsum(w * _moments_of_sum(rows[:, :p + 1], p) for w, rows in zip(ws, dmoments)) ** (1 / p)
        p_ratios[p] = lhs / (4 * p * p * rhs) if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return SpectralGapReport(mode="exhaustive", variance=var, bound=bound, holds=bool(var <= bound),
                             ratio=var / bound if bound > 0 else (0.0 if var == 0 else math.inf),
                             p_ratios=p_ratios, n_configurations=len(xs))


def _spectral_gap_mc(obs, spec, n_samples, n_inner, p_list):
    if n_samples < 2:
        raise ConfigurationError("Monte Carlo mode needs at least two samples")
    vertices = list(itertools.product(*[range(spec.L)] * spec.d))
    xs, sums = [], []
    for s in range(n_samples):
        seed = int(stream(spec.seed, "sg-sample", s).integers(2 ** 63))
        env = sample_environment(spec.with_seed(seed))
        X = obs(env)
        per_inner = np.zeros(n_inner)
        for x in vertices:
            for r in range(n_inner):
                envx = resample_vertex(env, x, r)
                per_inner[r] += (X - obs(envx)) ** 2
        xs.append(X)
        sums.append(per_inner)
    xs = np.array(xs)
    sums = np.array(sums)
    n = len(xs)
    var = xs.var(ddof=1)
    # delta-method standard error of the sample variance
    var_se = math.sqrt(max(np.var((xs - xs.mean()) ** 2, ddof=1), 0.0) / n)
    per_sample = 0.5 * sums.mean(axis=1)
    bound = per_sample.mean()
    bound_se = per_sample.std(ddof=1) / math.sqrt(n)
    p_ratios = {}
    for p in p_list:
        lhs = np.mean(np.abs(xs - xs.mean()) ** (2 * p)) ** (1 / p)
        rhs = np.mean(sums[:, 0] ** p) ** (1 / p)
        p_ratios[p] = float(lhs / (4 * p * p * rhs)) if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    holds = var <= bound + 2 * math.hypot(var_se, bound_se)
    return SpectralGapReport(mode="monte-carlo", variance=float(var), bound=float(bound), holds=bool(holds),
                             ratio=float(var / bound) if bound > 0 else (0.0 if var == 0 else math.inf),
                             p_ratios=p_ratios, n_samples=n, variance_se=var_se, bound_se=float(bound_se))
