"""I.i.d. conductance environments on the periodic box Z_L^d.

Conductances are stored as an array ``a`` of shape ``(d, L, ..., L)`` where
``a[i][x]`` is the conductance of the edge ``{x, x + e_i}``.  Flattening in C
order gives the edge index ``i * L**d + vertex_index``.

All randomness comes from counter-based Philox streams keyed by
``(seed, purpose tag, index...)``, so any draw is a pure function of its key
and position and does not depend on how work is split across workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError

__all__ = [
    "Constant",
    "Uniform",
    "Bernoulli",
    "ParetoSymmetric",
    "LogNormal",
    "EnvironmentSpec",
    "Environment",
    "MomentReport",
    "stream",
    "open_uniforms",
    "sample_environment",
    "truncate",
    "resample_vertex",
    "moment_report",
    "distribution_from_dict",
    "save_environment",
    "load_container",
]


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------

def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return an independent Philox generator keyed by ``(seed, tag, index...)``."""
    text = "|".join([str(int(seed)), tag, *(str(int(k)) for k in index)])
    key = int.from_bytes(hashlib.blake2b(text.encode(), digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def open_uniforms(gen: np.random.Generator, n: int) -> np.ndarray:
    """Uniforms on the open interval (0, 1): the 53-bit grid shifted by half a step."""
    return gen.random(n) + 2.0 ** -54


# --------------------------------------------------------------------------
# Distributions
# --------------------------------------------------------------------------
# Each law is described through its quantile function, so sampling is the
# transform of open uniforms and truncated moments are 1D integrals over (0,1).

@dataclass(frozen=True)
class Constant:
    value: float = 1.0

    tag = 0
    name = "constant"

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigurationError("constant conductance must be positive")

    def quantile(self, u):
        return np.full(np.shape(u), float(self.value))

    def moment(self, s: float) -> float:
        return float(self.value) ** s

    @property
    def tail_index(self) -> float:
        return math.inf

    def atoms(self):
        return [(float(self.value), 1.0)]


@dataclass(frozen=True)
class Uniform:
    """Uniform law on [lower, 1]."""

    lower: float = 0.5

    tag = 1
    name = "uniform"

    def __post_init__(self):
        if not 0 < self.lower <= 1:
            raise ConfigurationError("uniform lower bound must lie in (0, 1]")

    def quantile(self, u):
        return self.lower + (1.0 - self.lower) * np.asarray(u, dtype=float)

    def moment(self, s: float) -> float:
        lam = float(self.lower)
        if lam == 1.0:
            return 1.0
        if s == -1:
            return -math.log(lam) / (1.0 - lam)
        return (1.0 - lam ** (s + 1)) / ((s + 1) * (1.0 - lam))

    @property
    def tail_index(self) -> float:
        return math.inf

    def atoms(self):
        return None


@dataclass(frozen=True)
class Bernoulli:
    """Two-point law: ``hi`` with probability ``p``, ``lo`` otherwise."""

    p: float = 0.5
    lo: float = 1.0
    hi: float = 2.0

    tag = 2
    name = "bernoulli"

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ConfigurationError("bernoulli p must lie in [0, 1]")
        if not (self.lo > 0 and self.hi > 0):
            raise ConfigurationError("bernoulli values must be positive")

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u < 1.0 - self.p, float(self.lo), float(self.hi))

    def moment(self, s: float) -> float:
        return (1.0 - self.p) * self.lo ** s + self.p * self.hi ** s

    @property
    def tail_index(self) -> float:
        return math.inf

    def atoms(self):
        return [(float(self.lo), 1.0 - self.p), (float(self.hi), float(self.p))]


@dataclass(frozen=True)
class ParetoSymmetric:
    """Symmetric Pareto law with tail index ``gamma_star`` for both a and 1/a.

    With probability 1/2, ``a = U**(-1/gamma_star)`` (U uniform), otherwise the
    reciprocal. Hence ``P(a > t) = t**(-gamma_star) / 2`` for ``t >= 1`` and
    ``E[a**s] = gamma_star / 2 * (1/(gamma_star - s) + 1/(gamma_star + s))``,
    finite iff ``|s| < gamma_star``.
    """

    gamma_star: float = 8.0

    tag = 3
    name = "pareto"

    def __post_init__(self):
        if not self.gamma_star > 0:
            raise ConfigurationError("pareto tail index gamma_star must be positive")

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        g = float(self.gamma_star)
        low = np.power(2.0 * np.minimum(u, 0.5), 1.0 / g)
        high = np.power(2.0 * (1.0 - np.maximum(u, 0.5)), -1.0 / g)
        return np.where(u < 0.5, low, high)

    def moment(self, s: float) -> float:
        g = float(self.gamma_star)
        if abs(s) >= g:
            return math.inf
        return 0.5 * g / (g - s) + 0.5 * g / (g + s)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        g = float(self.gamma_star)
        with np.errstate(divide="ignore"):
            return np.where(t < 1.0, 0.5 * np.power(t, g), 1.0 - 0.5 * np.power(t, -g))

    @property
    def tail_index(self) -> float:
        return float(self.gamma_star)

    def atoms(self):
        return None


@dataclass(frozen=True)
class LogNormal:
    """``a = exp(sigma * Z)`` with Z standard normal."""

    sigma: float = 1.0

    tag = 4
    name = "lognormal"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigurationError("lognormal sigma must be non-negative")

    def quantile(self, u):
        return np.exp(self.sigma * special.ndtri(np.asarray(u, dtype=float)))

    def moment(self, s: float) -> float:
        return math.exp(0.5 * (s * self.sigma) ** 2)

    @property
    def tail_index(self) -> float:
        return math.inf

    def atoms(self):
        return None


_DISTRIBUTIONS = {cls.name: cls for cls in (Constant, Uniform, Bernoulli, ParetoSymmetric, LogNormal)}
_BY_TAG = {cls.tag: cls for cls in _DISTRIBUTIONS.values()}


def distribution_from_dict(data: dict):
    """Build a distribution from ``{"kind": name, **params}``."""
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in _DISTRIBUTIONS:
        raise ConfigurationError(f"unknown distribution kind {kind!r}; expected one of {sorted(_DISTRIBUTIONS)}")
    try:
        return _DISTRIBUTIONS[kind](**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for distribution {kind!r}: {exc}") from None


def _distribution_to_dict(dist) -> dict:
    return {"kind": dist.name, **dataclasses.asdict(dist)}


# --------------------------------------------------------------------------
# Spec and environment
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvironmentSpec:
    d: int
    L: int
    distribution: object = field(default_factory=Constant)
    seed: int = 0
    truncation: float | None = None

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigurationError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.L < 4 or self.L & (self.L - 1):
            raise ConfigurationError(f"box side must be a power of two >= 4, got {self.L}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.truncation is not None and not self.truncation >= 1:
            raise ConfigurationError(f"truncation M must be >= 1, got {self.truncation}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    @property
    def n_vertices(self) -> int:
        return self.L ** self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.L ** self.d

    @property
    def tail_index(self) -> float:
        if self.truncation is not None:
            return math.inf
        return self.distribution.tail_index

    def with_seed(self, seed: int) -> "EnvironmentSpec":
        return dataclasses.replace(self, seed=int(seed))

    def sample_values(self, u) -> np.ndarray:
        a = self.distribution.quantile(u)
        if self.truncation is not None:
            a = np.clip(a, 1.0 / self.truncation, self.truncation)
        return a

    def atoms(self):
        """Finite support as ``[(value, prob), ...]`` (after truncation), or None."""
        atoms = self.distribution.atoms()
        if atoms is None:
            return None
        merged: dict[float, float] = {}
        for v, w in atoms:
            if w <= 0:
                continue
            if self.truncation is not None:
                v = min(max(v, 1.0 / self.truncation), self.truncation)
            merged[v] = merged.get(v, 0.0) + w
        return sorted(merged.items())

    def moment(self, s: float) -> float:
        """Exact ``E[a**s]`` of the (possibly truncated) law."""
        if self.truncation is None:
            return self.distribution.moment(s)
        atoms = self.atoms()
        if atoms is not None:
            return float(sum(w * v ** s for v, w in atoms))
        # quantile integral; integrand is smooth except at the clamp points
        f = lambda u: float(self.sample_values(np.array([u]))[0]) ** s
        val, _ = integrate.quad(f, 0.0, 1.0, limit=400, epsabs=0, epsrel=1e-11)
        return val

    def to_dict(self) -> dict:
        return {
            "dimension": self.d,
            "side": self.L,
            "distribution": _distribution_to_dict(self.distribution),
            "seed": int(self.seed),
            "truncation": self.truncation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentSpec":
        return cls(
            d=int(data["dimension"]),
            L=int(data["side"]),
            distribution=distribution_from_dict(data["distribution"]),
            seed=int(data.get("seed", 0)),
            truncation=data.get("truncation"),
        )


@dataclass(frozen=True, eq=False)
class Environment:
    spec: EnvironmentSpec
    a: np.ndarray

    def __post_init__(self):
        expected = (self.spec.d,) + self.spec.shape
        if self.a.shape != expected:
            raise ConfigurationError(f"conductance array has shape {self.a.shape}, expected {expected}")
        if not np.all(self.a > 0):
            raise ConfigurationError("conductances must be positive")
        self.a.setflags(write=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def L(self) -> int:
        return self.spec.L

    def flat(self) -> np.ndarray:
        """Edges in the canonical order ``i * L**d + vertex_index``."""
        return self.a.reshape(-1)

    def __eq__(self, other):
        return isinstance(other, Environment) and self.spec == other.spec and np.array_equal(self.a, other.a)

    __hash__ = None


def sample_environment(spec: EnvironmentSpec) -> Environment:
    """Draw every edge independently; edge e uses position e of the (seed, "env") stream."""
    u = open_uniforms(stream(spec.seed, "env"), spec.n_edges)
    a = spec.sample_values(u).reshape((spec.d,) + spec.shape)
    return Environment(spec, np.ascontiguousarray(a, dtype=float))


def truncate(env: Environment, M: float) -> Environment:
    """Clamp every conductance to ``[1/M, M]``."""
    if not M >= 1:
        raise ConfigurationError(f"truncation M must be >= 1, got {M}")
    M = float(M)
    old = env.spec.truncation
    new_M = M if old is None else min(old, M)
    a = np.clip(env.a, 1.0 / M, M)
    return Environment(dataclasses.replace(env.spec, truncation=new_M), a)


def _vertex_index(x, L: int, d: int) -> tuple[int, ...]:
    x = tuple(int(c) % L for c in np.atleast_1d(x))
    if len(x) != d:
        raise ConfigurationError(f"vertex {x} does not have {d} coordinates")
    return x


def resample_vertex(env: Environment, x, rng_stream: int) -> Environment:
    """Copy of ``env`` with the d forward edges at vertex x redrawn.

    The new values come from the stream ``(seed, "resample", rng_stream, flat x)``.
    All other edges are bitwise unchanged.
    """
    spec = env.spec
    xi = _vertex_index(x, spec.L, spec.d)
    flat_x = int(np.ravel_multi_index(xi, spec.shape))
    u = open_uniforms(stream(spec.seed, "resample", rng_stream, flat_x), spec.d)
    return replace_vertex(env, xi, spec.sample_values(u))


def replace_vertex(env: Environment, x, values) -> Environment:
    """Copy of ``env`` with the d forward edges at x set to ``values``."""
    xi = _vertex_index(x, env.L, env.d)
    a = env.a.copy()
    for i in range(env.d):
        a[(i,) + xi] = values[i]
    return Environment(env.spec, a)


# --------------------------------------------------------------------------
# Moments
# --------------------------------------------------------------------------

@dataclass
class MomentReport:
    gamma: float
    Gamma_hat: float
    Gamma_se: float
    Lambda_hat: float
    Lambda_se: float
    reliable: bool
    n_samples: int
    Gamma_exact: float | None = None
    Lambda_exact: float | None = None


def _power_mean_with_se(x: np.ndarray, s: float) -> tuple[float, float]:
    """``mean(x**s)**(1/s)`` and its delta-method standard error."""
    y = x ** s
    m = y.mean()
    se_m = y.std(ddof=1) / math.sqrt(len(y)) if len(y) > 1 else math.inf
    val = m ** (1.0 / s)
    return val, abs(val / (s * m)) * se_m


def moment_report(spec: EnvironmentSpec, gamma: float, n_samples: int = 100_000) -> MomentReport:
    """Monte Carlo estimates of Gamma(gamma) and the elliptic ratio Lambda.

    Gamma = E[a^g]^(1/g) + E[a^-g]^(1/g);
    Lambda = E[a^(d+1)]^(1/(d+1)) E[a^-(d+1)]^(1/(d+1)).
    The report is flagged unreliable (with a warning) when the requested
    moment does not exist for the law.
    """
    if not gamma > 0:
        raise ConfigurationError("gamma must be positive")
    a = spec.sample_values(open_uniforms(stream(spec.seed, "moments"), int(n_samples)))
    gp, sp = _power_mean_with_se(a, gamma)
    gm, sm = _power_mean_with_se(a, -gamma)
    k = spec.d + 1
    lp, lsp = _power_mean_with_se(a, k)
    lm, lsm = _power_mean_with_se(a, -k)
    # lm is E[a^-k]^(-1/k); Lambda uses its reciprocal
    Lambda = lp / lm
    Lambda_se = Lambda * math.hypot(lsp / lp, lsm / lm)

    reliable = gamma < spec.tail_index
    if not reliable:
        warnings.warn(
            f"gamma={gamma} >= tail index {spec.tail_index}: E[a^gamma] is infinite, "
            "the Monte Carlo estimate is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    exact_G = exact_L = None
    mp, mm = spec.moment(gamma), spec.moment(-gamma)
    if math.isfinite(mp) and math.isfinite(mm):
        exact_G = mp ** (1 / gamma) + mm ** (1 / gamma)
    kp, km = spec.moment(k), spec.moment(-k)
    if math.isfinite(kp) and math.isfinite(km):
        exact_L = kp ** (1 / k) * km ** (1 / k)
    return MomentReport(
        gamma=gamma,
        Gamma_hat=gp + 1.0 / gm,
        Gamma_se=math.hypot(sp, sm / gm ** 2),
        Lambda_hat=Lambda,
        Lambda_se=Lambda_se,
        reliable=reliable,
        n_samples=int(n_samples),
        Gamma_exact=exact_G,
        Lambda_exact=exact_L,
    )


# --------------------------------------------------------------------------
# Binary container
# --------------------------------------------------------------------------
# Layout: 16-byte header  <4s magic><u32 d><u32 L><u32 distribution tag>,
# then d*L^d little-endian float64 conductances in edge order, then any
# number of tagged sections  <4s tag><u32 a><u32 b><u32 nbytes> + payload.

MAGIC = b"RCMB"
_HEADER = struct.Struct("<4sIII")
_SECTION = struct.Struct("<4sIII")


def save_environment(path, env: Environment, sections: Iterable[tuple[bytes, int, int, bytes]] = ()) -> None:
    spec = env.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, spec.d, spec.L, spec.distribution.tag))
        fh.write(env.flat().astype("<f8").tobytes())
        spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode()
        for tag, a, b, payload in [(b"SPEC", 0, 0, spec_json), *sections]:
            fh.write(_SECTION.pack(tag, a, b, len(payload)))
            fh.write(payload)


def load_container(path) -> tuple[Environment, list[tuple[bytes, int, int, bytes]]]:
    """Read an environment file; returns the environment and any extra sections."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, d, L, tag = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not an environment file (magic {magic!r})")
    n = d * L ** d
    off = _HEADER.size
    a = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(float)
    off += 8 * n
    sections = []
    spec = None
    while off < len(raw):
        stag, sa, sb, nbytes = _SECTION.unpack_from(raw, off)
        off += _SECTION.size
        payload = raw[off:off + nbytes]
        off += nbytes
        if stag == b"SPEC":
            spec = EnvironmentSpec.from_dict(json.loads(payload))
        else:
            sections.append((stag, sa, sb, payload))
    if spec is None:
        spec = EnvironmentSpec(d=d, L=L, distribution=_BY_TAG[tag]())
    return Environment(spec, a.reshape((d,) + (L,) * d)), sections
