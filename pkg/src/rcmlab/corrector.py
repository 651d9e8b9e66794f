"""Correctors, flux correctors, massive correctors and auxiliary fields.

Directions are 0-based: ``i`` in ``range(d)``.

For a direction ``i`` the corrector solves ``-div*(A (grad phi_i + e_i)) = 0``
on the torus with ``sum phi_i = 0``.  Its flux ``q_i = A (grad phi_i + e_i)``
is divergence free and the flux corrector solves, for ``j < k``,

    -laplacian sigma_ijk = grad_j q_ik - grad_k q_ij,

with ``sigma_ikj = -sigma_ijk``.  It satisfies
``sum_j div*_j sigma_ikj = q_ik - <q_ik>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calculus import backward_divergence, backward_partial, forward_gradient, laplacian
from .env import Environment, load_container, save_environment
from .errors import ConfigurationError, ContractError
from .solver import SolveReport, WeightedOperator, solve_poisson_spectral

__all__ = [
    "CorrectorBundle",
    "AuxFields",
    "unit_field",
    "compute_corrector",
    "compute_flux_corrector",
    "compute_bundle",
    "compute_massive_corrector",
    "sigma_component",
    "sigma_divergence",
    "corrector_residual",
    "solve_aux",
    "save_bundles",
    "load_bundles",
]


def unit_field(d: int, shape: tuple[int, ...], i: int) -> np.ndarray:
    """The constant vector field ``e_i``."""
    e = np.zeros((d,) + shape)
    e[i] = 1.0
    return e


@dataclass
class CorrectorBundle:
    i: int
    phi: np.ndarray
    grad_phi: np.ndarray
    flux: np.ndarray
    sigma: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grad_phi.shape[0]

    def effective_flux(self) -> np.ndarray:
        """Torus average of ``q_i``, one entry per component."""
        return self.flux.reshape(self.d, -1).mean(axis=1)


def _div_source(h: np.ndarray) -> np.ndarray:
    """``div* h`` with its rounding-level total removed (it sums to zero exactly)."""
    rhs = backward_divergence(h)
    return rhs - rhs.mean()


def _direction(i: int, d: int) -> int:
    if not 0 <= int(i) < d:
        raise ConfigurationError(f"direction {i} out of range for d={d} (directions are 0-based)")
    return int(i)


def _operator(env: Environment, operator=None, T=None) -> WeightedOperator:
    if operator is not None:
        return operator
    return WeightedOperator(env.a, T)


def compute_corrector(env: Environment, i: int, tol: float = 1e-8,
                      operator: WeightedOperator | None = None) -> CorrectorBundle:
    """Solve the corrector equation in direction ``i``."""
    i = _direction(i, env.d)
    e = unit_field(env.d, env.spec.shape, i)
    rhs = _div_source(env.a * e)
    phi, rep = _operator(env, operator).solve(rhs, tol)
    g = forward_gradient(phi)
    return CorrectorBundle(i=i, phi=phi, grad_phi=g, flux=env.a * (g + e), reports={"phi": rep})


def corrector_residual(env: Environment, bundle: CorrectorBundle) -> float:
    """``||div* q_i|| / ||div*(A e_i)||`` (zero for constant environments)."""
    num = np.linalg.norm(backward_divergence(bundle.flux))
    den = np.linalg.norm(backward_divergence(env.a * unit_field(env.d, env.spec.shape, bundle.i)))
    return float(num / den) if den > 0 else float(num)


def _sigma_rhs(flux: np.ndarray, j: int, k: int) -> np.ndarray:
    gj = np.roll(flux[k], -1, axis=j) - flux[k]
    gk = np.roll(flux[j], -1, axis=k) - flux[j]
    return gj - gk


def compute_flux_corrector(bundle: CorrectorBundle, tol: float = 1e-8) -> CorrectorBundle:
    """Fill ``bundle.sigma[(j, k)]`` for ``j < k`` by spectral Poisson solves.

    In one dimension there are no pairs and ``sigma`` stays empty.
    """
    d = bundle.d
    for j in range(d):
        for k in range(j + 1, d):
            rhs = _sigma_rhs(bundle.flux, j, k)
            s = solve_poisson_spectral(rhs, check=False)
            nr = np.linalg.norm(rhs)
            res = float(np.linalg.norm(-laplacian(s) - rhs) / nr) if nr > 0 else 0.0
            if res > tol:
                raise ContractError(f"sigma_({bundle.i},{j},{k}) residual {res:.2e} exceeds tol {tol:.1e}")
            bundle.sigma[(j, k)] = s
            bundle.reports[("sigma", j, k)] = SolveReport(0, res, tol, 0.0)
    return bundle


def compute_bundle(env: Environment, i: int, tol: float = 1e-8, with_sigma: bool = True,
                   operator: WeightedOperator | None = None) -> CorrectorBundle:
    b = compute_corrector(env, i, tol, operator)
    if with_sigma:
        compute_flux_corrector(b, tol)
    return b


def sigma_component(bundle: CorrectorBundle, j: int, k: int) -> np.ndarray:
    """``sigma_ijk`` for any pair, using skew symmetry."""
    if j == k:
        return np.zeros(bundle.phi.shape)
    if j < k:
        return bundle.sigma[(j, k)]
    return -bundle.sigma[(k, j)]


def sigma_divergence(bundle: CorrectorBundle) -> np.ndarray:
    """Vector field with component ``k`` equal to ``sum_j div*_j sigma_ikj``."""
    d = bundle.d
    out = np.zeros((d,) + bundle.phi.shape)
    for k in range(d):
        for j in range(d):
            if j != k:
                out[k] += backward_partial(sigma_component(bundle, k, j), j)
    return out


def compute_massive_corrector(env: Environment, i: int, T: float, tol: float = 1e-8):
    """Solve ``u/T - div*(A grad u) = div*(A e_i)``; returns ``(phi_T, report)``."""
    if not T > 0:
        raise ConfigurationError("massive parameter T must be positive")
    i = _direction(i, env.d)
    rhs = backward_divergence(env.a * unit_field(env.d, env.spec.shape, i))
    return WeightedOperator(env.a, T).solve(rhs, tol)


# --------------------------------------------------------------------------
# Auxiliary fields for the sensitivity formulas
# --------------------------------------------------------------------------

@dataclass
class AuxFields:
    """Solutions driven by a test field ``g``.

    ``u``:  -div*(A grad u) = div* g
    ``v``:  -laplacian v = div* g
    ``w[(j, k)]``:  -div*(A grad w) = div*(A (div*_k v e_j - div*_j v e_k))
    """

    g: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    w: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)


def w_source(v: np.ndarray, j: int, k: int) -> np.ndarray:
    """Vector field ``div*_k v e_j - div*_j v e_k``."""
    h = np.zeros((v.ndim,) + v.shape)
    h[j] = backward_partial(v, k)
    h[k] = -backward_partial(v, j)
    return h


def solve_aux(env: Environment, g: np.ndarray, which, tol: float = 1e-8,
              aux: AuxFields | None = None, operator: WeightedOperator | None = None) -> AuxFields:
    """Compute the requested auxiliary fields, reusing those already in ``aux``.

    ``which`` is an iterable of ``"u"``, ``"v"`` or ``("w", j, k)``.  The field
    ``v`` must be present (requested earlier or in the same call) before any ``w``.
    """
    g = np.asarray(g, dtype=float)
    if aux is None:
        aux = AuxFields(g=g)
    if isinstance(which, (str, tuple)):
        which = [which]
    div_g = _div_source(g)
    for item in which:
        if item == "u":
            aux.u, aux.reports["u"] = _operator(env, operator).solve(div_g, tol)
        elif item == "v":
            aux.v = solve_poisson_spectral(div_g, check=False)
            aux.reports["v"] = SolveReport(0, _rel_res(-laplacian(aux.v), div_g), tol, 0.0)
        elif isinstance(item, tuple) and item[0] == "w":
            _, j, k = item
            if aux.v is None:
                raise ContractError("w requires v; request 'v' first")
            rhs = _div_source(env.a * w_source(aux.v, j, k))
            aux.w[(j, k)], aux.reports[("w", j, k)] = _operator(env, operator).solve(rhs, tol)
        else:
            raise ConfigurationError(f"unknown auxiliary field {item!r}")
    return aux


def _rel_res(lhs, rhs) -> float:
    n = np.linalg.norm(rhs)
    return float(np.linalg.norm(lhs - rhs) / n) if n > 0 else float(np.linalg.norm(lhs))


# --------------------------------------------------------------------------
# Serialization: extra sections in the environment container
# --------------------------------------------------------------------------

def save_bundles(path, env: Environment, bundles) -> None:
    sections = []
    for b in bundles:
        sections.append((b"PHI_", b.i, 0, b.phi.astype("<f8").tobytes()))
        sections.append((b"FLUX", b.i, 0, b.flux.astype("<f8").tobytes()))
        for (j, k), s in sorted(b.sigma.items()):
            sections.append((b"SIG_", b.i, j * env.d + k, s.astype("<f8").tobytes()))
    save_environment(path, env, sections)


def load_bundles(path):
    """Inverse of :func:`save_bundles`; returns ``(env, {i: bundle})``."""
    env, sections = load_container(path)
    shape = env.spec.shape
    d = env.d
    phis, fluxes, sigmas = {}, {}, {}
    for tag, a, b, payload in sections:
        arr = np.frombuffer(payload, dtype="<f8").astype(float)
        if tag == b"PHI_":
            phis[a] = arr.reshape(shape)
        elif tag == b"FLUX":
            fluxes[a] = arr.reshape((d,) + shape)
        elif tag == b"SIG_":
            sigmas.setdefault(a, {})[divmod(b, d)] = arr.reshape(shape)
    bundles = {}
    for i, phi in phis.items():
        bundles[i] = CorrectorBundle(i=i, phi=phi, grad_phi=forward_gradient(phi),
                                     flux=fluxes.get(i), sigma=sigmas.get(i, {}))
    return env, bundles
