"""Random length scales and regularity probes.

``r_diamond`` is the effective ellipticity scale: above it, edge-ball averages
of ``a^(d+1)`` and ``a^-(d+1)`` stay within a factor of their expectations.
It is built from a dyadic field by a 1/8-Lipschitz lower envelope.
``r_spade`` is the scale above which the weighted Dirichlet energy of the
corrector is controlled by local averages of ``a``.

The probes (Caccioppoli, hole filling, Gehring) report realised constants and
exponents; they never assert abstract inequalities with unknown constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .calculus import (
    averages_by_radius,
    ball,
    ball_average_field,
    ball_offsets,
    edge_average_field,
    edge_ball_average_field,
    forward_gradient,
    _r2,
)
from .env import Environment
from .errors import ConfigurationError, GeometryError

__all__ = [
    "ScaleField",
    "dyadic_radii",
    "compute_r_diamond",
    "check_r_diamond",
    "lipschitz_envelope",
    "spade_threshold",
    "compute_r_spade",
    "maximal_function",
    "weak_type_constants",
    "check_caccioppoli",
    "caccioppoli_bound",
    "energy_density",
    "check_hole_filling",
    "meyers_exponent",
    "gehring_probe",
    "meyers_pipeline",
]

LIPSCHITZ = 1.0 / 8.0


@dataclass
class ScaleField:
    """Per-vertex radii.

    ``radii`` is the field used downstream: the 1/8-Lipschitz envelope for
    ``kind="diamond"`` and a dyadic field for ``kind="spade"``.  ``raw`` holds
    the dyadic field before the envelope (diamond) and ``censored`` marks
    vertices where no admissible dyadic radius qualified.
    """

    radii: np.ndarray
    raw: np.ndarray
    kind: str
    constants: dict = field(default_factory=dict)
    censored: np.ndarray | None = None
    direction: int | None = None

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean()) if self.censored is not None else 0.0


def dyadic_radii(lo: float, hi: float) -> list[int]:
    """Powers of two r with ``lo <= r <= hi``."""
    out = []
    r = 1
    while r <= hi:
        if r >= lo:
            out.append(r)
        r *= 2
    return out


def _smallest_stable_radius(ok_by_R: list[np.ndarray], radii: list[int], cap: float):
    """Smallest dyadic r such that ``ok`` holds for every listed R >= r.

    ``ok_by_R[k]`` is a boolean field for ``radii[k]`` (increasing).  Vertices
    failing at the largest radius are censored at ``cap``.
    """
    shape = ok_by_R[0].shape
    out = np.full(shape, float(cap))
    censored = ~ok_by_R[-1]
    all_ok = np.ones(shape, dtype=bool)
    for R, ok in zip(reversed(radii), reversed(ok_by_R)):
        all_ok &= ok
        out[all_ok] = R
    return out, censored


def _torus_distance_to(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance on the torus from every vertex to the set ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    d = mask.ndim
    L = mask.shape[0]
    tiled = np.tile(~mask, (3,) * d)
    dist = ndimage.distance_transform_edt(tiled)
    return dist[(slice(L, 2 * L),) * d]


def lipschitz_envelope(raw: np.ndarray, slope: float = LIPSCHITZ) -> np.ndarray:
    """Largest ``slope``-Lipschitz field below ``raw``: ``min_y raw(y) + slope |x-y|``.

    Exact on the torus: for each distinct value v of ``raw`` an exact
    Euclidean distance transform gives ``min_{raw(y)=v} |x-y|``.
    """
    out = np.full(raw.shape, np.inf)
    for v in np.unique(raw):
        out = np.minimum(out, v + slope * _torus_distance_to(raw == v))
    return out


def compute_r_diamond(env: Environment, C: float = 0.5, moments: tuple[float, float] | None = None,
                      min_radius: int = 2) -> ScaleField:
    """Effective ellipticity radius.

    Parameters
    ----------
    env : Environment
    C : float
        Relative window: ``|avg_{edge ball R} a^(+-(d+1)) - m+-| <= C m+-``.
    moments : (m_plus, m_minus), optional
        Target moments ``E[a^(d+1)]`` and ``E[a^-(d+1)]``; by default the exact
        moments of the environment's law.

    Returns
    -------
    ScaleField
        ``raw`` is the dyadic ``max(r+, r-)`` field (censored at L/4) and
        ``radii`` its 1/8-Lipschitz envelope.
    """
    d, L = env.d, env.L
    k = d + 1
    if moments is None:
        moments = (env.spec.moment(k), env.spec.moment(-k))
    m_plus, m_minus = moments
    if not (math.isfinite(m_plus) and math.isfinite(m_minus)):
        raise ConfigurationError("r_diamond needs finite moments of order +-(d+1)")
    cap = L // 4
    radii = dyadic_radii(min_radius, cap)
    if not radii:
        raise GeometryError(f"box side {L} too small for dyadic radii >= {min_radius}")
    ok = []
    ap, am = env.a ** k, env.a ** (-k)
    for R in radii:
        avp = edge_ball_average_field(ap, R)
        avm = edge_ball_average_field(am, R)
        ok.append((np.abs(avp - m_plus) <= C * m_plus) & (np.abs(avm - m_minus) <= C * m_minus))
    raw, censored = _smallest_stable_radius(ok, radii, cap)
    if censored.all():
        warnings.warn("every vertex is censored: no dyadic radius <= L/4 qualifies", RuntimeWarning, stacklevel=2)
    env_field = lipschitz_envelope(raw)
    return ScaleField(radii=env_field, raw=raw, kind="diamond", censored=censored,
                      constants=dict(C=C, m_plus=m_plus, m_minus=m_minus, cap=cap))


def check_r_diamond(env: Environment, field_: ScaleField, factor: float | None = None) -> dict:
    """Post-check of the moment control above ``r_diamond``.

    For every vertex x and dyadic ``R`` with ``r(x) <= R <= L/4`` the averages
    ``avg_{edge ball R} a^(+-(d+1))`` must not exceed ``factor * m+-``
    (default ``2 * 18^d``, valid for the Lipschitz envelope by a covering argument).
    """
    d, L = env.d, env.L
    factor = 2 * 18 ** d if factor is None else factor
    k = d + 1
    m_plus, m_minus = field_.constants["m_plus"], field_.constants["m_minus"]
    worst_p = worst_m = 0.0
    for R in dyadic_radii(1, L // 4):
        sel = field_.radii <= R
        if not sel.any():
            continue
        worst_p = max(worst_p, float(edge_ball_average_field(env.a ** k, R)[sel].max() / m_plus))
        worst_m = max(worst_m, float(edge_ball_average_field(env.a ** (-k), R)[sel].max() / m_minus))
    return dict(probe="r_diamond_moments", factor=factor, ratio_plus=worst_p, ratio_minus=worst_m,
                passed=bool(worst_p <= factor and worst_m <= factor))


# --------------------------------------------------------------------------
# r_spade
# --------------------------------------------------------------------------

def spade_threshold(env: Environment, bundles) -> float:
    """``max_i (torus mean of a |grad phi_i|^2) / (torus mean of a)``."""
    abar = env.a.mean()
    return max(float((env.a * b.grad_phi ** 2).mean() / abar) for b in bundles)


def compute_r_spade(env: Environment, bundles, C_spade: float, r_diamond: ScaleField) -> ScaleField:
    """Smallest dyadic ``r >= r_diamond(x)`` above which the corrector energy is controlled.

    For every dyadic ``R`` in ``[r, L/8]`` and every direction,
    ``avg_{edge ball R} a |grad phi_i|^2 <= C_spade * avg_{edge ball 2R} a``.
    Vertices without such a radius are censored at L/8.
    """
    bundles = list(bundles)
    thr = spade_threshold(env, bundles)
    if not C_spade > thr:
        raise ConfigurationError(
            f"C_spade={C_spade} must exceed the finiteness threshold {thr:.6g} "
            "(torus mean of a|grad phi|^2 over torus mean of a)")
    L = env.L
    cap = L // 8
    radii = dyadic_radii(1, cap)
    ok = []
    for R in radii:
        cond = np.ones(env.spec.shape, dtype=bool)
        rhs = C_spade * edge_ball_average_field(env.a, 2 * R)
        for b in bundles:
            cond &= edge_ball_average_field(env.a * b.grad_phi ** 2, R) <= rhs
        ok.append(cond)
    # ok_from[k]: the condition holds for every listed R >= radii[k]
    ok_from = [None] * len(radii)
    acc = np.ones(env.spec.shape, dtype=bool)
    for k in range(len(radii) - 1, -1, -1):
        acc = acc & ok[k]
        ok_from[k] = acc
    lower = 2.0 ** np.ceil(np.log2(np.maximum(r_diamond.radii, 1.0)))
    out = np.full(env.spec.shape, np.inf)
    for k in range(len(radii) - 1, -1, -1):
        sel = ok_from[k] & (radii[k] >= lower)
        out[sel] = radii[k]
    censored = ~np.isfinite(out)
    out[censored] = np.maximum(cap, lower[censored])
    return ScaleField(radii=out, raw=out.copy(), kind="spade", censored=censored,
                      constants=dict(C_spade=C_spade, threshold=thr, cap=cap))


# --------------------------------------------------------------------------
# Maximal function
# --------------------------------------------------------------------------

def _ball_footprint(d: int, R: float) -> np.ndarray:
    r2 = _r2(R)
    k = math.isqrt(r2)
    fp = np.zeros((2 * k + 1,) * d, dtype=bool)
    off = ball_offsets(d, r2) + k
    fp[tuple(off.T)] = True
    return fp


def _grid_mask(shape, stride: int = 2) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[(slice(None, None, stride),) * len(shape)] = True
    return mask


def maximal_function(g: np.ndarray, p: float = 1.0, stride: int = 2, max_radius: float | None = None) -> np.ndarray:
    """Grid ``p``-maximal function ``M_p g(x) = sup_{B containing x} (avg_B g^p)^(1/p)``.

    The supremum runs over the singletons and over balls of dyadic radius
    ``1, 2, 4, ... <= L/4`` centred on the sub-lattice ``(stride Z)^d``.
    """
    g = np.asarray(g, dtype=float)
    if (g < 0).any():
        raise ConfigurationError("maximal function needs a non-negative field")
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    L, d = g.shape[0], g.ndim
    gp = g ** p
    best = gp.copy()
    mask = _grid_mask(g.shape, stride)
    max_radius = L / 4 if max_radius is None else max_radius
    for R in dyadic_radii(1, max_radius):
        avg = np.where(mask, ball_average_field(gp, R), -np.inf)
        spread = ndimage.maximum_filter(avg, footprint=_ball_footprint(d, R), mode="wrap")
        best = np.maximum(best, spread)
    return best ** (1.0 / p)


def weak_type_constants(g: np.ndarray, t_values=None, **kw) -> dict:
    """Ratios ``t |{M g >= t}| / sum_{g >= t/2} g`` over a sweep of levels t."""
    g = np.asarray(g, dtype=float)
    Mg = maximal_function(g, 1.0, **kw)
    if t_values is None:
        pos = g[g > 0]
        t_values = np.geomspace(pos.min(), 2 * g.max(), 25) if len(pos) else []
    ratios = []
    for t in t_values:
        mass = g[g >= t / 2].sum()
        count = (Mg >= t).sum()
        if mass > 0 and count > 0:
            ratios.append(t * count / mass)
    ratios = np.array(ratios)
    return dict(t=list(map(float, t_values)), ratios=ratios.tolist(),
                c1=float(ratios.min()) if len(ratios) else math.nan,
                c2=float(ratios.max()) if len(ratios) else math.nan)


# --------------------------------------------------------------------------
# Caccioppoli
# --------------------------------------------------------------------------

def _edge_ball_mask(L: int, d: int, x, R: float) -> np.ndarray:
    B = ball(x, R, L)
    m = np.zeros((d,) + (L,) * d, dtype=bool)
    m[B.edge_index()] = True
    return m


def caccioppoli_bound(L: int, d: int, r: float) -> float:
    """Constant that the Caccioppoli ratio can never exceed.

    Testing the equation with ``eta^2 (u - c)`` where ``eta`` is 1 on ``B_r``,
    vanishes outside ``B_{2r-1}`` and has slope ``s = 1/max(r-1, 1)`` gives
    ``sum_{E_r} a|grad u|^2 <= 12 s^2 sum_{E_2r} a (u-c)_e^2 + 8 sum_{E_2r} f_e^2/a_e``,
    so in averaged form the ratio is at most ``max(12 s^2 r^2, 8) |E_2r| / |E_r|``.
    """
    n_r = _edge_ball_mask(L, d, (0,) * d, r).sum()
    n_2r = _edge_ball_mask(L, d, (0,) * d, 2 * r).sum()
    slope = 1.0 / max(r - 1.0, 1.0)
    return float(max(12 * (slope * r) ** 2, 8.0) * n_2r / n_r)


def check_caccioppoli(a: np.ndarray, u: np.ndarray, f: np.ndarray | None, r: float, x=None,
                      C_cacc: float | None = None) -> dict:
    """Realised Caccioppoli ratio on ``B_r(x)``.

    ``lhs = avg_{E_r} a |grad u|^2`` and
    ``rhs = r^-2 avg_{E_2r} a (u - c)_e^2 + avg_{E_2r} f_e^2 / a_e`` with the
    minimising constant ``c`` (the ``a``-weighted mean of ``u_e`` on ``E_2r``);
    ``E_R`` is the edge ball.  ``u`` should solve ``-div*(A grad u) = div* f``.
    """
    a = getattr(a, "a", a)
    d, L = a.shape[0], a.shape[1]
    if not 4 * r < L:
        raise GeometryError(f"need 4r < L, got r={r}, L={L}")
    x = (0,) * d if x is None else tuple(x)
    m1 = _edge_ball_mask(L, d, x, r)
    m2 = _edge_ball_mask(L, d, x, 2 * r)
    gu = forward_gradient(u)
    ue = edge_average_field(u)
    lhs = float((a * gu ** 2)[m1].mean())
    w = a[m2]
    c = float((w * ue[m2]).sum() / w.sum())
    term_u = float((w * (ue[m2] - c) ** 2).mean()) / r ** 2
    term_f = float((f[m2] ** 2 / w).mean()) if f is not None else 0.0
    rhs = term_u + term_f
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0 else math.inf
    out = dict(probe="caccioppoli", center=list(x), r=r, lhs=lhs, rhs=rhs, term_u=term_u, term_f=term_f,
               c=c, ratio=ratio)
    if C_cacc is not None:
        out["pass"] = bool(ratio <= C_cacc)
    return out


# --------------------------------------------------------------------------
# Hole filling
# --------------------------------------------------------------------------

def energy_density(a: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """``A grad u . grad u`` per vertex (sum over the d forward edges)."""
    return (a * grad_u ** 2).sum(axis=0)


def check_hole_filling(a: np.ndarray, grad_u: np.ndarray, x, R: float, r_min: float = 2.0) -> dict:
    """Empirical hole-filling exponent at ``x``.

    ``E(r) = sum_{B_r(x)} A grad u . grad u`` for dyadic ``r`` from the first
    power of two ``>= r_min`` up to ``R``; ``alpha_hat`` is the least-squares
    slope of ``log(E(r)/E(R))`` against ``log(r/R)``.  The companion Meyers
    exponent surrogate is ``d / alpha_hat``.
    """
    a = getattr(a, "a", a)
    d, L = a.shape[0], a.shape[1]
    if not 2 * R < L:
        raise GeometryError(f"need 2R < L, got R={R}, L={L}")
    dens = energy_density(a, grad_u)
    lo = 2.0 ** math.ceil(math.log2(max(r_min, 1.0)))
    rs = [float(r) for r in dyadic_radii(lo, R)]
    if not rs or rs[-1] != R:
        rs.append(float(R))
    E = np.array([dens[ball(x, r, L).vertex_index()].sum() for r in rs])
    ER = E[-1]
    out = dict(probe="hole_filling", center=list(map(int, x)), R=R, radii=rs, energy=E.tolist())
    if ER <= 0 or len(rs) < 2 or (E <= 0).any():
        out.update(alpha=math.nan, beta_prime=math.nan, passed=False)
        return out
    lr = np.log(np.array(rs) / R)
    le = np.log(E / ER)
    alpha = float(np.sum(lr * le) / np.sum(lr * lr))  # fit through the origin (ratio 1 at r = R)
    out.update(alpha=alpha, beta_prime=d / alpha if alpha > 0 else math.inf, passed=bool(alpha > 0))
    return out


# --------------------------------------------------------------------------
# Gehring / Meyers
# --------------------------------------------------------------------------

def meyers_exponent(d: int) -> float:
    """The exponent ``s`` of the reverse Hölder step: ``d(d+1)/(d^2+d+2)``, and 3/4 in 1D."""
    return 0.75 if d == 1 else d * (d + 1) / (d * d + d + 2)


def _grid_averages(F: np.ndarray, R: float, stride: int) -> np.ndarray:
    # averages of non-negative data; clip FFT rounding below zero
    avg = ball_average_field(F, R)[(slice(None, None, stride),) * F.ndim].ravel()
    return np.maximum(avg, 0.0)


def gehring_probe(U: np.ndarray, V: np.ndarray, p: float, q_max: float | None = None, q_step: float = 0.02,
                  stride: int = 2, C_cap: float = 1e6) -> dict:
    """Empirical Gehring improvement on a fixed ball grid.

    Balls ``B`` have dyadic radii ``R >= 1`` with ``4R < L`` (so ``2B`` does
    not self-wrap) and centres on ``(stride Z)^d``.  First the constant

        C = max_B (avg_B U^p - avg_2B V^p)_+ / (avg_2B U)^p

    of the input inequality is measured.  Then for ``q`` on a grid above ``p``

        K(q) = max_B avg_B U^q / (avg_2B V^q + (avg_2B U)^q)

    and ``q`` passes when ``K(q) <= 1 + C``.  ``q_bar`` is the largest grid
    value such that every grid ``q`` in ``[p, q_bar]`` passes.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if (U < 0).any() or (V < 0).any():
        raise ConfigurationError("U and V must be non-negative")
    L = U.shape[0]
    q_max = 4 * p if q_max is None else q_max
    radii = [R for R in dyadic_radii(1, L) if 4 * R < L]
    if not radii:
        raise GeometryError(f"box side {L} too small for the Gehring ball grid")

    C = 0.0
    applicable = True
    for R in radii:
        num = _grid_averages(U ** p, R, stride) - _grid_averages(V ** p, R * 2, stride)
        den = _grid_averages(U, 2 * R, stride) ** p
        pos = num > 0
        if (pos & (den <= 0)).any():
            applicable = False
            break
        if pos.any():
            C = max(C, float((num[pos] / den[pos]).max()))
    if not applicable or C > C_cap:
        return dict(probe="gehring", p=p, C=C if applicable else math.inf, status="NOT-APPLICABLE",
                    q_bar=math.nan, q=[], K=[])

    qs = np.arange(p, q_max + 1e-12, q_step)
    Ks = []
    q_bar = p
    failed = False
    for q in qs:
        K = 0.0
        for R in radii:
            num = _grid_averages(U ** q, R, stride)
            den = _grid_averages(V ** q, 2 * R, stride) + _grid_averages(U, 2 * R, stride) ** q
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
            K = max(K, float(ratio.max()))
        Ks.append(K)
        if not failed and K <= 1 + C:
            q_bar = float(q)
        else:
            failed = True
    return dict(probe="gehring", p=p, C=C, status="OK", q_bar=q_bar, censored=not failed,
                q=qs.tolist(), K=Ks)


def meyers_pipeline(env: Environment, grad_u: np.ndarray, f: np.ndarray, r_diamond: ScaleField,
                    **kw) -> dict:
    """Gehring probe on ``U = (avg_{B_diamond(x)} A grad u . grad u)^s``, ``V = (avg A^-1 f . f)^s``.

    Returns the probe report plus ``beta_hat = s * q_bar``.
    """
    s = meyers_exponent(env.d)
    dens_u = energy_density(env.a, grad_u)
    dens_f = (f ** 2 / env.a).sum(axis=0)
    U = np.maximum(averages_by_radius(dens_u, r_diamond.radii), 0.0) ** s
    V = np.maximum(averages_by_radius(dens_f, r_diamond.radii), 0.0) ** s
    rep = gehring_probe(U, V, 1.0 / s, **kw)
    rep["s"] = s
    rep["beta_hat"] = s * rep["q_bar"] if rep["status"] == "OK" else math.nan
    return rep
