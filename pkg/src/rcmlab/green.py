"""Green-function differences on the torus and the representation of corrector increments.

``h_x = G(., x) - G(., 0)`` solves ``-laplacian h_x = delta_x - delta_0`` with
mean zero.  Summation by parts on the torus gives, for any vertex field ``f``,

    f(x) - f(0) = sum_y grad f(y) . grad h_x(y),

with no cutoff needed because the box is finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calculus import forward_gradient, laplacian, periodic_distance
from .errors import ConfigurationError, GeometryError
from .solver import solve_poisson_spectral

__all__ = [
    "GreenDiff",
    "green_difference",
    "green_gradient_1d",
    "gradient_decay_profile",
    "representation_phi_check",
    "green_norm_sweep",
    "fit_log_growth",
]


@dataclass
class GreenDiff:
    x: tuple
    field: np.ndarray
    gradient: np.ndarray
    residual: float

    @property
    def L(self) -> int:
        return self.field.shape[0]

    @property
    def d(self) -> int:
        return self.field.ndim

    def l2_norm(self) -> float:
        """``||grad h_x||_2`` over all edges."""
        return float(np.sqrt(np.sum(self.gradient ** 2)))


def _norm_wrapped(x, L) -> float:
    t = np.array([min(int(c) % L, L - int(c) % L) for c in x], dtype=float)
    return float(np.sqrt((t ** 2).sum()))


def green_difference(L: int, d: int, x) -> GreenDiff:
    """Mean-zero ``G(., x) - G(., 0)`` on ``Z_L^d`` by a spectral solve (``d >= 2``)."""
    if d < 2:
        raise ConfigurationError("use green_gradient_1d in one dimension")
    x = tuple(int(c) % L for c in x)
    if len(x) != d:
        raise ConfigurationError(f"vertex {x} does not have {d} coordinates")
    r = _norm_wrapped(x, L)
    if r == 0:
        raise GeometryError("x must differ from the origin")
    if 2 * r > L / 2:
        raise GeometryError(f"|x|={r:.3g} too large for L={L} (need 2|x| <= L/2)")
    rhs = np.zeros((L,) * d)
    rhs[x] += 1.0
    rhs[(0,) * d] -= 1.0
    h = solve_poisson_spectral(rhs)
    res = float(np.linalg.norm(-laplacian(h) - rhs) / np.linalg.norm(rhs))
    return GreenDiff(x=x, field=h, gradient=forward_gradient(h), residual=res)


def green_gradient_1d(L: int, x: int) -> np.ndarray:
    """Exact gradient of ``G(., x) - G(., 0)`` on ``Z_L`` for ``0 <= x < L``."""
    x = int(x) % L
    y = np.arange(L)
    return ((y < x).astype(float) - x / L)[None, :]


def gradient_decay_profile(gd: GreenDiff, far_max: float | None = None) -> dict:
    """Radial profile of ``|grad h_x(y)|`` and its far-field power law.

    The far-field exponent is a least-squares slope of the log of the shell
    maxima against ``log |y|`` over ``2|x| <= |y| <= far_max`` (default L/4,
    where periodic images are still small).  The near-field constant is the
    smallest ``c`` with ``|grad h| <= c((1+|y-x|)^(1-d) + (1+|y|)^(1-d))``
    on ``|y| <= 2|x|``.
    """
    L, d = gd.L, gd.d
    xr = _norm_wrapped(gd.x, L)
    mag = np.sqrt((gd.gradient ** 2).sum(axis=0))
    ry = periodic_distance(mag.shape)
    rxy = periodic_distance(mag.shape, gd.x)
    far_max = L / 4 if far_max is None else far_max

    shells = np.floor(ry).astype(int)
    radii, maxima = [], []
    for s in range(int(math.ceil(2 * xr)), int(far_max) + 1):
        sel = shells == s
        if sel.any():
            radii.append(s)
            maxima.append(mag[sel].max())
    radii = np.array(radii, dtype=float)
    maxima = np.array(maxima)
    if len(radii) >= 3:
        slope, intercept = np.polyfit(np.log(radii), np.log(maxima), 1)
    else:
        slope = intercept = math.nan

    near = ry <= 2 * xr
    env_near = (1 + rxy[near]) ** (1 - d) + (1 + ry[near]) ** (1 - d)
    c_near = float((mag[near] / env_near).max())
    # far-field constant in |grad h| <= c |x| / (1+|y|)^d
    far = (ry >= 2 * xr) & (ry <= far_max)
    c_far = float((mag[far] * (1 + ry[far]) ** d / xr).max()) if far.any() else math.nan
    return dict(probe="green_gradient_decay", x=list(gd.x), exponent=float(slope), intercept=float(intercept),
                radii=radii.tolist(), shell_max=maxima.tolist(), c_near=c_near, c_far=c_far,
                passed=bool(slope <= -d + 0.3))


def representation_phi_check(phi: np.ndarray, x, tol: float = 1e-8, gd: GreenDiff | None = None,
                             factor: float = 100.0) -> dict:
    """Compare ``phi(x) - phi(0)`` with ``sum grad phi . grad h_x``.

    ``phi`` is a vertex field (e.g. a corrector).  The gap is relative to
    ``max(|direct|, |rep|, 1e-3 max|phi|)``.
    """
    phi = np.asarray(phi, dtype=float)
    d, L = phi.ndim, phi.shape[0]
    x = tuple(int(c) % L for c in np.atleast_1d(x))
    if d == 1:
        grad_h = green_gradient_1d(L, x[0])
    else:
        gd = gd if gd is not None else green_difference(L, d, x)
        grad_h = gd.gradient
    direct = float(phi[x] - phi[(0,) * d])
    rep = float(np.sum(forward_gradient(phi) * grad_h))
    den = max(abs(direct), abs(rep), 1e-3 * float(np.abs(phi).max()))
    gap = abs(direct - rep) / den if den > 0 else 0.0
    return dict(probe="representation_phi", x=list(x), direct=direct, rep=rep, gap=gap,
                threshold=factor * tol, passed=bool(gap <= factor * tol))


def green_norm_sweep(L: int, d: int, radii, axis: int = 0) -> list[tuple[float, float]]:
    """``(|x|, ||grad h_x||_2)`` for ``x = r e_axis``, r in ``radii``."""
    out = []
    for r in radii:
        x = [0] * d
        x[axis] = int(r)
        out.append((float(r), green_difference(L, d, x).l2_norm()))
    return out


def fit_log_growth(sweep) -> dict:
    """Fit ``||grad h_x||^2 = alpha log|x| + beta`` by least squares.

    In two dimensions ``||grad h_x||^2 = 2 (G(0,0) - G(x,0))`` grows like
    ``log|x| / pi``, so ``alpha`` should be close to ``1/pi``.
    """
    r = np.array([s[0] for s in sweep])
    n2 = np.array([s[1] for s in sweep]) ** 2
    X = np.column_stack([np.log(r), np.ones_like(r)])
    (alpha, beta), *_ = np.linalg.lstsq(X, n2, rcond=None)
    pred = X @ np.array([alpha, beta])
    ss_res = float(((n2 - pred) ** 2).sum())
    ss_tot = float(((n2 - n2.mean()) ** 2).sum())
    return dict(alpha=float(alpha), beta=float(beta), r2=1 - ss_res / ss_tot if ss_tot > 0 else 1.0)
