"""Ensemble estimators: moment norms, CLT statistic, growth curves, fits.

Every per-sample environment is drawn from the environment spec with a seed taken from
the counter-based stream ``(spec.seed, "ensemble", sample index)``, so an
ensemble is reproducible whatever the number of workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .calculus import ball_average_field, ball_offsets, forward_gradient, _r2, ball
from .corrector import compute_bundle, sigma_component
from .env import EnvironmentSpec, sample_environment, stream
from .errors import ConfigurationError, GeometryError

__all__ = [
    "MomentNorm",
    "moment_norm",
    "bootstrap_indices",
    "scaling_fit",
    "ensemble_slope",
    "sample_seed",
    "run_ensemble",
    "EnsembleStats",
    "clt_sample",
    "estimate_CR",
    "growth_sample",
    "corrector_growth",
    "shape_function",
    "proportional_fit",
    "sublinearity_check",
    "avg_sobolev_probe",
    "N_BOOT",
    "STABLE_REL_HALFWIDTH",
]

N_BOOT = 1000
# a bootstrap CI whose half-width exceeds this fraction of the estimate is
# treated as unstable; the moment estimate is then flagged non-convergent
STABLE_REL_HALFWIDTH = 0.25
NON_CONVERGENT_REL_HALFWIDTH = 0.5


# --------------------------------------------------------------------------
# Bootstrap helpers
# --------------------------------------------------------------------------

def bootstrap_indices(n: int, n_boot: int = N_BOOT, seed: int = 0) -> np.ndarray:
    """``(n_boot, n)`` resampling indices from a fixed stream."""
    return stream(seed, "bootstrap", n, n_boot).integers(0, n, size=(n_boot, n))


@dataclass
class MomentNorm:
    p: float
    value: float
    ci_lo: float
    ci_hi: float
    n: int
    non_convergent: bool = False
    reason: str = ""

    @property
    def rel_halfwidth(self) -> float:
        if self.value == 0:
            return 0.0
        return 0.5 * (self.ci_hi - self.ci_lo) / self.value

    def to_dict(self):
        return dict(p=self.p, value=self.value, ci_lo=self.ci_lo, ci_hi=self.ci_hi, n=self.n,
                    non_convergent=self.non_convergent, reason=self.reason)


def moment_norm(samples, p: float, n_boot: int = N_BOOT, seed: int = 0, tail_index: float | None = None,
                level: float = 0.95, weights_are_powers: bool = False) -> MomentNorm:
    """``mean(|x|^p)^(1/p)`` with a percentile bootstrap CI.

    Parameters
    ----------
    samples : array_like
        One value per independent sample, or (with ``weights_are_powers``)
        per-sample averages of ``|x|^p`` already.
    tail_index : float, optional
        Tail index of the underlying law.  When ``p > tail_index / 2`` the
        estimate is flagged non-convergent regardless of the data.
    """
    if not p > 0:
        raise ConfigurationError("p must be positive")
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n < 2:
        raise ConfigurationError("need at least two samples")
    y = x if weights_are_powers else np.abs(x) ** p
    value = float(y.mean() ** (1 / p))
    idx = bootstrap_indices(n, n_boot, seed)
    boots = y[idx].mean(axis=1) ** (1 / p)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boots, [alpha, 1 - alpha])
    out = MomentNorm(p=p, value=value, ci_lo=float(lo), ci_hi=float(hi), n=n)
    reasons = []
    if tail_index is not None and p > tail_index / 2:
        reasons.append(f"p={p} exceeds tail index {tail_index}/2")
    if not math.isfinite(value) or out.rel_halfwidth > NON_CONVERGENT_REL_HALFWIDTH:
        reasons.append(f"bootstrap CI half-width {out.rel_halfwidth:.2f} of the estimate")
    if reasons:
        out.non_convergent = True
        out.reason = "; ".join(reasons)
    return out


def scaling_fit(x, y, n_boot: int = N_BOOT, seed: int = 0, level: float = 0.95) -> dict:
    """Least squares of ``log y`` on ``log x`` with a pairs-bootstrap CI for the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise ConfigurationError("need at least three points")
    if (x <= 0).any() or (y <= 0).any():
        raise ConfigurationError("scaling_fit needs positive data")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    idx = bootstrap_indices(len(x), n_boot, seed)
    slopes = []
    for row in idx:
        if np.ptp(lx[row]) == 0:
            continue
        slopes.append(np.polyfit(lx[row], ly[row], 1)[0])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(slopes, [alpha, 1 - alpha])
    return dict(slope=float(slope), intercept=float(intercept), ci_lo=float(lo), ci_hi=float(hi))


def ensemble_slope(R_list, per_sample: np.ndarray, p: float = 2.0, n_boot: int = N_BOOT, seed: int = 0,
                   level: float = 0.95) -> dict:
    """Slope of ``log mean(Y_R)^(1/p)`` against ``log R`` with a sample-bootstrap CI.

    ``per_sample[s, k]`` holds a per-sample estimate of ``E|X_R|^p`` (e.g. a
    translation average) for ``R_list[k]``; whole rows are resampled so the
    correlation between radii is kept.
    """
    per_sample = np.asarray(per_sample, dtype=float)
    lR = np.log(np.asarray(R_list, dtype=float))
    norms = per_sample.mean(axis=0) ** (1 / p)
    slope, intercept = np.polyfit(lR, np.log(norms), 1)
    idx = bootstrap_indices(per_sample.shape[0], n_boot, seed)
    bs = np.array([np.polyfit(lR, np.log(per_sample[row].mean(axis=0) ** (1 / p)), 1)[0] for row in idx])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(bs, [alpha, 1 - alpha])
    return dict(slope=float(slope), intercept=float(intercept), ci_lo=float(lo), ci_hi=float(hi),
                norms=norms.tolist(), R=list(map(float, R_list)))


# --------------------------------------------------------------------------
# Ensemble orchestration
# --------------------------------------------------------------------------

def sample_seed(spec: EnvironmentSpec, s: int) -> int:
    return int(stream(spec.seed, "ensemble", s).integers(2 ** 63))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("RCMLAB_THREADS", "1")))
    except ValueError:
        return 1


def run_ensemble(func, n_samples: int, threads: int | None = None) -> list:
    """``[func(s) for s in range(n_samples)]``, optionally over worker processes.

    ``func`` must be picklable (a module-level function or ``functools.partial``).
    Results come back in sample order.
    """
    threads = default_threads() if threads is None else threads
    if threads <= 1 or n_samples <= 1:
        return [func(s) for s in range(n_samples)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, range(n_samples), chunksize=max(1, n_samples // (4 * threads))))


@dataclass
class EnsembleStats:
    spec: EnvironmentSpec
    R_list: list
    p_list: list
    records: list = field(default_factory=list)
    norms: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.records)

    def powers(self, key: str, p: float) -> np.ndarray:
        """``(n_samples, len(R_list))`` per-sample means of ``|X_R|^p``."""
        return np.array([[rec[key][f"{p:g}"][k] for k in range(len(self.R_list))] for rec in self.records])


def _check_guard(R_list, L: int, guard: float):
    if max(R_list) > guard * L:
        raise GeometryError(f"radius {max(R_list)} exceeds the periodization guard {guard}*L = {guard * L}")


def clt_sample(s: int, spec: EnvironmentSpec, R_list, i: int, p_list, tol: float, with_sigma: bool,
               centers: str = "all") -> dict:
    """Per-sample CLT statistics for one environment.

    For each ``R`` and ``p`` stores the mean over centres x of
    ``C_R(x)^p = (R^(d/2) |avg_{B_R(x)} grad phi_i|)^p`` (key ``"phi"``) and the
    same for the concatenated ``(grad phi_i, grad sigma_ijk)`` (key ``"phisigma"``).
    ``"origin"`` keeps ``C_R(0)`` itself.
    """
    seed = sample_seed(spec, s)
    env = sample_environment(spec.with_seed(seed))
    b = compute_bundle(env, i, tol, with_sigma=with_sigma and env.d > 1)
    comps = [b.grad_phi]
    if with_sigma and env.d > 1:
        comps += [forward_gradient(sigma_component(b, j, k)) for j in range(env.d) for k in range(j + 1, env.d)]
    d = env.d
    rec = {"sample": s, "seed": seed, "iterations": b.reports["phi"].iterations,
           "residual": b.reports["phi"].residual, "phi": {}, "phisigma": {}, "origin": [], "origin_phisigma": []}
    avg_sq_phi, avg_sq_all = [], []
    for R in R_list:
        sq_phi = sum(ball_average_field(c, R) ** 2 for c in b.grad_phi)
        sq_all = sq_phi + sum(ball_average_field(c, R) ** 2 for g in comps[1:] for c in g)
        scale = R ** (d / 2)
        avg_sq_phi.append(scale * np.sqrt(sq_phi))
        avg_sq_all.append(scale * np.sqrt(sq_all))
        rec["origin"].append(float(avg_sq_phi[-1].flat[0]))
        rec["origin_phisigma"].append(float(avg_sq_all[-1].flat[0]))
    for p in p_list:
        key = f"{p:g}"
        if centers == "origin":
            rec["phi"][key] = [float(c.flat[0] ** p) for c in avg_sq_phi]
            rec["phisigma"][key] = [float(c.flat[0] ** p) for c in avg_sq_all]
        else:
            rec["phi"][key] = [float((c ** p).mean()) for c in avg_sq_phi]
            rec["phisigma"][key] = [float((c ** p).mean()) for c in avg_sq_all]
    return rec


def estimate_CR(spec: EnvironmentSpec, R_list, i: int = 0, n_samples: int = 20, p_list=(1, 2),
                tol: float = 1e-6, with_sigma: bool = True, guard: float = 1 / 8, centers: str = "all",
                threads: int | None = None, n_boot: int = N_BOOT) -> EnsembleStats:
    """Moment norms of the CLT statistic ``C_R = R^(d/2) |avg_{B_R} grad phi_i|``.

    Per-sample values are averaged over all centres (``centers="all"``,
    stationarity makes this an unbiased estimate of ``E[C_R^p]`` with lower
    variance) or taken at the origin only.  The bootstrap resamples whole
    samples.
    """
    if n_samples < 2:
        raise ConfigurationError("need at least two samples")
    R_list = list(R_list)
    _check_guard(R_list, spec.L, guard)
    for R in R_list:
        if not 2 * R < spec.L:
            raise GeometryError(f"radius {R} self-wraps on L={spec.L}")
    func = partial(clt_sample, spec=spec, R_list=R_list, i=i, p_list=list(p_list), tol=tol,
                   with_sigma=with_sigma, centers=centers)
    st = EnsembleStats(spec=spec, R_list=R_list, p_list=list(p_list))
    st.records = run_ensemble(func, n_samples, threads)
    tail = spec.tail_index
    for key in ("phi", "phisigma"):
        st.norms[key] = {}
        for p in p_list:
            Y = st.powers(key, p)
            st.norms[key][p] = [moment_norm(Y[:, k], p, n_boot=n_boot, tail_index=tail,
                                            weights_are_powers=True, seed=k) for k in range(len(R_list))]
            if any(m.non_convergent for m in st.norms[key][p]):
                st.warnings.append(f"non-convergent {key} moments at p={p}")
    if (2 in p_list or 2.0 in p_list) and not (st.powers("phi", 2).mean(axis=0) > 0).all():
        st.warnings.append("zero CLT statistic at some radius; scaling fits skipped")
    elif 2 in p_list or 2.0 in p_list:
        # slope of E[|avg grad phi|^2]^(1/2) = R^(-d/2) E[C_R^2]^(1/2)
        Y = st.powers("phi", 2)
        scale = np.array([R ** (-spec.d) for R in R_list])
        st.fits["avg_grad_slope"] = ensemble_slope(R_list, Y * scale, 2.0, n_boot=n_boot)
        st.fits["CR_slope"] = ensemble_slope(R_list, Y, 2.0, n_boot=n_boot)
    return st


# --------------------------------------------------------------------------
# Growth curves
# --------------------------------------------------------------------------

def shape_function(d: int, r):
    """Expected growth shape of ``|phi(x) - phi(0)|``: sqrt(r), sqrt(log(1+r)) or 1."""
    r = np.asarray(r, dtype=float)
    if d == 1:
        return np.sqrt(r)
    if d == 2:
        return np.sqrt(np.log1p(r))
    return np.ones_like(r)


def proportional_fit(x, y, h) -> dict:
    """Fit ``y = c h(x)`` by least squares; report ``c`` and ``R^2 = 1 - SS_res/SS_tot``."""
    y = np.asarray(y, dtype=float)
    hx = np.asarray(h(np.asarray(x, dtype=float)), dtype=float)
    c = float((hx @ y) / (hx @ hx))
    ss_res = float(((y - c * hx) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return dict(c=c, r2=1 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf))


def _offset_vector(r: int, d: int, axis: int = 0) -> tuple:
    x = [0] * d
    x[axis] = int(r)
    return tuple(x)


def growth_sample(s: int, spec: EnvironmentSpec, i: int, x_list, p: float, tol: float,
                  centers: str = "all", axes: str = "all") -> dict:
    """Per-sample ``|phi(y + x) - phi(y)|^p`` averaged over y (or at y = 0).

    With ``axes="all"`` the offset ``x = r e_k`` is averaged over the
    coordinate directions k as well, which is allowed by the lattice symmetry
    of the law.
    """
    seed = sample_seed(spec, s)
    env = sample_environment(spec.with_seed(seed))
    b = compute_bundle(env, i, tol, with_sigma=False)
    phi = b.phi
    d = env.d
    out = []
    ks = range(d) if axes == "all" else [0]
    for r in x_list:
        vals = []
        for k in ks:
            diff = np.roll(phi, -int(r), axis=k) - phi
            vals.append(float((np.abs(diff) ** p).mean()) if centers == "all" else float(abs(diff.flat[0]) ** p))
        out.append(float(np.mean(vals)))
    return {"sample": s, "seed": seed, "values": out, "iterations": b.reports["phi"].iterations}


def corrector_growth(spec: EnvironmentSpec, i: int, x_list, p: float = 2.0, n_samples: int = 20,
                     tol: float = 1e-6, guard: float | None = 1 / 8, centers: str = "all",
                     threads: int | None = None, n_boot: int = N_BOOT) -> dict:
    """Growth curve ``E[|phi(x) - phi(0)|^p]^(1/p)`` for ``x = r e_k``, r in ``x_list``.

    Returns the curve with bootstrap CIs and proportional fits against the
    shape function of the dimension (and, in 2D, against ``r^(1/4)``).
    """
    x_list = [int(r) for r in x_list]
    if guard is not None and max(x_list) > guard * spec.L:
        raise GeometryError(f"|x| = {max(x_list)} exceeds the periodization guard {guard}*L")
    func = partial(growth_sample, spec=spec, i=i, x_list=x_list, p=p, tol=tol, centers=centers)
    recs = run_ensemble(func, n_samples, threads)
    Y = np.array([r["values"] for r in recs])
    curve = []
    for k, r in enumerate(x_list):
        if r == 0:
            curve.append(MomentNorm(p, 0.0, 0.0, 0.0, len(Y)))
        else:
            curve.append(moment_norm(Y[:, k], p, n_boot=n_boot, weights_are_powers=True, seed=k))
    xs = np.array([r for r in x_list if r > 0], dtype=float)
    ys = np.array([m.value for r, m in zip(x_list, curve) if r > 0])
    fits = {"shape": proportional_fit(xs, ys, lambda t: shape_function(spec.d, t))}
    if spec.d == 2:
        fits["power_quarter"] = proportional_fit(xs, ys, lambda t: t ** 0.25)
    return dict(x=x_list, curve=curve, fits=fits, records=recs)


# --------------------------------------------------------------------------
# Sublinearity
# --------------------------------------------------------------------------

def _anchored_ball_mean(field_: np.ndarray, n: float, center) -> np.ndarray:
    """``avg_{y in B_n(x)} |f(y) - f(x)|`` at one centre or (center=None) all centres."""
    d = field_.ndim
    off = ball_offsets(d, _r2(n))
    if center is not None:
        B = ball(center, n, field_.shape[0])
        return np.abs(field_[B.vertex_index()] - field_[tuple(center)]).mean()
    acc = np.zeros(field_.shape)
    for z in off:
        acc += np.abs(np.roll(field_, tuple(-z), axis=tuple(range(d))) - field_)
    return acc / len(off)


def sublinearity_check(bundle, n_list, center=(0,), with_sigma: bool = True) -> dict:
    """Sequence ``n^-1 avg_{B_n} |(phi, sigma) - (phi, sigma)(centre)|``.

    The torus has no preferred gauge, so the fields are anchored at the ball
    centre; ``center=None`` averages the statistic over all centres.  The
    norm is Euclidean over ``phi_i`` and the stored ``sigma_ijk`` (j < k).
    """
    phi = bundle.phi
    d, L = phi.ndim, phi.shape[0]
    n_list = list(n_list)
    if max(n_list) > L / 4:
        raise GeometryError(f"n up to {max(n_list)} exceeds L/4 = {L / 4}")
    if center is not None:
        center = tuple(center) + (0,) * (d - len(tuple(center)))
    fields = [phi] + (list(bundle.sigma.values()) if with_sigma else [])
    vals = []
    for n in n_list:
        if len(fields) == 1:
            m = _anchored_ball_mean(phi, n, center)
        else:
            # Euclidean norm of the anchored vector of fields
            off = ball_offsets(d, _r2(n))
            if center is None:
                acc = np.zeros(phi.shape)
                for z in off:
                    sq = sum((np.roll(f, tuple(-z), axis=tuple(range(d))) - f) ** 2 for f in fields)
                    acc += np.sqrt(sq)
                m = acc / len(off)
            else:
                B = ball(center, n, L)
                sq = sum((f[B.vertex_index()] - f[center]) ** 2 for f in fields)
                m = np.sqrt(sq).mean()
        vals.append(float(np.mean(m)) / n)
    vals = np.array(vals)
    slope = float(np.polyfit(np.log(n_list), np.log(vals), 1)[0]) if len(n_list) >= 2 and (vals > 0).all() else math.nan
    return dict(probe="sublinearity", n=n_list, values=vals.tolist(), slope=slope,
                ratio_last_first=float(vals[-1] / vals[0]) if vals[0] > 0 else 0.0)


# --------------------------------------------------------------------------
# Averaged Poincare-Sobolev
# --------------------------------------------------------------------------

def avg_sobolev_probe(psi: np.ndarray, R: float, mu: float, S: float, s: float, x=None,
                      C_sob: float | None = None) -> dict:
    """Realised constant of the averaged Poincaré–Sobolev inequality on ``B_R(x)``.

    ``lhs = R^-1 (avg_{B_R} |psi - avg_{B_R} psi|^S)^(1/S)``,
    ``t1 = R^(-(1-tau)(1-mu)) (avg_{B_2R} |grad psi|^s)^(1/s)``,
    ``t2 = (avg_{y in B_R} |avg_{B_{R^mu}(y)} grad psi|^s)^(1/s)``,
    with ``tau = d (1/s - 1/S)``; the constant is ``lhs / (t1 + t2)``.
    """
    psi = np.asarray(psi, dtype=float)
    d, L = psi.ndim, psi.shape[0]
    tau = d * (1 / s - 1 / S)
    if not (0 <= tau <= 1):
        raise ConfigurationError(f"tau = d(1/s - 1/S) = {tau:.3g} must lie in [0, 1]")
    if not (0 < mu < 1):
        raise ConfigurationError("mu must lie in (0, 1)")
    if not 4 * R < L:
        raise GeometryError(f"need 2R < L/2, got R={R}, L={L}")
    x = (0,) * d if x is None else tuple(x)
    BR = ball(x, R, L).vertex_index()
    B2R = ball(x, 2 * R, L).vertex_index()
    vals = psi[BR]
    lhs = float(np.mean(np.abs(vals - vals.mean()) ** S) ** (1 / S) / R)
    g = forward_gradient(psi)
    gnorm = np.sqrt((g ** 2).sum(axis=0))
    t1 = float(R ** (-(1 - tau) * (1 - mu)) * np.mean(gnorm[B2R] ** s) ** (1 / s))
    r_in = R ** mu
    avg_g = np.stack([ball_average_field(c, r_in) for c in g])
    avg_norm = np.sqrt((avg_g ** 2).sum(axis=0))
    t2 = float(np.mean(avg_norm[BR] ** s) ** (1 / s))
    rhs = t1 + t2
    const = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    out = dict(probe="avg_sobolev", R=R, mu=mu, S=S, s=s, tau=tau, lhs=lhs, t1=t1, t2=t2, ratio=const)
    if C_sob is not None:
        out["pass"] = bool(const <= C_sob)
    return out
