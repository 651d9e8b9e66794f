"""Experiment runners behind the command line.

Each runner takes a validated :class:`ExperimentConfig` and returns an
:class:`ExperimentResult`: CSV rows (one per sample and radius/offset), JSON
records for the summary stream, human-readable summary lines and a status
(``"ok"``, ``"warn"`` or ``"fail"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calculus import forward_gradient, periodic_distance
from .config import ExperimentConfig
from .corrector import (compute_bundle, corrector_residual, save_bundles, sigma_divergence, solve_aux,
                        unit_field)
from .env import resample_vertex, sample_environment, stream
from .green import (fit_log_growth, gradient_decay_profile, green_difference, green_gradient_1d)
from .scales import (check_hole_filling, compute_r_diamond, compute_r_spade, meyers_pipeline,
                     spade_threshold)
from .sensitivity import Observable, representation_check_F1, representation_check_F2, spectral_gap_check
from .stats import corrector_growth, estimate_CR, sample_seed

__all__ = ["ExperimentResult", "run_experiment", "RUNNERS"]


@dataclass
class ExperimentResult:
    kind: str
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    @property
    def status(self) -> str:
        if self.failures:
            return "fail"
        return "warn" if self.warnings else "ok"


def _sample_env(spec, s):
    return sample_environment(spec.with_seed(sample_seed(spec, s)))


def _local_field(d: int, L: int, i: int, radius: float) -> np.ndarray:
    """``e_i`` on the vertex ball of the given radius around the box centre."""
    g = np.zeros((d,) + (L,) * d)
    g[i] = periodic_distance((L,) * d, (L // 2,) * d) <= radius
    return g


# --------------------------------------------------------------------------

def run_correctors(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("correctors")
    dirs = par.directions if par.directions is not None else list(range(spec.d))
    for i in dirs:
        if not 0 <= i < spec.d:
            res.failures.append(f"direction {i} outside 0..{spec.d - 1}")
            return res
    for s in range(cfg.ensemble.n_samples):
        env = _sample_env(spec, s)
        bundles = []
        for i in dirs:
            b = compute_bundle(env, i, tol, with_sigma=par.with_sigma)
            bundles.append(b)
            rep = b.reports["phi"]
            row = dict(sample=s, seed=env.spec.seed, direction=i, iterations=rep.iterations,
                       residual=corrector_residual(env, b), a_hom_ii=float(b.effective_flux()[i]),
                       sigma_div_err=math.nan)
            if b.sigma:
                q = b.flux
                err = sigma_divergence(b) - (q - q.reshape(spec.d, -1).mean(axis=1).reshape((spec.d,) + (1,) * spec.d))
                row["sigma_div_err"] = float(np.abs(err).max() / max(np.abs(q).max(), 1e-300))
                if row["sigma_div_err"] > 1e-6:
                    res.failures.append(f"sample {s} direction {i}: divergence identity error {row['sigma_div_err']:.2e}")
            if not rep.converged:
                res.failures.append(f"sample {s} direction {i}: solver did not converge")
            res.rows.append(row)
        if par.save_fields:
            path = outdir / f"fields_{s:04d}.rcmb"
            save_bundles(path, env, bundles)
            res.artifacts.append(path.name)
    a_hom = {i: float(np.mean([r["a_hom_ii"] for r in res.rows if r["direction"] == i])) for i in dirs}
    res.records.append(dict(record="effective_conductivity", mean_diagonal=a_hom, n_samples=cfg.ensemble.n_samples))
    res.summary.append("effective conductivity (mean of <q_i>_i): "
                       + ", ".join(f"i={i}: {v:.6g}" for i, v in a_hom.items()))
    res.summary.append(f"max corrector residual: {max(r['residual'] for r in res.rows):.3e}")
    return res


def run_scales(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("scales")
    cap = spec.L // 4
    ms = [m for m in range(1, 64) if 2 ** m <= cap]
    counts = np.zeros(len(ms))
    total = 0
    n_censored = 0
    for s in range(cfg.ensemble.n_samples):
        env = _sample_env(spec, s)
        rd = compute_r_diamond(env, C=par.C_diamond)
        raw = rd.raw.ravel()
        total += raw.size
        n_censored += int(rd.censored.sum())
        for k, m in enumerate(ms):
            counts[k] += int((raw >= 2 ** m).sum())
        row = dict(sample=s, seed=env.spec.seed, scale="diamond", median=float(np.median(raw)),
                   max=float(raw.max()), envelope_max=float(rd.radii.max()),
                   censored_fraction=float(rd.censored_fraction))
        res.rows.append(row)
        if par.spade:
            bundles = [compute_bundle(env, i, tol, with_sigma=False) for i in range(spec.d)]
            C = par.C_spade if par.C_spade is not None else 2.0 * spade_threshold(env, bundles)
            rs = compute_r_spade(env, bundles, C, rd)
            res.rows.append(dict(sample=s, seed=env.spec.seed, scale="spade", median=float(np.median(rs.raw)),
                                 max=float(rs.raw.max()), envelope_max=float(rs.radii.max()),
                                 censored_fraction=float(rs.censored_fraction)))
            n_censored += int(rs.censored.sum())
    tail = [dict(m=m, radius=2 ** m, probability=float(c / total)) for m, c in zip(ms, counts)]
    res.records.append(dict(record="r_diamond_tail", tail=tail, cap=cap, n_vertices=total))
    res.summary.append("P(r_diamond >= 2^m): " + ", ".join(f"m={t['m']}: {t['probability']:.4g}" for t in tail))
    if n_censored:
        res.warnings.append(f"{n_censored} vertex scales censored at the box cap")
    return res


def run_sensitivity(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("sensitivity")
    d, L = spec.d, spec.L
    for t in range(par.n_trials):
        env = _sample_env(spec, t)
        rng = stream(spec.seed, "sensitivity-trial", t)
        # resample near the support of g so that the derivative is not negligible
        reach = par.support_radius + 1
        x = tuple(int(L // 2 + c) % L for c in rng.integers(-reach, reach + 1, d))
        i = int(rng.integers(0, d))
        env_x = resample_vertex(env, x, t)
        g = _local_field(d, L, i, par.support_radius)
        for kind in par.observables:
            if kind == "F1":
                rep = representation_check_F1(env, env_x, i, g, tol)
            elif d >= 2:
                j, k = sorted(int(c) for c in rng.choice(d, 2, replace=False))
                rep = representation_check_F2(env, env_x, i, j, k, g, tol)
            else:
                continue
            res.rows.append(dict(trial=t, seed=env.spec.seed, observable=kind, vertex="-".join(map(str, x)),
                                 direct=rep["direct"], rep=rep["rep"], gap=rep["gap"], threshold=rep["threshold"],
                                 passed=rep["passed"]))
            if not rep["passed"]:
                res.failures.append(f"trial {t} {kind}: gap {rep['gap']:.3e} > {rep['threshold']:.1e}")
    worst = {k: max((r["gap"] for r in res.rows if r["observable"] == k), default=0.0) for k in par.observables}
    res.records.append(dict(record="representation", worst_gap=worst, n_trials=par.n_trials))
    res.summary.append("worst relative representation gaps: " + ", ".join(f"{k}: {v:.3e}" for k, v in worst.items()))
    return res


def run_clt_scan(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("clt-scan")
    st = estimate_CR(spec, par.R_list, par.direction, cfg.ensemble.n_samples, par.p_list, tol,
                     with_sigma=par.with_sigma, guard=par.guard, centers=par.centers,
                     threads=cfg.ensemble.resolved_threads())
    for rec in st.records:
        for k, R in enumerate(st.R_list):
            row = dict(sample=rec["sample"], seed=rec["seed"], R=R, C_R_origin=rec["origin"][k],
                       C_R_origin_phisigma=rec["origin_phisigma"][k])
            for p in st.p_list:
                row[f"mean_C_R_pow{p:g}"] = rec["phi"][f"{p:g}"][k]
                row[f"mean_C_R_phisigma_pow{p:g}"] = rec["phisigma"][f"{p:g}"][k]
            res.rows.append(row)
    for key, by_p in st.norms.items():
        for p, norms in by_p.items():
            res.records.append(dict(record="moment_norm", statistic=key, p=p, R=st.R_list,
                                    norms=[m.to_dict() for m in norms]))
            res.summary.append(f"E[C_R^{p:g}]^(1/{p:g}) [{key}]: " + ", ".join(
                f"R={R:g}: {m.value:.4g} [{m.ci_lo:.4g}, {m.ci_hi:.4g}]{' NON-CONVERGENT' if m.non_convergent else ''}"
                for R, m in zip(st.R_list, norms)))
    for name, fit in st.fits.items():
        res.records.append(dict(record="fit", name=name, **fit))
        res.summary.append(f"{name}: slope {fit['slope']:.4f} CI [{fit['ci_lo']:.4f}, {fit['ci_hi']:.4f}]")
    res.warnings.extend(st.warnings)
    return res


def run_growth(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("growth")
    g = corrector_growth(spec, par.direction, par.x_list, par.p, cfg.ensemble.n_samples, tol, guard=par.guard,
                         threads=cfg.ensemble.resolved_threads())
    for rec in g["records"]:
        for r, v in zip(g["x"], rec["values"]):
            res.rows.append(dict(sample=rec["sample"], seed=rec["seed"], x=r, mean_abs_increment_pow=v))
    res.records.append(dict(record="growth_curve", d=spec.d, p=par.p, x=g["x"],
                            curve=[m.to_dict() for m in g["curve"]], fits=g["fits"]))
    res.summary.append(f"E|phi(x)-phi(0)|^{par.p:g} norms: " + ", ".join(
        f"{r}: {m.value:.4g}" for r, m in zip(g["x"], g["curve"])))
    for name, fit in g["fits"].items():
        res.summary.append(f"fit {name}: c={fit['c']:.4g} R2={fit['r2']:.4f}")
    return res


def run_green(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par = cfg.spec(), cfg.typed_params
    res = ExperimentResult("green")
    d, L = spec.d, spec.L
    sweep = []
    for r in par.radii:
        x = [0] * d
        x[0] = int(r)
        if d == 1:
            norm = float(np.sqrt((green_gradient_1d(L, r) ** 2).sum()))
            exponent = math.nan
        else:
            gd = green_difference(L, d, x)
            norm = gd.l2_norm()
            exponent = gradient_decay_profile(gd)["exponent"] if 4 * r <= L / 4 else math.nan
        sweep.append((float(r), norm))
        res.rows.append(dict(x=r, norm=norm, norm_sq=norm ** 2, far_exponent=exponent))
    rec = dict(record="green_norm", d=d, L=L, radii=[s[0] for s in sweep], norms=[s[1] for s in sweep])
    if d == 2 and len(sweep) >= 2:
        rec["log_fit"] = fit_log_growth(sweep)
        res.summary.append(f"||grad h_x||^2 = {rec['log_fit']['alpha']:.4f} log|x| + {rec['log_fit']['beta']:.4f}")
    res.records.append(rec)
    res.summary.append("||grad h_x||: " + ", ".join(f"{r:g}: {n:.4g}" for r, n in sweep))
    return res


def run_meyers(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("meyers")
    d, L = spec.d, spec.L
    f = _local_field(d, L, 0, par.source_radius)
    kw = {} if par.q_max is None else {"q_max": par.q_max}
    for s in range(cfg.ensemble.n_samples):
        env = _sample_env(spec, s)
        rd = compute_r_diamond(env)
        aux = solve_aux(env, f, "u", tol)
        mp = meyers_pipeline(env, forward_gradient(aux.u), f, rd, **kw)
        row = dict(sample=s, seed=env.spec.seed, status=mp["status"], C=mp.get("C", math.nan),
                   q_bar=mp.get("q_bar", math.nan), beta_hat=mp["beta_hat"], censored=mp.get("censored", False))
        b = compute_bundle(env, 0, tol, with_sigma=False)
        grad = b.grad_phi + unit_field(d, env.spec.shape, 0)
        for R in par.hole_filling_R:
            hf = check_hole_filling(env.a, grad, (0,) * d, R)
            row[f"alpha_R{R:g}"] = hf["alpha"]
            if not hf["passed"]:
                res.failures.append(f"sample {s}: hole-filling exponent {hf['alpha']} at R={R:g}")
        res.rows.append(row)
        if mp["status"] == "OK" and not mp["beta_hat"] > 1:
            res.failures.append(f"sample {s}: beta_hat {mp['beta_hat']:.3f} <= 1")
        if mp.get("censored"):
            res.warnings.append(f"sample {s}: Gehring exponent censored at q_max")
        if mp["status"] != "OK":
            res.warnings.append(f"sample {s}: Gehring probe {mp['status']}")
    betas = [r["beta_hat"] for r in res.rows]
    res.records.append(dict(record="meyers", beta_hat=betas, min_beta_hat=float(np.nanmin(betas)),
                            hole_filling_R=par.hole_filling_R,
                            alpha={f"{R:g}": [r[f"alpha_R{R:g}"] for r in res.rows] for R in par.hole_filling_R}))
    res.summary.append(f"beta_hat min {np.nanmin(betas):.4f} max {np.nanmax(betas):.4f}")
    for R in par.hole_filling_R:
        res.summary.append(f"hole-filling alpha at R={R:g}: mean {np.mean([r[f'alpha_R{R:g}'] for r in res.rows]):.4f}")
    return res


def run_spectral_gap(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    spec, par, tol = cfg.spec(), cfg.typed_params, cfg.solver.tol
    res = ExperimentResult("spectral-gap")
    d, L = spec.d, spec.L
    if par.observable == "edge":
        obs = Observable("edge", edge=tuple(par.edge))
    else:
        g = np.zeros((d,) + (L,) * d)
        g[tuple(par.edge)] = 1.0
        obs = Observable(par.observable, g=g, tol=min(tol, 1e-10), j=0, k=min(1, d - 1))
    rep = spectral_gap_check(obs, spec, mode=par.mode, n_samples=cfg.ensemble.n_samples, n_inner=par.n_inner,
                             p_list=par.p_list)
    out = rep.to_dict()
    out["p_ratios"] = {str(k): v for k, v in out["p_ratios"].items()}
    out["margin"] = rep.bound - rep.variance
    res.rows.append(dict(mode=rep.mode, observable=par.observable, variance=rep.variance, bound=rep.bound,
                         margin=rep.bound - rep.variance, ratio=rep.ratio, holds=rep.holds))
    res.records.append(dict(record="spectral_gap", observable=par.observable, **out))
    res.summary.append(f"Var X = {rep.variance:.6g} <= 1/2 E sum |D_x X|^2 = {rep.bound:.6g}: {rep.holds} "
                       f"(margin {rep.bound - rep.variance:.3g})")
    res.summary.append("higher-moment ratios with constant 4p^2: " + ", ".join(
        f"p={k}: {v:.4g}" for k, v in rep.p_ratios.items()))
    if not rep.holds:
        res.failures.append("spectral-gap inequality violated")
    return res


RUNNERS = {
    "correctors": run_correctors,
    "scales": run_scales,
    "sensitivity": run_sensitivity,
    "clt-scan": run_clt_scan,
    "growth": run_growth,
    "green": run_green,
    "meyers": run_meyers,
    "spectral-gap": run_spectral_gap,
}


def run_experiment(cfg: ExperimentConfig, outdir: Path) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg, Path(outdir))
