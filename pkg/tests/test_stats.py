import math
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcmlab.corrector import compute_bundle
from rcmlab.env import open_uniforms, sample_environment, stream
from rcmlab.errors import ConfigurationError, GeometryError
from rcmlab.stats import (
    N_BOOT,
    avg_sobolev_probe,
    bootstrap_indices,
    corrector_growth,
    estimate_CR,
    growth_sample,
    moment_norm,
    run_ensemble,
    sample_seed,
    scaling_fit,
    sublinearity_check,
)

from conftest import make_spec
from oracles import ball_mean_grad_sq_1d


# --------------------------------------------------------------------------
# moment norms and fits
# --------------------------------------------------------------------------

def test_moment_norm_constant_samples():
    m = moment_norm(np.full(10, -3.0), 2.0)
    assert m.value == pytest.approx(3.0)
    assert m.ci_lo == pytest.approx(3.0) and m.ci_hi == pytest.approx(3.0)
    assert not m.non_convergent


def test_moment_norm_hand_values():
    assert moment_norm([0.0, 2.0], 1.0).value == pytest.approx(1.0)
    assert moment_norm([0.0, 2.0], 2.0).value == pytest.approx(math.sqrt(2))


def test_moment_norm_uses_documented_bootstrap():
    x = np.random.default_rng(0).random(30)
    m = moment_norm(x, 2.0, seed=4)
    idx = bootstrap_indices(30, N_BOOT, 4)
    assert idx.shape == (1000, 30)
    boots = np.sqrt((x[idx] ** 2).mean(axis=1))
    assert (m.ci_lo, m.ci_hi) == tuple(np.quantile(boots, [0.025, 0.975]))


def test_moment_norm_heavy_tail_flagged():
    dist = make_spec("pareto").distribution
    a = dist.quantile(open_uniforms(stream(1, "heavy"), 200))
    m = moment_norm(a, 8.0, tail_index=8.0)
    assert m.non_convergent and "tail index" in m.reason
    assert not moment_norm(a, 2.0, tail_index=8.0).non_convergent
    # data-driven flag without a declared tail index: infinite-variance power
    b = dist.quantile(open_uniforms(stream(2, "heavy"), 200)) ** 8
    assert moment_norm(b, 1.0).rel_halfwidth > 0.25


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=40),
       st.floats(0.5, 4.0), st.floats(0.0, 4.0))
def test_moment_norm_monotone_in_p(xs, p1, dp):
    v1 = moment_norm(xs, p1, n_boot=10).value
    v2 = moment_norm(xs, p1 + dp, n_boot=10).value
    assert v1 <= v2 * (1 + 1e-12) + 1e-300


def test_moment_norm_input_checks():
    with pytest.raises(ConfigurationError):
        moment_norm([1.0], 2.0)
    with pytest.raises(ConfigurationError):
        moment_norm([1.0, 2.0], 0.0)


def test_scaling_fit_exact_power():
    x = np.array([1.0, 2, 4, 8, 16])
    fit = scaling_fit(x, x ** 2)
    assert fit["slope"] == pytest.approx(2.0)
    assert fit["ci_hi"] - fit["ci_lo"] == pytest.approx(0.0, abs=1e-12)
    assert scaling_fit(x, np.full(5, 3.0))["slope"] == pytest.approx(0.0, abs=1e-12)


def test_scaling_fit_noisy_inverse():
    rng = np.random.default_rng(1)
    x = np.geomspace(1, 100, 30)
    y = x ** -1.0 * (1 + 0.1 * rng.standard_normal(30))
    fit = scaling_fit(x, y)
    assert fit["slope"] == pytest.approx(-1.0, abs=0.1)
    assert fit["ci_lo"] <= -1.0 <= fit["ci_hi"]


def test_scaling_fit_input_checks():
    with pytest.raises(ConfigurationError):
        scaling_fit([1, 2], [1, 2])
    with pytest.raises(ConfigurationError):
        scaling_fit([1, 2, 3], [1, -2, 3])


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------

def test_sample_seeds_deterministic_and_distinct():
    spec = make_spec("uniform", seed=5)
    seeds = [sample_seed(spec, s) for s in range(50)]
    assert seeds == [sample_seed(spec, s) for s in range(50)]
    assert len(set(seeds)) == 50


def test_run_ensemble_worker_independent():
    spec = make_spec("uniform", d=2, L=16, seed=2)
    func = partial(growth_sample, spec=spec, i=0, x_list=[1, 2], p=2.0, tol=1e-8)
    serial = run_ensemble(func, 3, threads=1)
    pooled = run_ensemble(func, 3, threads=2)
    assert serial == pooled


def test_CR_constant_env_zero():
    st_ = estimate_CR(make_spec("constant", d=2, L=32), [2, 4], n_samples=2)
    assert st_.fits == {} and st_.warnings
    for p, norms in st_.norms["phi"].items():
        assert all(m.value == 0 for m in norms)


def test_CR_one_dimensional_exact_variance():
    L, R_list, n = 64, [2, 4, 8], 60
    spec = make_spec("bernoulli", d=1, L=L, seed=3)
    st_ = estimate_CR(spec, R_list, n_samples=n, p_list=(2,), tol=1e-10)
    norms = st_.norms["phi"][2]
    for R, m in zip(R_list, norms):
        exact = math.sqrt(R * ball_mean_grad_sq_1d(L, R))
        half = 0.5 * (m.ci_hi - m.ci_lo)
        assert abs(m.value - exact) <= 3 * half, (R, m, exact)
    # flat in R: every pair of CIs overlaps
    assert max(m.ci_lo for m in norms) <= min(m.ci_hi for m in norms)


def test_CR_geometry_guard():
    with pytest.raises(GeometryError):
        estimate_CR(make_spec("uniform", d=2, L=32), [2, 8], n_samples=2)


def test_CR_records_and_fits():
    spec = make_spec("uniform", d=2, L=32, seed=4)
    st_ = estimate_CR(spec, [1, 2, 4], n_samples=4, p_list=(1, 2))
    assert st_.n_samples == 4
    assert set(st_.fits) == {"avg_grad_slope", "CR_slope"}
    Y = st_.powers("phi", 2)
    assert Y.shape == (4, 3)
    assert np.all(st_.powers("phisigma", 2) >= Y)


def test_growth_zero_offset_and_1d_prediction():
    L = 1024
    spec = make_spec("bernoulli", d=1, L=L, seed=6)
    out = corrector_growth(spec, 0, [0, 4, 16, 64], n_samples=20, tol=1e-10)
    assert out["curve"][0].value == 0.0
    # i.i.d. increments: E|phi(x) - phi(0)|^2 ~ x Var(1/a) / E[1/a]^2
    c_pred = math.sqrt(0.0625) / 0.75
    assert out["fits"]["shape"]["c"] == pytest.approx(c_pred, rel=0.2)


def test_growth_guard():
    with pytest.raises(GeometryError):
        corrector_growth(make_spec("uniform", d=2, L=32), 0, [8], n_samples=2)


def test_sublinearity_constant_env():
    spec = make_spec("constant", d=2, L=32)
    b = compute_bundle(sample_environment(spec), 0)
    assert all(v == 0 for v in sublinearity_check(b, [1, 2, 4, 8])["values"])


def test_sublinearity_one_dimension_rate():
    spec = make_spec("bernoulli", d=1, L=1024, seed=7)
    b = compute_bundle(sample_environment(spec), 0, tol=1e-10)
    rep = sublinearity_check(b, [4, 8, 16, 32, 64, 128, 256], center=None)
    assert rep["slope"] == pytest.approx(-0.5, abs=0.15)


def test_sublinearity_two_dimensions_halves():
    ratios = []
    for seed in range(3):
        spec = make_spec("uniform", d=2, L=128, seed=seed)
        b = compute_bundle(sample_environment(spec), 0)
        ratios.append(sublinearity_check(b, [1, 2, 4, 8, 16, 32], center=(0, 0))["ratio_last_first"])
    assert np.median(ratios) <= 0.5


def test_sublinearity_guard():
    b = compute_bundle(sample_environment(make_spec("uniform", d=2, L=16)), 0)
    with pytest.raises(GeometryError):
        sublinearity_check(b, [2, 8])


# --------------------------------------------------------------------------
# averaged Poincare-Sobolev probe
# --------------------------------------------------------------------------

PARAMS = dict(S=3.0, s=1.5, mu=0.5)


def test_sobolev_constant_field():
    rep = avg_sobolev_probe(np.full((32, 32), 2.0), 4, **PARAMS)
    assert rep["lhs"] == 0.0 and rep["ratio"] == 0.0


def test_sobolev_homogeneous_of_degree_one():
    L = 64
    y, _ = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    psi = np.minimum(y, L - y).astype(float)
    r1 = avg_sobolev_probe(psi, 4, x=(16, 16), **PARAMS)
    r2 = avg_sobolev_probe(3.5 * psi, 4, x=(16, 16), **PARAMS)
    for key in ("lhs", "t1", "t2"):
        assert r2[key] == pytest.approx(3.5 * r1[key])
    assert r2["ratio"] == pytest.approx(r1["ratio"])


def test_sobolev_parameter_checks():
    psi = np.zeros((32, 32))
    with pytest.raises(ConfigurationError):
        avg_sobolev_probe(psi, 4, S=3.0, s=1.0, mu=0.5)
    with pytest.raises(ConfigurationError):
        avg_sobolev_probe(psi, 4, S=3.0, s=1.5, mu=1.0)
    with pytest.raises(GeometryError):
        avg_sobolev_probe(psi, 8, **PARAMS)
