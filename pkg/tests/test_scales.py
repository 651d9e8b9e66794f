import numpy as np
import pytest

from rcmlab.calculus import backward_divergence, ball
from rcmlab.calibration import (
    C_CACC,
    CACCIOPPOLI_BASELINE,
    SOBOLEV_BASELINE,
    calibrate_caccioppoli,
    calibrate_sobolev,
)
from rcmlab.corrector import compute_bundle, compute_corrector, unit_field
from rcmlab.errors import ConfigurationError, GeometryError
from rcmlab.green import green_difference
from rcmlab.scales import (
    caccioppoli_bound,
    check_caccioppoli,
    check_hole_filling,
    check_r_diamond,
    compute_r_diamond,
    compute_r_spade,
    energy_density,
    gehring_probe,
    lipschitz_envelope,
    maximal_function,
    meyers_exponent,
    spade_threshold,
    weak_type_constants,
)
from rcmlab.solver import solve_weighted

from conftest import make_env


# --------------------------------------------------------------------------
# r_diamond
# --------------------------------------------------------------------------

def test_r_diamond_constant_env_is_two():
    f = compute_r_diamond(make_env("constant", d=2, L=32))
    assert np.all(f.radii == 2) and np.all(f.raw == 2)
    assert f.censored_fraction == 0.0


def test_r_diamond_moment_control_bernoulli():
    env = make_env("bernoulli", d=2, L=64, seed=1)
    f = compute_r_diamond(env)
    rep = check_r_diamond(env, f)
    assert rep["factor"] == 2 * 18 ** 2
    assert rep["passed"], rep


@pytest.mark.parametrize("law, d", [("pareto", 2), ("lognormal", 2), ("uniform", 3)])
def test_r_diamond_lipschitz_and_dyadic(law, d):
    env = make_env(law, d=d, L=32 if d == 2 else 16, seed=2)
    f = compute_r_diamond(env)
    raw = f.raw
    assert np.all(np.log2(raw) == np.round(np.log2(raw)))
    assert raw.min() >= 2
    assert np.all(f.radii >= 2) and np.all(f.radii <= raw)
    for i in range(d):
        jump = np.abs(np.roll(f.radii, -1, axis=i) - f.radii).max()
        assert jump <= 1 / 8 + 1e-12


def test_lipschitz_envelope_exact_small_case():
    raw = np.full((16, 16), 8.0)
    raw[3, 4] = 2.0
    env = lipschitz_envelope(raw)
    y, x = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    dy = np.minimum(np.abs(y - 3), 16 - np.abs(y - 3))
    dx = np.minimum(np.abs(x - 4), 16 - np.abs(x - 4))
    assert np.allclose(env, np.minimum(8.0, 2.0 + np.hypot(dy, dx) / 8))


def test_r_diamond_censoring_and_warning():
    # demanding window: every vertex is censored at L/4
    env = make_env("pareto", d=2, L=16, seed=3)
    with pytest.warns(RuntimeWarning):
        f = compute_r_diamond(env, C=1e-9)
    assert f.censored.all() and np.all(f.raw == 4)


# --------------------------------------------------------------------------
# r_spade
# --------------------------------------------------------------------------

def test_r_spade_constant_env():
    env = make_env("constant", d=2, L=32)
    bundles = [compute_bundle(env, i, with_sigma=False) for i in range(2)]
    rd = compute_r_diamond(env)
    rs = compute_r_spade(env, bundles, 1.0, rd)
    assert np.all(rs.radii == 2)


def test_r_spade_one_dimensional_energy_closed_form():
    env = make_env("bernoulli", d=1, L=64, seed=4)
    b = compute_corrector(env, 0, tol=1e-12)
    a = env.a[0]
    qbar = 1 / np.mean(1 / a)
    dens = a * b.grad_phi[0] ** 2
    assert np.allclose(dens, qbar ** 2 / a - 2 * qbar + a, atol=1e-9)


def test_r_spade_monotone_in_constant_and_above_diamond():
    env = make_env("lognormal", d=2, L=64, seed=5)
    bundles = [compute_bundle(env, i, with_sigma=False) for i in range(2)]
    rd = compute_r_diamond(env)
    thr = spade_threshold(env, bundles)
    prev = None
    for C in (1.1 * thr, 2 * thr, 8 * thr):
        rs = compute_r_spade(env, bundles, C, rd)
        assert np.all(rs.radii >= rd.radii)
        if prev is not None:
            assert np.all(rs.radii <= prev)
        prev = rs.radii
    with pytest.raises(ConfigurationError):
        compute_r_spade(env, bundles, 0.5 * thr, rd)


# --------------------------------------------------------------------------
# maximal function
# --------------------------------------------------------------------------

def test_maximal_function_constant():
    assert np.allclose(maximal_function(np.full((16, 16), 3.0)), 3.0)
    assert np.allclose(maximal_function(np.full((16, 16), 3.0), p=2.0), 3.0)


def test_maximal_function_of_delta_decays_like_inverse_volume():
    L = 64
    g = np.zeros((L, L))
    g[0, 0] = 1.0
    Mg = maximal_function(g)
    r = np.array([4, 8, 16])
    vals = np.array([Mg[k, 0] for k in r])
    slope = np.polyfit(np.log(r), np.log(vals), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.25)
    # dyadic radii make M g a staircase; |x|^d M g(x) stays within a fixed band
    scaled = np.array([k ** 2 * Mg[k, 0] for k in range(2, 25)])
    assert scaled.max() / scaled.min() <= 8.0
    assert Mg.max() == 1.0


def test_weak_type_constants_bounded():
    env = make_env("pareto", d=2, L=32, seed=6)
    g = env.a.sum(axis=0)
    rep = weak_type_constants(g)
    assert 0 < rep["c1"] <= rep["c2"] < 100


def test_maximal_function_rejects_negative():
    with pytest.raises(ConfigurationError):
        maximal_function(-np.ones((8, 8)))


# --------------------------------------------------------------------------
# Caccioppoli
# --------------------------------------------------------------------------

def test_caccioppoli_constant_u_ratio_zero():
    a = make_env("uniform", d=2, L=16).a
    assert check_caccioppoli(a, np.full((16, 16), 2.0), None, 2)["ratio"] == 0.0


def test_caccioppoli_green_difference_constant_env():
    L = 64
    gd = green_difference(L, 2, (8, 0))
    ones = np.ones((2, L, L))
    for r in (1, 2, 4, 8):
        for c in [(32, 32), (40, 20), (24, 8)]:
            rep = check_caccioppoli(ones, gd.field, None, r, c, C_cacc=C_CACC)
            assert rep["pass"], rep


@pytest.mark.parametrize("law", ["pareto", "lognormal", "bernoulli"])
def test_caccioppoli_degenerate_env_correctors(law):
    env = make_env(law, d=2, L=32, seed=7)
    worst = 0.0
    for i in range(2):
        b = compute_corrector(env, i)
        f = env.a * unit_field(2, (32, 32), i)
        for r in (1, 2, 4):
            for c in [(0, 0), (16, 16), (5, 27)]:
                rep = check_caccioppoli(env.a, b.phi, f, r, c, C_cacc=C_CACC)
                assert rep["ratio"] <= caccioppoli_bound(32, 2, r)
                worst = max(worst, rep["ratio"])
    assert worst <= C_CACC


def test_caccioppoli_rigorous_bound_random_sources():
    rng = np.random.default_rng(8)
    for t in range(10):
        env = make_env("lognormal", d=2, L=16, seed=100 + t)
        f = rng.standard_normal((2, 16, 16))
        u, _ = solve_weighted(env, backward_divergence(f), tol=1e-12)
        for r in (1, 2, 3):
            rep = check_caccioppoli(env.a, u, f, r, tuple(rng.integers(0, 16, 2)))
            assert rep["ratio"] <= caccioppoli_bound(16, 2, r)


def test_caccioppoli_geometry_guard():
    with pytest.raises(GeometryError):
        check_caccioppoli(np.ones((2, 16, 16)), np.zeros((16, 16)), None, 4)


def test_calibration_regression():
    assert calibrate_caccioppoli() == pytest.approx(CACCIOPPOLI_BASELINE, abs=1e-6)
    assert calibrate_sobolev() == pytest.approx(SOBOLEV_BASELINE, abs=1e-6)


# --------------------------------------------------------------------------
# hole filling, Gehring, Meyers
# --------------------------------------------------------------------------

def test_hole_filling_anchor_ratio_one():
    L = 64
    gd = green_difference(L, 2, (4, 0))
    rep = check_hole_filling(np.ones((2, L, L)), gd.gradient, (32, 32), 16)
    assert rep["radii"][-1] == 16
    assert rep["energy"][-1] / rep["energy"][-1] == 1.0


def test_hole_filling_constant_env_green_far_from_poles():
    L = 128
    gd = green_difference(L, 2, (4, 0))
    rep = check_hole_filling(np.ones((2, L, L)), gd.gradient, (64, 64), 16)
    assert rep["alpha"] > 0 and rep["passed"]
    assert rep["beta_prime"] == pytest.approx(2 / rep["alpha"])


def test_hole_filling_positive_on_degenerate_ensemble():
    for seed in range(4):
        env = make_env("pareto", d=2, L=64, seed=seed)
        b = compute_corrector(env, 0)
        g = b.grad_phi + unit_field(2, (64, 64), 0)
        for x in [(0, 0), (32, 32)]:
            assert check_hole_filling(env.a, g, x, 16)["alpha"] > 0


def test_gehring_constant_pair_all_pass():
    U = np.full((32, 32), 2.0)
    rep = gehring_probe(U, U, 1.5, q_max=3.0)
    assert rep["status"] == "OK" and rep["C"] <= 1e-12
    assert rep["censored"] and rep["q_bar"] == pytest.approx(3.0)
    assert np.all(np.array(rep["K"]) <= 1 + rep["C"])


def test_gehring_spike_q_bar_nonincreasing():
    qbars = []
    for H in (1.0, 10.0, 100.0, 1000.0):
        U = np.ones((32, 32))
        U[16, 16] += H
        rep = gehring_probe(U, np.zeros((32, 32)), 1.5, q_max=6.0)
        assert rep["status"] == "OK"
        qbars.append(rep["q_bar"])
    assert all(np.isfinite(qbars))
    assert all(b <= a + 1e-12 for a, b in zip(qbars, qbars[1:]))
    assert qbars[0] < 6.0


def test_meyers_exponent_values():
    assert meyers_exponent(1) == 0.75
    assert meyers_exponent(2) == pytest.approx(6 / 8)
    assert meyers_exponent(3) == pytest.approx(12 / 14)


def test_energy_density_constant_env():
    g = np.random.default_rng(9).standard_normal((2, 8, 8))
    assert np.allclose(energy_density(np.ones((2, 8, 8)), g), (g ** 2).sum(axis=0))


def test_edge_ball_edges_lie_inside_vertex_ball():
    L = 16
    B = ball((0, 0), 3, L)
    inside = np.zeros((L, L), dtype=bool)
    inside[B.vertex_index()] = True
    dirs, *pos = B.edge_index()
    for i, x, y in zip(dirs, *pos):
        end = [x, y]
        end[i] = (end[i] + 1) % L
        assert inside[x, y] and inside[tuple(end)]
