import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cems_forge.geometry import ArrayGeometry, GlobalConfig
from cems_forge.phase_profiles import PhaseProfile
from cems_forge.unstructured import (AscentConfig, ScenarioDistribution, _project_elliptope,
                                     alignment_phases, average_coverage, average_se, brute_force_oracle,
                                     build_distribution, coordinate_ascent, elliptope_penalty_ascent,
                                     evaluate, nuclear_minus_spectral, quantization_lipschitz_bound,
                                     smoothed_coverage)

from helpers import physical_instance, random_cascade

FAST = AscentConfig(max_sweeps=40, restarts=2, seed=1)


def scalar_se(phases, C, w, zeta):
    total = 0.0
    for x in range(C.shape[0]):
        s = sum(C[x, l] * complex(math.cos(phases[l]), math.sin(phases[l])) for l in range(C.shape[1]))
        total += w[x] * math.log2(1 + zeta * abs(s) ** 2)
    return total


# -- distributions ---------------------------------------------------------------

def test_distribution_validation():
    with pytest.raises(ValueError):
        ScenarioDistribution(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValueError):
        ScenarioDistribution(np.ones((2, 3)), [0.3, 0.3])
    with pytest.raises(ValueError):
        ScenarioDistribution(np.ones((2, 3)), [1.0])


def test_subset_renormalizes(rng):
    d = random_cascade(rng, 5, 3)
    s = d.subset([1, 3])
    assert s.size == 2 and s.weights.sum() == pytest.approx(1.0)
    assert np.array_equal(s.cascade, d.cascade[[1, 3]])


def test_build_distribution_paths_agree(rng):
    dist, geom = physical_instance(rng, X=2, M=4, N=4)
    lam = GlobalConfig().wavelength_m
    arr = ArrayGeometry(8, lam / 2)
    slow_rx = ArrayGeometry(8, lam / 2 * (1 + 1e-15))  # defeats the shared-array fast path
    slow = build_distribution(dist.placements, geom, arr, slow_rx, lam)
    assert np.allclose(dist.cascade, slow.cascade, rtol=1e-9, atol=0)
    with pytest.raises(ValueError):
        build_distribution([], geom, arr, arr, lam)


# -- objectives ------------------------------------------------------------------

def test_single_placement_se(cfg, rng):
    d = random_cascade(rng, 1, 6)
    ph = alignment_phases(d.cascade[0])
    snr = cfg.transmit_snr_linear * np.abs(d.cascade[0]).sum() ** 2
    assert average_se(ph, d, cfg) == pytest.approx(math.log2(1 + snr), rel=1e-12)
    doubled = ScenarioDistribution(np.vstack([d.cascade, d.cascade]), [0.5, 0.5])
    assert average_se(ph, doubled, cfg) == pytest.approx(average_se(ph, d, cfg), rel=1e-12)


def test_se_matches_scalar_recomputation(cfg, rng):
    d = random_cascade(rng, 3, 5)
    d = ScenarioDistribution(d.cascade, [0.2, 0.5, 0.3])
    ph = rng.uniform(0, 2 * np.pi, 5)
    assert average_se(ph, d, cfg) == pytest.approx(scalar_se(ph, d.cascade, d.weights, cfg.transmit_snr_linear),
                                                   rel=1e-12)


def test_coverage_limits_and_counting(rng):
    d = random_cascade(rng, 4, 3)
    ph = np.zeros(3)
    assert average_coverage(ph, d, GlobalConfig(coverage_threshold_db=-300)) == 1.0
    assert average_coverage(ph, d, GlobalConfig(coverage_threshold_db=300)) == 0.0
    cfg = GlobalConfig(coverage_threshold_db=0.0)
    unit = 1 / math.sqrt(cfg.transmit_snr_linear)
    C = np.array([[3 * unit], [2 * unit], [0.5 * unit], [0.1 * unit]])
    assert average_coverage(np.zeros(1), ScenarioDistribution(C, np.full(4, 0.25)), cfg) == 0.5


def test_smoothed_coverage_converges_to_indicator(rng):
    cfg = GlobalConfig(coverage_threshold_db=5.0)
    d = random_cascade(rng, 200, 4, snr_db=5.0)
    ph = rng.uniform(0, 2 * np.pi, 4)
    exact = average_coverage(ph, d, cfg)
    assert abs(smoothed_coverage(ph, d, cfg, 5.0 / 100) - exact) < 0.01
    assert evaluate("coverage", ph, d, cfg) == exact
    with pytest.raises(ValueError):
        evaluate("throughput", ph, d, cfg)


@given(st.floats(-20, 20))
def test_objectives_ignore_common_phase(c):
    rng = np.random.default_rng(9)
    cfg = GlobalConfig(coverage_threshold_db=8.0)
    d = random_cascade(rng, 6, 5)
    ph = rng.uniform(0, 2 * np.pi, 5)
    for obj in ("se", "coverage_smoothed"):
        assert abs(evaluate(obj, ph + c, d, cfg) - evaluate(obj, ph, d, cfg)) < 1e-10
    assert average_coverage(ph + c, d, cfg) == average_coverage(ph, d, cfg)


# -- coordinate ascent -----------------------------------------------------------

def test_ascent_finds_single_placement_alignment(cfg, rng):
    d = random_cascade(rng, 1, 8)
    res = coordinate_ascent("se", d, cfg, FAST)
    best = average_se(alignment_phases(d.cascade[0]), d, cfg)
    assert best - res.objective < 1e-6


def test_ascent_histories_are_monotone(cfg, rng):
    d = random_cascade(rng, 7, 10)
    res = coordinate_ascent("se", d, cfg, AscentConfig(restarts=3, seed=4))
    for hist in res.restart_histories:
        for stage in hist:
            assert np.all(np.diff(stage) >= -1e-12)


def test_ascent_fixed_point(cfg, rng):
    d = random_cascade(rng, 5, 6)
    res = coordinate_ascent("se", d, cfg, FAST)
    again = coordinate_ascent("se", d, cfg, AscentConfig(restarts=1, max_sweeps=5), init=res.profile)
    assert abs(again.objective - res.objective) < 1e-8


def test_smoothed_coverage_ascent_improves_coverage(rng):
    cfg = GlobalConfig(coverage_threshold_db=12.0)
    d = random_cascade(rng, 30, 8, snr_db=12.0)
    res = coordinate_ascent("coverage_smoothed", d, cfg, FAST)
    assert average_coverage(res.profile, d, cfg) >= average_coverage(np.zeros(8), d, cfg)
    assert len(res.history) == FAST.tau_stages


def test_quantized_ascent_stays_on_lattice(cfg, rng):
    d = random_cascade(rng, 3, 4)
    res = coordinate_ascent("se", d, cfg, FAST, levels=16)
    k = res.profile.phases_rad / (2 * np.pi / 16)
    assert np.allclose(k, np.round(k), atol=1e-9)


def test_ascent_config_validation():
    with pytest.raises(ValueError):
        AscentConfig(restarts=0)
    with pytest.raises(ValueError):
        AscentConfig(tolerance=0)


# -- brute force ------------------------------------------------------------------

def test_oracle_single_element(cfg, rng):
    d = random_cascade(rng, 1, 1)
    res = brute_force_oracle(d, cfg, 8)
    assert res.profile.phases_rad[0] == 0.0  # the only element is pinned; any phase is optimal


def test_oracle_two_elements_near_alignment(cfg, rng):
    d = random_cascade(rng, 1, 2)
    res = brute_force_oracle(d, cfg, 4)
    exact = average_se(alignment_phases(d.cascade[0]), d, cfg)
    assert exact >= res.objective >= exact - quantization_lipschitz_bound(d, cfg, 4)


def test_oracle_dominates_heuristics(cfg):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = random_cascade(rng, 3, 4)
        oracle = brute_force_oracle(d, cfg, 16)
        heur = coordinate_ascent("se", d, cfg, AscentConfig(restarts=2, seed=seed), levels=16)
        assert heur.objective <= oracle.objective + 1e-12
        assert oracle.objective - heur.objective <= quantization_lipschitz_bound(d, cfg, 16)
        assert average_se(oracle.profile, d, cfg) == pytest.approx(oracle.objective, rel=1e-12)


def test_oracle_guards(cfg, rng):
    with pytest.raises(ValueError):
        brute_force_oracle(random_cascade(rng, 2, 9), cfg, 2)
    with pytest.raises(ValueError):
        brute_force_oracle(random_cascade(rng, 2, 8), cfg, 16, max_points=1000)


def test_oracle_on_coverage(rng):
    cfg = GlobalConfig(coverage_threshold_db=10.0)
    d = random_cascade(rng, 5, 3, snr_db=10.0)
    res = brute_force_oracle(d, cfg, 8, objective="coverage")
    assert res.objective == average_coverage(res.profile, d, cfg)


# -- elliptope penalty --------------------------------------------------------------

def test_rank_one_has_zero_penalty(rng):
    v = np.exp(1j * rng.uniform(0, 2 * np.pi, 6))
    assert nuclear_minus_spectral(np.outer(v, v.conj())) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
def test_projection_lands_in_elliptope(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    V = _project_elliptope(A + A.conj().T)
    assert np.allclose(np.diag(V), 1.0)
    assert np.linalg.eigvalsh(V).min() > -1e-10
    assert nuclear_minus_spectral(V) >= -1e-12


def test_penalty_closes_rank_gap(cfg, rng):
    d = random_cascade(rng, 3, 4)
    res = elliptope_penalty_ascent(d, cfg, AscentConfig(seed=0))
    ca = coordinate_ascent("se", d, cfg, AscentConfig(seed=0))
    assert res.rank_gap_closed and res.rank_gap < 1e-8
    assert res.objective >= ca.objective - 1e-6
    assert res.objective <= res.relaxed_upper_bound + 1e-9
    assert res.relaxed_objective <= res.relaxed_upper_bound + 1e-9
    assert min(res.penalty_history) >= -1e-12


def test_relaxation_is_not_rank_one_on_conflicting_placements(cfg):
    unit = 10.0 / math.sqrt(cfg.transmit_snr_linear)
    # optimal phase vectors (0, 0) and (0, pi) are orthogonal
    C = unit * np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex)
    d = ScenarioDistribution(C, [0.5, 0.5])
    res = elliptope_penalty_ascent(d, cfg, AscentConfig(penalty_stages=0))
    assert res.rank_gap > 0.5
    assert not res.rank_gap_closed


def test_penalty_guard(cfg, rng):
    with pytest.raises(ValueError):
        elliptope_penalty_ascent(random_cascade(rng, 2, 20), cfg, L_guard=16)


def test_profile_objects_are_accepted(cfg, rng):
    d = random_cascade(rng, 2, 3)
    ph = rng.uniform(0, 6, 3)
    assert average_se(PhaseProfile(ph), d, cfg) == pytest.approx(average_se(ph, d, cfg))


def test_physical_instance_is_well_scaled(cfg, rng):
    d, _ = physical_instance(rng)
    se = average_se(coordinate_ascent("se", d, cfg, FAST).profile, d, cfg)
    assert 0.01 < se < 30
