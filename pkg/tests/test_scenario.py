import json

import numpy as np
import pytest

from conftest import make_scalar, make_two_type, scalar_doc, two_type_doc
from mfsocial.grid import build_grid
from mfsocial.scenario import (CoefficientPath, ScenarioStructureError, block_norms,
                               canonical_json, derived_coefficients, empirical_mix,
                               load_scenario, save_scenario, scenario_from_dict,
                               scenario_hash, validate_scenario)


# --- validation -----------------------------------------------------------

def test_validate_trivial_scalar_passes():
    sc = make_scalar(q=1.0, r=1.0, g=0.0, r_lag=0.5)
    report = validate_scenario(sc, r_min=1e-8)
    assert report.ok, report.summary()


def test_validate_mass_vector_must_sum_to_one():
    doc = two_type_doc(pi=(0.5, 0.4))
    sc = scenario_from_dict(doc)
    report = validate_scenario(sc)
    assert not report.ok
    assert any("A1.sums-to-one" == c.name for c in report.failures())


def test_validate_rejects_nonzero_control_weight_tail():
    doc = scalar_doc(theta=0.5, T=1.0, r_lag=0.5)
    # explicit nonzero value on the post-horizon tail
    doc["cost"]["R_lag"] = [{"times": [0.0, 1.25], "values": [[[0.5]], [[0.1]]]}]
    sc = scenario_from_dict(doc)
    report = validate_scenario(sc)
    assert not report.ok
    assert any("tail-zero" in c.name for c in report.failures())


def test_validate_r_min_witness():
    sc = make_scalar(r=1e-10, r_lag=0.0)
    report = validate_scenario(sc, r_min=1e-8)
    assert not report.ok
    assert any("R[0]-positive" in c.name for c in report.failures())


def test_structural_error_is_distinct():
    doc = scalar_doc()
    doc["cost"]["G"] = [[1.0, 0.0]]  # wrong shape
    with pytest.raises(ScenarioStructureError):
        scenario_from_dict(doc)


# --- empirical mixes ------------------------------------------------------

def test_exact_proportion_even_split():
    mix = empirical_mix(10, [0.5, 0.5])
    assert list(mix.counts) == [5, 5]
    assert mix.eps_N == 0.0


def test_exact_proportion_tie_break_lower_index():
    mix = empirical_mix(3, [0.5, 0.5])
    assert list(mix.counts) == [2, 1]
    assert mix.eps_N == pytest.approx(1.0 / 6.0)


def test_single_type():
    mix = empirical_mix(1, [1.0])
    assert mix.eps_N == 0.0
    assert list(mix.assignment) == [0]


def test_largest_remainder_eps_bound(rng):
    for _ in range(200):
        K = int(rng.integers(1, 6))
        w = rng.random(K) + 0.05
        pi = w / w.sum()
        N = int(rng.integers(1, 300))
        mix = empirical_mix(N, pi)
        assert mix.counts.sum() == N
        assert mix.eps_N <= K / N + 1e-12
        assert mix.pi_N.sum() == pytest.approx(1.0)


def test_iid_sample_mix_deterministic_per_seed():
    a = empirical_mix(50, [0.3, 0.7], policy="iid-sample", seed=5)
    b = empirical_mix(50, [0.3, 0.7], policy="iid-sample", seed=5)
    assert np.array_equal(a.assignment, b.assignment)


# --- derived coefficients --------------------------------------------------

def test_effective_control_weight_inside_window():
    sc = make_scalar(r=1.0, r_lag=0.5, theta=0.25, T=1.0)
    grid = build_grid(1.0, 0.25, 0.0, 0.25)
    dc = derived_coefficients(sc, grid)
    # t + theta <= T: both weights active
    assert dc.r_eff[0].at(0)[0, 0] == pytest.approx(1.5)
    # t + theta > T: the delayed weight vanishes on the tail
    assert dc.r_eff[0].at(grid.steps)[0, 0] == pytest.approx(1.0)


def test_quadratic_products_scalar():
    sc = make_scalar(b=2.0, d=0.0, r=1.0, r_lag=0.0)
    grid = build_grid(1.0, 0.5, 0.0, 0.0)
    dc = derived_coefficients(sc, grid)
    assert dc.bprod[0][1].at(0)[0, 0] == pytest.approx(4.0)
    assert dc.dprod[0][1].at(0)[0, 0] == pytest.approx(0.0)


def test_derived_coefficients_bit_identical():
    sc = make_two_type()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    a = derived_coefficients(sc, grid)
    b = derived_coefficients(sc, grid)
    assert np.array_equal(a.s_cross.arr, b.s_cross.arr)
    for k in range(2):
        assert np.array_equal(a.r_eff_inv[k].arr, b.r_eff_inv[k].arr)
        for j in range(1, 15):
            assert np.array_equal(a.bprod[k][j].arr, b.bprod[k][j].arr)


def test_inverse_weight_bounded_by_r_min(rng):
    for _ in range(20):
        r = float(rng.uniform(0.05, 3.0))
        rl = float(rng.uniform(0.0, 2.0))
        sc = make_scalar(r=r, r_lag=rl, theta=0.25, T=1.0)
        grid = build_grid(1.0, 0.25, 0.0, 0.25)
        dc = derived_coefficients(sc, grid)
        r_min = r  # the tail leaves R alone
        for i in range(-grid.m_theta, grid.steps + 1):
            assert np.linalg.norm(dc.r_eff_inv[0].at(i), 2) <= 1.0 / r_min + 1e-9


# --- block norms ------------------------------------------------------------

def test_block_norms_all_zero():
    sc = make_scalar(a=0.0, b=0.0, q=0.0, r=1.0, x0=0.0, xi_mean=0.0)
    grid = build_grid(1.0, 0.25, 0.0, 0.0)
    nb = block_norms(sc, grid)
    assert nb.rho1_star == pytest.approx(0.0)
    assert nb.rho2_star == pytest.approx(0.0)
    # all constants vanish except the control-gain products forced by B=0
    for i in range(1, 32):
        assert nb.k[i] == pytest.approx(0.0, abs=1e-14)


def test_block_norms_scalar_drift():
    sc = make_scalar(a=-1.5, b=0.0, q=0.0)
    grid = build_grid(1.0, 0.25, 0.0, 0.0)
    nb = block_norms(sc, grid)
    assert nb.rho1_star == pytest.approx(-1.5)
    assert nb.rho2_star == pytest.approx(-1.5)


def test_block_norms_mixing_block_two_types():
    # frozen via the singular value of the rank-one 2x2 matrix of halves
    sc = make_two_type(a_mix=1.0, pi=(0.5, 0.5), a=(0.0, 0.0), a_lag=(0.0, 0.0),
                       b=0.0, b_lag=0.0, b_mix=0.0, q=0.0, q_lag=0.0, s=0.0,
                       s_lag=0.0, g=0.0, gamma=0.0)
    grid = build_grid(1.0, 0.25, 0.0, 0.0)
    nb = block_norms(sc, grid)
    assert nb.k[2] == pytest.approx(1.0, abs=1e-12)


def test_norm_bundle_scaling_property(rng):
    sc = make_two_type()
    grid = build_grid(1.0, 0.1, 0.1, 0.1)
    base = block_norms(sc, grid)
    for s in (0.5, 2.0):
        nb = block_norms(sc.scaled(s), grid)
        for i in range(1, 20):
            assert nb.k[i] == pytest.approx(s * base.k[i], rel=1e-9, abs=1e-12)
        for i in range(20, 32):
            assert nb.k[i] ** 2 == pytest.approx(s**2 * base.k[i] ** 2, rel=1e-9, abs=1e-12)


# --- serialization -----------------------------------------------------------

def test_yaml_json_roundtrip(tmp_path):
    sc = make_two_type()
    y = tmp_path / "sc.yaml"
    save_scenario(str(y), sc)
    sc2 = load_scenario(str(y))
    assert canonical_json(sc) == canonical_json(sc2)
    j = tmp_path / "sc.json"
    save_scenario(str(j), sc2)
    sc3 = load_scenario(str(j))
    assert canonical_json(sc) == canonical_json(sc3)
    assert scenario_hash(sc) == scenario_hash(sc3)


def test_canonical_json_is_parseable_and_sorted():
    sc = make_scalar()
    doc = json.loads(canonical_json(sc))
    assert list(doc.keys()) == sorted(doc.keys())
