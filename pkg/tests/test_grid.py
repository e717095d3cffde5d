import numpy as np
import pytest

from mfsocial.grid import (GridIncompatibleError, HorizonError, NoiseEnsemble,
                           PathEnsemble, build_grid, discounted_norm, read_ensemble,
                           shifted_value, tree_mean, tree_sum, window_mask,
                           write_ensemble)


def test_build_grid_basic():
    g = build_grid(1.0, 0.01, 0.1, 0.05)
    assert g.steps == 100
    assert g.m_delta == 10
    assert g.m_theta == 5
    assert g.history_len == 10


def test_build_grid_rejects_non_divisible_delay():
    with pytest.raises(GridIncompatibleError):
        build_grid(1.0, 0.01, 0.015, 0.0)


def test_build_grid_single_step_no_history():
    g = build_grid(1.0, 1.0, 0.0, 0.0)
    assert g.steps == 1
    assert g.history_len == 0


def _state_ensemble(g, M=3, dim=1):
    p = PathEnsemble.zeros(g, M, dim)
    hist = np.linspace(-1.0, -0.1, g.history_len).reshape(-1, dim)
    p.set_history(hist)
    for i in range(g.steps + 1):
        p.set(i, np.full((M, dim), float(i)))
    return p, hist


def test_shifted_value_history_and_identity():
    g = build_grid(1.0, 0.1, 0.5, 0.0)
    p, hist = _state_ensemble(g)
    # i=0 with lag -m_delta lands on the earliest history value
    assert shifted_value(p, 0, 0, -g.m_delta) == pytest.approx(hist[0])
    # lag 0 is the identity
    assert shifted_value(p, 1, 3, 0) == pytest.approx(3.0)
    # lags compose additively
    a = shifted_value(p, 0, 5, -2)
    b = shifted_value(p, 0, 3, 0)
    assert a == pytest.approx(b)


def test_shifted_value_forward_read_errors():
    g = build_grid(1.0, 0.1, 0.0, 0.0)
    p, _ = _state_ensemble(g)
    with pytest.raises(HorizonError):
        shifted_value(p, 0, g.steps, +1)


def test_window_masks():
    g = build_grid(1.0, 0.1, 0.0, 0.0)
    assert np.all(window_mask(g, "[0,T-delta]") == 1.0)
    g2 = build_grid(1.0, 0.1, 0.0, 1.0)
    m = window_mask(g2, "[theta,T]")
    assert m[-1] == 1.0 and np.all(m[:-1] == 0.0)
    g3 = build_grid(1.0, 0.1, 1.0, 0.0)
    m = window_mask(g3, "[0,T-delta]")
    assert m[0] == 1.0 and np.all(m[1:] == 0.0)


def test_discounted_norm_constant_rho_zero():
    g = build_grid(1.0, 0.001, 0.0, 0.0)
    p = PathEnsemble.zeros(g, 4, 1)
    p.values[:] = 1.0
    assert discounted_norm(p, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_discounted_norm_zero_paths():
    g = build_grid(1.0, 0.01, 0.0, 0.0)
    p = PathEnsemble.zeros(g, 4, 2)
    for rho in (-1.0, 0.0, 2.5):
        assert discounted_norm(p, rho) == 0.0


def test_discounted_norm_exponential_weight():
    # frozen from the closed form integral of e^{-s} over the unit interval
    g = build_grid(1.0, 0.001, 0.0, 0.0)
    p = PathEnsemble.zeros(g, 2, 1)
    p.values[:] = 1.0
    expected = np.sqrt(1.0 - np.exp(-1.0))  # 0.7950706...
    got = discounted_norm(p, 1.0)
    assert got == pytest.approx(expected, abs=2e-4)  # left-endpoint bias O(h)
    assert got == pytest.approx(0.79507, abs=1e-3)


def test_norm_equivalence_bands(rng):
    g = build_grid(1.0, 0.05, 0.0, 0.0)
    p = PathEnsemble.zeros(g, 8, 2)
    p.values[:] = rng.standard_normal(p.values.shape)
    base = discounted_norm(p, 0.0)
    for rho in (0.5, 1.7):
        v = discounted_norm(p, rho)
        assert np.exp(-rho * g.T / 2) * base <= v + 1e-12
        assert v <= base + 1e-12
    for rho in (-0.5, -1.7):
        v = discounted_norm(p, rho)
        assert base <= v + 1e-12
        assert v <= np.exp(-rho * g.T / 2) * base + 1e-12


def test_noise_regeneration_bit_identical():
    g = build_grid(1.0, 0.01, 0.0, 0.0)
    a = NoiseEnsemble.build(g, 16, seed=42)
    b = NoiseEnsemble.build(g, 16, seed=42)
    assert np.array_equal(a.dW, b.dW)
    c = NoiseEnsemble.build(g, 16, seed=43)
    assert not np.array_equal(a.dW, c.dW)


def test_noise_moments_within_five_sigma():
    g = build_grid(1.0, 0.1, 0.0, 0.0)
    M = 20000
    noise = NoiseEnsemble.build(g, M, seed=7)
    z = noise.dW / np.sqrt(g.h)
    n = z.size
    assert abs(z.mean()) < 5.0 / np.sqrt(n)
    assert abs(z.var() - 1.0) < 5.0 * np.sqrt(2.0 / n)


def test_tree_reduction_matches_numpy_and_is_chunk_free(rng):
    a = rng.standard_normal((37, 4))
    assert np.allclose(tree_sum(a), a.sum(axis=0), atol=1e-12)
    assert np.allclose(tree_mean(a), a.mean(axis=0), atol=1e-12)
    # identical result when the array arrives as differently-sized chunks
    whole = tree_sum(a)
    recomposed = tree_sum(np.concatenate([a[:13], a[13:]], axis=0))
    assert np.array_equal(whole, recomposed)


def test_ensemble_binary_roundtrip(tmp_path):
    g = build_grid(1.0, 0.25, 0.25, 0.0)
    p = PathEnsemble.zeros(g, 3, 2)
    p.values[:] = np.arange(p.values.size, dtype=float).reshape(p.values.shape)
    f = tmp_path / "ens.bin"
    write_ensemble(str(f), p)
    q = read_ensemble(str(f), g)
    assert np.array_equal(p.values, q.values)
