import numpy as np
import pytest

from constrained_bsde.constraint import build_grids
from constrained_bsde.sde import (
    BlackScholesModel, euler_step, make_rng, sample_terminal_risk_neutral, simulate_paths,
)


def test_euler_step_examples():
    m = BlackScholesModel(mu=0.07, sigma=0.3)
    assert euler_step(m, 0.0, [1.0], 0.05, [0.0])[0] == pytest.approx(1.0035)
    m = BlackScholesModel(mu=0.0, sigma=1.0)
    assert euler_step(m, 0.0, [1.0], 0.01, [0.1])[0] == pytest.approx(1.1)
    m = BlackScholesModel(mu=0.07, sigma=0.3, x0=(1.0, 2.0))
    np.testing.assert_allclose(euler_step(m, 0.0, [1.0, 2.0], 0.05, [0.0, 0.0]), [1.0035, 2.007])


def test_path_shapes_and_start():
    m = BlackScholesModel(x0=(1.0, 2.0))
    b = simulate_paths(m, build_grids(1.0, 1, 1), 3, seed=1)
    assert b.states.shape == (3, 2, 2)
    assert b.increments.shape == (3, 1, 2)
    np.testing.assert_array_equal(b.states[:, 0], [[1.0, 2.0]] * 3)


def test_paths_reproducible():
    m = BlackScholesModel()
    g = build_grids(1.0, 20, 1)
    a = simulate_paths(m, g, 1000, seed=7, stream=(3,))
    b = simulate_paths(m, g, 1000, seed=7, stream=(3,))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.increments, b.increments)


def test_streams_independent():
    m = BlackScholesModel()
    g = build_grids(1.0, 1, 1)
    n = 20000
    a = simulate_paths(m, g, n, seed=7, stream=(1,)).increments.ravel()
    b = simulate_paths(m, g, n, seed=7, stream=(2,)).increments.ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 3 / np.sqrt(n)


def test_increment_moments():
    m = BlackScholesModel()
    b = simulate_paths(m, build_grids(1.0, 20, 1), 20000, seed=2)
    dB = b.increments
    n = dB.shape[0]
    assert np.all(np.abs(dB.mean(axis=0)) < 4 * np.sqrt(0.05 / n))
    # var of the sample variance of N(0, h) is 2h^2/(n-1)
    assert np.all(np.abs(dB.var(axis=0) - 0.05) < 4 * 0.05 * np.sqrt(2 / n))


def test_euler_terminal_mean_matches_lognormal_moment():
    m = BlackScholesModel(mu=0.07)
    xT = simulate_paths(m, build_grids(1.0, 20, 1), 100_000, seed=3).states[:, -1, 0]
    se = xT.std(ddof=1) / np.sqrt(len(xT))
    assert abs(xT.mean() - np.exp(0.07)) < 3 * se
    # the Euler mean recursion (1 + mu h)^n is what is actually simulated
    assert abs(xT.mean() - 1.0035**20) < 3 * se


def test_martingale_when_driftless():
    m = BlackScholesModel(mu=0.0)
    xT = simulate_paths(m, build_grids(1.0, 20, 1), 100_000, seed=4).states[:, -1, 0]
    assert abs(xT.mean() - 1.0) < 3 * xT.std(ddof=1) / np.sqrt(len(xT))


def test_risk_neutral_sampler():
    m = BlackScholesModel(r=0.05, sigma=0.3)
    x = sample_terminal_risk_neutral(m, 1.0, 1, None, z=np.zeros(1))
    assert x[0, 0] == pytest.approx(np.exp(0.005))
    x = sample_terminal_risk_neutral(m, 1.0, 1_000_000, make_rng(0))
    se = x.std(ddof=1) / np.sqrt(len(x))
    assert abs(x.mean() - np.exp(0.05)) < 3 * se


def test_risk_neutral_sampler_tiny_vol_is_deterministic_forward():
    m = BlackScholesModel(r=0.05, sigma=1e-12)
    x = sample_terminal_risk_neutral(m, 2.5, 100, make_rng(0))
    np.testing.assert_allclose(x, np.exp(0.05 * 2.5), rtol=1e-10)


def test_path_csv_dump(tmp_path):
    m = BlackScholesModel()
    b = simulate_paths(m, build_grids(1.0, 2, 1), 2, seed=0)
    p = tmp_path / "paths.csv"
    b.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "path_id,time,coord,value"
    assert len(lines) == 1 + 2 * 3
