import math
import os
import sys

import numpy as np
import pytest

# Add the repository root to the Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.fitkit import (
    MODELS,
    fit_cosine,
    fit_damped_cosine,
    fit_exponential,
    fit_fringe,
    fit_rate_params,
    rate_curves,
    rate_jacobian,
)


def test_cosine_recovers_rabi_oscillation():
    x = np.linspace(0, 1e-6, 101)
    y = 0.25 * np.cos(2 * np.pi * 4.3e6 * x + 0.3) + 0.75
    fit = fit_cosine(x, y)
    assert fit.converged
    assert fit["frequency"] == pytest.approx(4.3e6, rel=1e-6)
    assert fit["amplitude"] == pytest.approx(0.25, rel=1e-6)
    assert fit["phase"] == pytest.approx(0.3, abs=1e-6)
    assert fit["offset"] == pytest.approx(0.75, abs=1e-9)
    assert fit.units["frequency"] == "Hz"


def test_cosine_with_noise_reports_errors():
    rng = np.random.default_rng(4)
    x = np.linspace(0, 20e-6, 81)
    y = 0.4 * np.cos(2 * np.pi * 150e3 * x - 1.0) + 0.5 + rng.normal(0, 0.01, x.size)
    fit = fit_cosine(x, y, sigma=0.01)
    assert fit.converged
    assert fit["frequency"] == pytest.approx(150e3, rel=0.01)
    assert 0 < fit.stderr["frequency"] < 2e3
    assert abs(fit["frequency"] - 150e3) < 5 * fit.stderr["frequency"]


def test_cosine_phase_is_wrapped():
    x = np.linspace(0, 1.0, 50)
    y = np.cos(2 * np.pi * 3.0 * x + 3.0) + 1.0
    fit = fit_cosine(x, y)
    assert -math.pi <= fit["phase"] <= math.pi
    assert fit["phase"] == pytest.approx(3.0, abs=1e-6)


def test_cosine_held_parameter():
    x = np.linspace(0, 1.0, 40)
    y = 0.5 * np.cos(2 * np.pi * 2.0 * x) + 0.5
    fit = fit_cosine(x, y, hold={"offset": 0.5})
    assert fit.held == {"offset": 0.5}
    assert fit.stderr["offset"] == 0.0
    assert fit["frequency"] == pytest.approx(2.0, rel=1e-6)


def test_flat_data_is_not_identifiable():
    x = np.linspace(0, 1e-6, 20)
    fit = fit_cosine(x, np.full_like(x, 0.5))
    assert not fit.converged
    assert "flat" in fit.message
    assert fit.to_dict()["stderr"]["frequency"] is None


def test_too_few_points():
    with pytest.raises(ValueError):
        fit_cosine(np.arange(5.0), np.arange(5.0))
    with pytest.raises(ValueError):
        fit_exponential([0.0, 1.0], [1.0, 0.5])


def test_mismatched_or_bad_input():
    with pytest.raises(ValueError):
        fit_cosine(np.arange(10.0), np.arange(9.0))
    with pytest.raises(ValueError):
        fit_cosine(np.arange(10.0), np.full(10, np.nan))
    with pytest.raises(ValueError):
        fit_cosine(np.arange(10.0), np.arange(10.0), sigma=0.0)


def test_unsorted_input_is_accepted():
    x = np.linspace(0, 1.0, 60)
    y = 0.3 * np.cos(2 * np.pi * 4.0 * x) + 0.6
    order = np.random.default_rng(0).permutation(x.size)
    fit = fit_cosine(x[order], y[order])
    assert fit["frequency"] == pytest.approx(4.0, rel=1e-6)


def test_damped_cosine_recovers_free_induction_decay():
    x = np.linspace(0, 60e-6, 301)
    y = 0.25 * np.exp(-x / 50e-6) * np.cos(2 * np.pi * 150e3 * x) + 0.75
    fit = fit_damped_cosine(x, y)
    assert fit.converged
    assert fit["frequency"] == pytest.approx(150e3, rel=1e-5)
    assert fit["decay_time"] == pytest.approx(50e-6, rel=1e-5)
    assert fit["amplitude"] == pytest.approx(0.25, rel=1e-5)


@pytest.mark.parametrize("phase", [k * math.pi / 4 for k in range(-3, 5)])
def test_fringe_fit_recovers_phase_under_damping(phase):
    x = np.linspace(16.67e-6, 23.33e-6, 41)
    y = 0.3 * np.exp(-x / 50e-6) * np.cos(2 * np.pi * 150e3 * x + phase) + 0.5
    fit = fit_fringe(x, y, 150e3, 50e-6)
    assert fit.converged
    assert set(fit.held) == {"frequency", "decay_time"}
    assert math.remainder(fit["phase"] - phase, 2 * math.pi) == pytest.approx(0.0, abs=1e-6)
    assert fit["amplitude"] == pytest.approx(0.3, rel=1e-6)
    assert fit["offset"] == pytest.approx(0.5, abs=1e-9)


def test_fringe_fit_without_decay():
    x = np.linspace(0, 20e-6, 41)
    y = 0.2 * np.cos(2 * np.pi * 150e3 * x - 1.0) + 0.6
    fit = fit_fringe(x, y, 150e3, math.inf)
    assert fit["phase"] == pytest.approx(-1.0, abs=1e-6)
    assert fit["amplitude"] == pytest.approx(0.2, rel=1e-6)
    with pytest.raises(ValueError):
        fit_fringe(x, y, 0.0, math.inf)


def test_exponential_with_free_offset():
    x = np.linspace(0, 10e-3, 21)
    y = 0.5 * np.exp(-x / 3.3e-3) + 0.5
    fit = fit_exponential(x, y)
    assert fit.converged
    assert fit["decay_time"] == pytest.approx(3.3e-3, rel=1e-6)
    assert fit["offset"] == pytest.approx(0.5, abs=1e-8)


def test_exponential_with_fixed_offset():
    x = np.linspace(0, 10e-3, 21)
    y = 0.5 * np.exp(-x / 3.0e-3) + 0.5
    fit = fit_exponential(x, y, offset=0.5)
    assert fit.held == {"offset": 0.5}
    assert fit["offset"] == 0.5
    assert fit["decay_time"] == pytest.approx(3.0e-3, rel=1e-6)


def test_model_registry():
    assert set(MODELS) == {"cosine", "damped-cosine", "exponential"}


def test_rate_jacobian_matches_finite_differences():
    t = np.linspace(0, 2e-6, 21)
    params = np.array([1 / 0.17e-6, 1 / 0.92e-6, 1 / 1.6e-6])
    jac = rate_jacobian(t, *params)
    for k in range(3):
        step = np.zeros(3)
        step[k] = params[k] * 1e-6
        hi = np.concatenate(rate_curves(t, *(params + step)))
        lo = np.concatenate(rate_curves(t, *(params - step)))
        numeric = (hi - lo) / (2 * step[k])
        assert np.allclose(jac[:, k], numeric, atol=1e-12, rtol=1e-5)


def test_rate_fit_recovers_lifetimes():
    t = np.linspace(0, 3e-6, 61)
    truth = (1 / 0.17e-6, 1 / 0.92e-6, 1 / 1.6e-6)
    total, up = rate_curves(t, *truth)
    fit = fit_rate_params(t, total, up)
    assert fit.converged
    for name, value in zip(("alpha", "beta", "gamma"), truth):
        assert fit[name] == pytest.approx(value, rel=1e-4)


def test_rate_fit_with_noise():
    rng = np.random.default_rng(2024)
    t = np.linspace(0, 3e-6, 401)
    truth = (1 / 0.17e-6, 1 / 0.92e-6, 1 / 1.6e-6)
    total, up = rate_curves(t, *truth)
    total = total + rng.normal(0, 0.01, t.size)
    up = up + rng.normal(0, 0.01, t.size)
    fit = fit_rate_params(t, total, up, sigma=0.01)
    assert fit.converged
    for name, value in zip(("alpha", "beta", "gamma"), truth):
        assert fit[name] == pytest.approx(value, rel=0.02)


def test_rate_fit_flags_flat_data():
    t = np.linspace(0, 1e-6, 11)
    fit = fit_rate_params(t, np.full(11, 0.5), np.full(11, 0.5))
    assert not fit.converged


def test_rate_fit_input_checks():
    with pytest.raises(ValueError):
        fit_rate_params([0.0, 1e-7], [0.5], [0.5, 0.6])
    with pytest.raises(ValueError):
        fit_rate_params([-1e-7, 1e-7], [0.5, 0.6], [0.5, 0.6])
