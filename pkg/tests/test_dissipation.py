import math
import os
import sys

import numpy as np
import pytest

# Add the repository root to the Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.dissipation import (
    MEASURED_RATES,
    DecayParams,
    Populations,
    RateParams,
    TelegraphModel,
    analytic_curves,
    analytic_populations,
    apply_laser,
    echo_phases,
    occupancy,
    optimal_laser_duration,
    populations_from_state,
    propagate_rates,
    rate_matrix,
    rates_from_table,
    sample_static_detunings,
    sample_t1_flips,
    state_from_populations,
    storage_decay_envelope,
)
from src.spin_core import QuantumState, RegisterParams

DEFAULTS = RegisterParams()
AFTER_SWAP = Populations(np.array([0.5, 0.0, 0.5, 0.0]))


def test_curves_start_from_the_swapped_state():
    curves = analytic_curves(MEASURED_RATES, [0.0])
    assert np.allclose(curves[0], [0.5, 0.0, 0.5, 0.0])


def test_curves_conserve_population():
    t = np.linspace(0, 5e-6, 201)
    curves = analytic_curves(MEASURED_RATES, t)
    assert np.allclose(curves.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(curves >= -1e-12)


def rk4_populations(rates, p0, t, steps=5000):
    m = rate_matrix(rates)
    p = np.array(p0, dtype=float)
    h = t / steps
    for _ in range(steps):
        k1 = m @ p
        k2 = m @ (p + 0.5 * h * k1)
        k3 = m @ (p + 0.5 * h * k2)
        k4 = m @ (p + h * k3)
        p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def test_closed_form_matches_matrix_exponential_and_integration():
    rng = np.random.default_rng(11)
    cases = [(RateParams(*rng.uniform(0.2e6, 8e6, 3)), rng.uniform(0, 3e-6)) for _ in range(17)]
    # alpha + beta == 2 gamma
    cases += [(RateParams(3e6, 1e6, 2e6), t) for t in (0.1e-6, 0.5e-6, 2e-6)]
    for rates, t in cases:
        closed = analytic_populations(rates, t).p
        numeric = propagate_rates(AFTER_SWAP, rates, t).p
        integrated = rk4_populations(rates, AFTER_SWAP.p, t)
        assert np.allclose(closed, numeric, atol=1e-7, rtol=0)
        assert np.allclose(closed, integrated, atol=1e-7, rtol=0)


def test_degenerate_branch_is_continuous():
    rates = RateParams(3e6, 1e6, 2e6)
    nearly = RateParams(3e6, 1e6 + 1e-3, 2e6)
    assert np.allclose(analytic_populations(nearly, 1e-6).p, analytic_populations(rates, 1e-6).p, atol=1e-9)


def test_polarization_peak_with_fitted_rates():
    t = np.linspace(0, 1e-6, 10001)
    up = analytic_curves(MEASURED_RATES, t)[:, 0]
    k = int(np.argmax(up))
    assert up[k] == pytest.approx(0.759, abs=0.005)
    assert t[k] == pytest.approx(0.300e-6, abs=0.01e-6)


def test_optimal_laser_duration_is_the_peak():
    best = optimal_laser_duration(MEASURED_RATES)
    assert best == pytest.approx(0.3005e-6, abs=5e-9)
    peak = analytic_populations(MEASURED_RATES, best)[(0, "up")]
    for t in (best - 20e-9, best + 20e-9):
        assert analytic_populations(MEASURED_RATES, t)[(0, "up")] < peak
    assert optimal_laser_duration(RateParams(1e6, 0.0, 0.0)) == math.inf


def test_rate_params_validation():
    with pytest.raises(ValueError):
        RateParams(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RateParams(math.inf, 1.0, 1.0)
    lifetimes = MEASURED_RATES.lifetimes()
    assert lifetimes[0] == pytest.approx(0.17e-6)


def test_negative_time_is_rejected():
    with pytest.raises(ValueError):
        analytic_curves(MEASURED_RATES, [-1e-9])


def test_long_laser_pulse_polarizes_electron():
    state = apply_laser(QuantumState(np.eye(6) / 6), DEFAULTS, MEASURED_RATES, 10e-6)
    pops = state.populations(DEFAULTS)
    assert pops[(0, "up")] == pytest.approx(0.5, abs=1e-6)
    assert pops[(0, "down")] == pytest.approx(0.5, abs=1e-6)
    state.check()


def test_laser_with_zero_rates_does_nothing():
    start = QuantumState.mixture(DEFAULTS, {(1, "up"): 0.3, (0, "up"): 0.7})
    out = apply_laser(start, DEFAULTS, RateParams(0.0, 0.0, 0.0), 1e-6)
    assert np.allclose(out.rho, start.rho)


def test_population_views():
    state = QuantumState.mixture(DEFAULTS, {(0, "up"): 0.6, (1, "down"): 0.4})
    pops = populations_from_state(state, DEFAULTS)
    assert pops[(0, "up")] == pytest.approx(0.6)
    assert pops.bright == pytest.approx(0.6)
    back = state_from_populations(pops, DEFAULTS)
    assert np.allclose(back.rho, state.rho, atol=1e-12)


def test_storage_envelope():
    decay = DecayParams(3.3e-3)
    assert storage_decay_envelope(decay, 3.3e-3) == pytest.approx(math.exp(-1))
    assert DecayParams(3.3e-3, 33e-3).decay_time == pytest.approx(3.0e-3)
    assert DecayParams(math.inf, math.inf).decay_time == math.inf
    with pytest.raises(ValueError):
        storage_decay_envelope(decay, -1.0)


def test_flip_sampling_is_reproducible():
    assert sample_t1_flips(1e-3, 5e-3, 42) == sample_t1_flips(1e-3, 5e-3, 42)
    flips = sample_t1_flips(1e-3, 5e-3, 42)
    assert flips == sorted(flips)
    assert all(0 <= f <= 5e-3 for f in flips)
    assert sample_t1_flips(math.inf, 1.0, 0) == []


def test_flip_statistics():
    counts = np.array([len(sample_t1_flips(1.0, 1.0, seed)) for seed in range(100000)])
    assert counts.mean() == pytest.approx(1.0, abs=0.02)
    assert counts.var() == pytest.approx(1.0, abs=0.05)
    assert np.mean(counts == 0) == pytest.approx(math.exp(-1), abs=0.008)


def test_static_detunings():
    assert np.all(sample_static_detunings(math.inf, 5, np.random.default_rng(0)) == 0)
    detunings = sample_static_detunings(50e-6, 200000, np.random.default_rng(3))
    # Lorentzian half width 1/(2 pi T2*)
    assert np.median(np.abs(detunings)) == pytest.approx(1 / (2 * math.pi * 50e-6), rel=0.02)


def test_telegraph_branching():
    one_way = TelegraphModel(1e-4, "one-way").sample(1e-2, 5)
    assert len(one_way) <= 1
    symmetric = TelegraphModel(1e-4, "symmetric").sample(1e-2, 5)
    assert len(symmetric) > 1
    with pytest.raises(ValueError):
        TelegraphModel(1e-3, "sideways")


def test_occupancy():
    time_in_one, manifold = occupancy(np.array([2.0]), np.array([1.0, 3.0]))
    assert np.allclose(time_in_one, [1.0, 2.0])
    assert list(manifold) == [1, 0]


def test_hahn_echo_refocuses_static_detuning():
    f = np.array([1234.0, -50.0])
    phases = echo_phases([(1e-3, "rf1"), (2e-3, "read")], [np.array([]), np.array([])], f, f)
    assert np.allclose(phases, 0.0, atol=1e-9)


def test_unknown_echo_action():
    with pytest.raises(ValueError):
        echo_phases([(1e-3, "flop")], [np.array([])], np.zeros(1), np.zeros(1))


def _cycle_phase(s, a, b, tau):
    events = [(tau, "rf1"), (2 * tau, "swap"), (3 * tau, "rf1"), (4 * tau, "swap"), (4 * tau, "read")]
    return echo_phases(events, [np.array([s])], np.array([a]), np.array([b]))[0, 0]


@pytest.mark.parametrize("fraction", [0.3, 1.6, 2.5, 3.8])
def test_single_flip_phase_in_extended_cycle(fraction):
    a, b, tau = 1000.0, 300.0, 1e-4
    s = fraction * tau
    if s < tau:
        expected = (a - b) * s
    elif s < 2 * tau:
        expected = -2 * a * tau + (a - b) * s
    elif s < 3 * tau:
        expected = -a * (s - 2 * tau) - b * (4 * tau - s)
    else:
        expected = (a - b) * (4 * tau - s)
    phase = _cycle_phase(s, a, b, tau)
    assert phase == pytest.approx(2 * math.pi * expected, abs=1e-9)
    assert abs(phase) <= 2 * math.pi * (2 * abs(a) * tau + 2 * abs(a - b) * tau)


def test_extended_cycle_without_flip_refocuses():
    assert _cycle_phase(1.0, 1000.0, 300.0, 1e-4) == pytest.approx(0.0, abs=1e-9)


def test_rates_from_table():
    table = [
        {"power": 0.0, "alpha": 0.0, "beta": 0.0, "gamma": 0.0},
        {"power": 1.0, "alpha": 2e6, "beta": 1e6, "gamma": 4e5},
    ]
    mid = rates_from_table(table, 0.5)
    assert (mid.alpha, mid.beta, mid.gamma) == pytest.approx((1e6, 5e5, 2e5))
    assert rates_from_table(table, 3.0).alpha == pytest.approx(2e6)
    with pytest.raises(ValueError):
        rates_from_table([], 1.0)
