"""Canned protocols: Rabi, FID, initialization tomography, repeated purification,
state transfer + storage, CPMG storage decay and the extended decoupling cycle.

Density-matrix protocols run the reference sequences in ``data/sequences`` through
:func:`src.sequence.simulate`. Storage protocols sample electron-flip trajectories and
track the nuclear coherence phase with :func:`src.dissipation.echo_phases`.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import dissipation, fitkit, sequence, spin_core
from .dissipation import MEASURED_RATES, DecayParams, RateParams, TelegraphModel
from .fitkit import FitResult
from .spin_core import QuantumState, RegisterParams

logger = logging.getLogger(__name__)

SEQUENCE_DIR = Path(__file__).resolve().parent.parent / "data" / "sequences"
EPSILON = 1e-6
SHARD_SIZE = 250
FIT_CENTER = 20e-6
DEFAULT_DETUNING = 150e3
TRANSFER_STATES = {"+X": 0.0, "-X": math.pi, "+Y": math.pi / 2, "-Y": 3 * math.pi / 2}


@dataclass
class SweepResult:
    """Readout signal (bright population) vs a swept quantity."""

    experiment: str
    x: np.ndarray
    y: np.ndarray
    x_unit: str = "s"
    y_err: Optional[np.ndarray] = None
    seed: Optional[int] = None
    params: Dict[str, float] = field(default_factory=dict)
    fit: Optional[FitResult] = None
    summary: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape:
            raise ValueError(f"x and y differ in length: {self.x.shape} vs {self.y.shape}")
        if self.y.size and (self.y.min() < -EPSILON or self.y.max() > 1 + EPSILON):
            raise ValueError(f"{self.experiment}: signal outside [0, 1]")
        if self.y_err is not None:
            self.y_err = np.asarray(self.y_err, dtype=float)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"x": self.x, "y": self.y})
        if self.y_err is not None:
            frame["y_err"] = self.y_err
        return frame

    def metadata(self) -> dict:
        return {
            "experiment": self.experiment,
            "x_unit": self.x_unit,
            "seed": self.seed,
            "params": self.params,
            "fit": self.fit.to_dict() if self.fit else None,
            "summary": self.summary,
            "warnings": list(self.warnings),
        }


@dataclass
class FidelityReport:
    fidelities: Dict[str, float]
    deltas: Dict[str, float]
    reference_delta: float
    sweeps: Dict[str, SweepResult] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name, f in self.fidelities.items():
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"fidelity of {name} outside [0, 1]: {f}")
            if abs(f - fidelity_from_delta(self.deltas[name])) > 1e-12:
                raise ValueError(f"fidelity of {name} inconsistent with its delta")

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.fidelities.values())))

    def to_dict(self) -> dict:
        return {
            "fidelities": self.fidelities,
            "deltas": self.deltas,
            "reference_delta": self.reference_delta,
            "mean_fidelity": self.mean,
        }


@lru_cache(maxsize=None)
def corpus(name: str) -> sequence.SequenceIR:
    return sequence.load_sequence(SEQUENCE_DIR / f"{name}.seq")


def _ascending(grid, what: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError(f"{what} grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f"{what} grid must be ascending")
    if np.any(grid < 0):
        raise ValueError(f"{what} grid must be non-negative")
    return grid


def _with_noise(y: np.ndarray, sigma: float, seed: Optional[int]) -> np.ndarray:
    if not sigma:
        return y
    if sigma < 0:
        raise ValueError("readout noise must be non-negative")
    rng = np.random.default_rng(seed)
    return np.clip(y + rng.normal(0.0, sigma, y.shape), 0.0, 1.0)


def _collect(results: Sequence[sequence.SimulationResult]) -> List[str]:
    seen: List[str] = []
    for res in results:
        for w in res.state.warnings:
            if w not in seen:
                seen.append(w)
    return seen


def calibrated_rf_amplitude(params: RegisterParams, target: float = 4.3e6) -> float:
    """Bare RF1 drive amplitude whose enhanced Rabi frequency equals ``target``."""
    return target / spin_core.transition_strength(params, "RF1")


def fidelity_from_delta(delta: float) -> float:
    if not -1.0 <= delta <= 1.0:
        raise ValueError(f"fringe contrast must lie in [-1, 1], got {delta}")
    return (1.0 + delta) / 2.0


def run_rabi(
    params: RegisterParams = RegisterParams(),
    amplitude: Optional[float] = None,
    durations=None,
    rates: RateParams = MEASURED_RATES,
    readout_noise: float = 0.0,
    seed: Optional[int] = 0,
) -> SweepResult:
    """Nuclear Rabi oscillation on RF1; ``amplitude`` is the bare drive (Hz)."""
    durations = _ascending(np.linspace(0, 1e-6, 101) if durations is None else durations, "duration")
    if amplitude is None:
        amplitude = calibrated_rf_amplitude(params)
    if amplitude < 0:
        raise ValueError("drive amplitude must be non-negative")
    strength = spin_core.transition_strength(params, "RF1")
    effective = amplitude * strength
    ir = corpus("rabi")
    runs = [sequence.simulate(sequence.bind(ir, {"t": t, "rf_rabi": effective}), params, rates)
            for t in durations]
    y = _with_noise(np.array([r.signal for r in runs]), readout_noise, seed)
    fit = fitkit.fit_cosine(durations, y)
    summary = {
        "rabi_frequency_hz": fit["frequency"] if fit.converged else math.nan,
        "effective_rabi_hz": effective,
        "enhancement": strength,
        "rf_pi_time_s": 1 / (2 * effective) if effective > 0 else math.inf,
    }
    return SweepResult("rabi", durations, y, seed=seed, params=params.snapshot(), fit=fit,
                       summary=summary, warnings=_collect(runs))


def run_fid(
    params: RegisterParams = RegisterParams(),
    detuning: float = DEFAULT_DETUNING,
    delays=None,
    rates: RateParams = MEASURED_RATES,
    readout_noise: float = 0.0,
    seed: Optional[int] = 0,
) -> SweepResult:
    """Nuclear Ramsey fringes on RF1 at the programmed drive detuning."""
    delays = _ascending(np.linspace(0, 60e-6, 301) if delays is None else delays, "delay")
    ir = corpus("fid")
    runs = [sequence.simulate(sequence.bind(ir, {"t": t}), params, rates, detunings={"RF1": detuning})
            for t in delays]
    y = _with_noise(np.array([r.signal for r in runs]), readout_noise, seed)
    if detuning == 0:
        fit = fitkit.fit_exponential(delays, y)
        frequency = 0.0
    else:
        fit = fitkit.fit_damped_cosine(delays, y)
        frequency = fit["frequency"]
    summary = {"fringe_frequency_hz": frequency, "t2star_n_s": fit["decay_time"]}
    return SweepResult("fid", delays, y, seed=seed, params=params.snapshot(), fit=fit,
                       summary=summary, warnings=_collect(runs))


def _init_state(params: RegisterParams, rates: RateParams, cycles: int, laser_duration: float,
                rate_table=None) -> QuantumState:
    ir = sequence.expand_repeats(corpus("init"), {"cycle": cycles})
    ir = sequence.bind(ir, {"t_laser": laser_duration})
    return sequence.simulate(ir, params, rates, rate_table=rate_table).state


def run_init_tomography(
    params: RegisterParams = RegisterParams(),
    rates: RateParams = MEASURED_RATES,
    durations=None,
) -> Tuple[SweepResult, SweepResult]:
    """Total mS=0 population and P(|0,up>) after one swap + laser pulse of varying length."""
    durations = _ascending(np.linspace(0, 2e-6, 41) if durations is None else durations, "laser duration")
    total, up = [], []
    for t in durations:
        pops = _init_state(params, rates, 1, t).populations(params)
        total.append(pops[(0, "up")] + pops[(0, "down")])
        up.append(pops[(0, "up")])
    total, up = np.array(total), np.array(up)

    closed = dissipation.analytic_curves(rates, durations)
    deviation = float(max(np.max(np.abs(total - closed[:, 0] - closed[:, 1])),
                          np.max(np.abs(up - closed[:, 0]))))
    peak = int(np.argmax(up))
    summary_up = {
        "peak_p_up": float(up[peak]),
        "peak_time_s": float(durations[peak]),
        "optimal_laser_duration_s": dissipation.optimal_laser_duration(rates),
        "closed_form_deviation": deviation,
    }
    snapshot = params.snapshot()
    return (
        SweepResult("init-tomography-total", durations, total, params=snapshot,
                    summary={"closed_form_deviation": deviation}),
        SweepResult("init-tomography-up", durations, up, params=snapshot, summary=summary_up),
    )


def run_repeated_init(
    params: RegisterParams = RegisterParams(),
    rates: RateParams = MEASURED_RATES,
    cycles: int = 10,
    laser_duration: Optional[float] = None,
) -> SweepResult:
    """P(|0,up>) after 0..cycles purification cycles."""
    if cycles < 0:
        raise ValueError("cycle count must be non-negative")
    if laser_duration is None:
        laser_duration = dissipation.optimal_laser_duration(rates)
        if not math.isfinite(laser_duration):
            laser_duration = 300e-9
    counts = np.arange(cycles + 1)
    states = [_init_state(params, rates, int(n), laser_duration) for n in counts]
    pops = [s.populations(params) for s in states]
    y = np.array([p[(0, "up")] for p in pops])
    final = pops[-1]
    summary = {
        "p_up_final": float(y[-1]),
        "polarization": 2 * (final[(0, "up")] + final[(1, "up")]) - 1,
        "laser_duration_s": laser_duration,
    }
    return SweepResult("repeated-init", counts, y, x_unit="cycles", params=params.snapshot(),
                       summary=summary)


def prepare_register(
    params: RegisterParams,
    rates: RateParams = MEASURED_RATES,
    purification_cycles: int = 0,
    laser_duration: float = 300e-9,
) -> QuantumState:
    """|0,up> for zero cycles, otherwise the state left by the purification sequence."""
    if purification_cycles == 0:
        return QuantumState.from_eigenstate(params, (0, "up"))
    return _init_state(params, rates, purification_cycles, laser_duration)


def fit_window(detuning: float = DEFAULT_DETUNING, center: float = FIT_CENTER) -> Tuple[float, float]:
    """One full fringe period centered on ``center``."""
    if detuning <= 0:
        raise ValueError("fringe window needs a positive detuning")
    half = 0.5 / detuning
    return center - half, center + half


def _write_window(ir: sequence.SequenceIR) -> float:
    delays = [ev for ev in ir.events if ev.channel == "DELAY"]
    storage = max(delays, key=lambda ev: ev.duration)
    return storage.start


def write_angle_error(phi: float, offset: float = 0.0, ripple: float = 0.0, ripple_phase: float = 0.0) -> float:
    """Over-rotation (rad) of the phase-``phi`` writing pulse.

    ``offset`` is a fixed amplitude miscalibration; ``ripple`` is a phase-dependent error
    from carrier leakage of the IQ mixer, largest at ``phi = ripple_phase``.
    """
    return offset + ripple * math.cos(phi - ripple_phase)


def _contrast(fit: FitResult, x: np.ndarray) -> float:
    """Peak-to-peak fringe contrast at the middle of ``x``."""
    center = 0.5 * (x[0] + x[-1])
    return 2 * fit["amplitude"] * math.exp(-center / fit["decay_time"])


def run_transfer_storage(
    params: RegisterParams = RegisterParams(),
    phi: float = 0.0,
    delays=None,
    rates: RateParams = MEASURED_RATES,
    purification_cycles: int = 0,
    laser_duration: float = 300e-9,
    detuning: float = DEFAULT_DETUNING,
    readout_noise: float = 0.0,
    seed: Optional[int] = 0,
    state: Optional[QuantumState] = None,
    write_error: float = 0.0,
) -> SweepResult:
    """Write phase ``phi`` into the nuclear spin, store for each delay, read back.

    The fringe is fitted with a damped cosine at the known ``detuning`` and nuclear T2*,
    so the fitted phase does not depend on where the window cuts the envelope.
    ``write_error`` over-rotates the first MW2 pulse by that angle.
    """
    if not 0.0 <= phi < 2 * math.pi:
        raise ValueError(f"phi must lie in [0, 2 pi), got {phi}")
    if delays is None:
        delays = np.linspace(*fit_window(detuning), 41)
    delays = _ascending(delays, "storage delay")
    initial = state if state is not None else prepare_register(params, rates, purification_cycles, laser_duration)
    if write_error:
        initial = spin_core.apply_ideal_pulse(initial, params, "MW2", write_error, phase=phi)
    ir = corpus("transfer")
    bound = [sequence.bind(ir, {"t": t, "phi": phi}) for t in delays]
    runs = [sequence.simulate(b, params, rates, state=initial, detunings={"RF1": detuning}) for b in bound]
    y = _with_noise(np.array([r.signal for r in runs]), readout_noise, seed)
    fit = fitkit.fit_fringe(delays, y, detuning, params.T2star_n)
    rf_pi = next(ev.duration for ev in bound[0].events if ev.channel == "RF1")
    summary = {
        "fringe_phase_rad": fit["phase"],
        "fringe_frequency_hz": fit["frequency"],
        "delta": _contrast(fit, delays),
        "detuning_hz": detuning,
        "write_error_rad": write_error,
        "write_window_s": _write_window(bound[0]),
        "rf_pi_time_s": rf_pi,
    }
    return SweepResult("transfer-storage", delays, y, seed=seed, params=params.snapshot(), fit=fit,
                       summary=summary, warnings=_collect(runs))


def extract_fidelity(sweep: SweepResult, window: Optional[Tuple[float, float]] = None,
                     reference: Optional[float] = None) -> Tuple[float, float]:
    """Fringe contrast and fidelity from a fit inside ``window``.

    Transfer sweeps are fitted at their recorded detuning and nuclear T2*; any other
    sweep gets a free single-oscillation cosine. ``reference`` divides the contrast,
    removing the storage envelope measured on an ideal state in the same window.
    """
    x, y = sweep.x, sweep.y
    if window is not None:
        lo, hi = window
        mask = (x >= lo - 1e-15) & (x <= hi + 1e-15)
        x, y = x[mask], y[mask]
    detuning = sweep.summary.get("detuning_hz")
    if detuning:
        fit = fitkit.fit_fringe(x, y, detuning, sweep.params.get("T2star_n", math.inf))
        delta = _contrast(fit, x) if fit.converged else 0.0
    else:
        fit = fitkit.fit_cosine(x, y)
        delta = 2 * fit["amplitude"] if fit.converged else 0.0
    if reference is not None:
        if reference <= 0:
            raise ValueError("reference contrast must be positive")
        delta /= reference
    delta = min(max(delta, 0.0), 1.0)
    return delta, fidelity_from_delta(delta)


def run_fidelity_report(
    params: RegisterParams = RegisterParams(),
    rates: RateParams = MEASURED_RATES,
    purification_cycles: int = 0,
    laser_duration: float = 300e-9,
    detuning: float = DEFAULT_DETUNING,
    readout_noise: float = 0.0,
    seed: Optional[int] = 0,
    delays=None,
    write_angle_offset: float = 0.0,
    write_angle_ripple: float = 0.0,
    write_ripple_phase: float = 0.0,
) -> FidelityReport:
    """Transfer fidelity of the four equatorial states, normalized to an ideal reference FID.

    The reference run has no write-angle error; the ``write_*`` options set the
    over-rotation of each state's writing pulse through :func:`write_angle_error`.
    """
    window = fit_window(detuning)
    if delays is None:
        delays = np.linspace(*window, 41)
    ideal = replace(params, T2star_e=math.inf)
    reference = run_transfer_storage(ideal, 0.0, delays, rates, detuning=detuning,
                                     state=QuantumState.from_eigenstate(ideal, (0, "up")))
    reference_delta, _ = extract_fidelity(reference, window)
    if reference_delta <= 0:
        raise RuntimeError("reference fringes have no contrast")

    initial = prepare_register(params, rates, purification_cycles, laser_duration)
    seeds = np.random.SeedSequence(seed).generate_state(len(TRANSFER_STATES))
    fidelities, deltas, sweeps = {}, {}, {}
    for (name, phi), state_seed in zip(TRANSFER_STATES.items(), seeds):
        error = write_angle_error(phi, write_angle_offset, write_angle_ripple, write_ripple_phase)
        sweep = run_transfer_storage(params, phi, delays, rates, detuning=detuning,
                                     readout_noise=readout_noise, seed=int(state_seed), state=initial,
                                     write_error=error)
        deltas[name], fidelities[name] = extract_fidelity(sweep, window, reference_delta)
        sweep.summary["fidelity"] = fidelities[name]
        sweeps[name] = sweep
        logger.info("transfer %s: write error=%.3f rad delta=%.4f F=%.4f", name, error, deltas[name],
                    fidelities[name])
    return FidelityReport(fidelities, deltas, reference_delta, sweeps)


# ---------------------------------------------------------------- trajectory ensembles


def _trajectory_seeds(seed: int, ensemble: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(ensemble)


def _echo_shard(seeds, trains, T1e: float, T2star: float, branching: str, horizon: float, offset: float):
    model = TelegraphModel(T1e, branching)
    flips = [model.sample(horizon, int(s)) for s in seeds]
    detunings = np.array([
        dissipation.sample_static_detunings(T2star, 1, np.random.default_rng([int(s), 1]))[0] for s in seeds
    ])
    phases = np.hstack([dissipation.echo_phases(train, flips, detunings, detunings + offset) for train in trains])
    return phases, np.array([len(f) for f in flips])


def _ensemble_phases(trains, params: RegisterParams, ensemble: int, seed: int, branching: str,
                     n_jobs: int, offset: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Coherence phases (ensemble, reads) and flip counts, sharded over fixed seed blocks.

    ``offset`` is the extra mS=0 precession frequency in the frame of the refocusing drive.
    """
    if ensemble < 1:
        raise ValueError("ensemble size must be positive")
    horizon = max((t for train in trains for t, _ in train), default=0.0)
    seeds = _trajectory_seeds(seed, ensemble)
    shards = [seeds[i:i + SHARD_SIZE] for i in range(0, ensemble, SHARD_SIZE)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_echo_shard)(chunk, trains, params.T1e, params.T2star_n, branching, horizon, offset)
        for chunk in shards
    )
    phases = np.vstack([r[0] for r in results])
    flips = np.concatenate([r[1] for r in results])
    return phases, flips


def _decay_fit(x: np.ndarray, cosines: np.ndarray, envelope: np.ndarray, seed: int,
               bootstrap: int) -> Tuple[FitResult, float]:
    """Exponential fit of the echo signal (offset 1/2) and its bootstrap spread."""
    y = 0.5 * (1 + cosines.mean(axis=0) * envelope)
    fit = fitkit.fit_exponential(x, y, offset=0.5)
    if not fit.converged or bootstrap <= 0:
        return fit, math.nan
    rng = np.random.default_rng([seed, 2])
    n = cosines.shape[0]
    taus = []
    for _ in range(bootstrap):
        sample = cosines[rng.integers(0, n, n)]
        y_b = 0.5 * (1 + sample.mean(axis=0) * envelope)
        fit_b = fitkit.fit_exponential(x, y_b, offset=0.5, guess={"decay_time": fit["decay_time"]})
        if fit_b.converged:
            taus.append(fit_b["decay_time"])
    return fit, float(np.std(taus, ddof=1)) if len(taus) > 1 else math.nan


def _echo_result(name: str, x: np.ndarray, phases: np.ndarray, params: RegisterParams, seed: int,
                 bootstrap: int, extra: Mapping[str, float]) -> SweepResult:
    cosines = np.cos(phases)
    envelope = np.exp(-x / params.T2C_pure)
    amplitude = cosines.mean(axis=0) * envelope
    y = np.clip(0.5 * (1 + amplitude), 0.0, 1.0)
    y_err = 0.5 * cosines.std(axis=0) / math.sqrt(cosines.shape[0]) * envelope
    fit, spread = _decay_fit(x, cosines, envelope, seed, bootstrap)
    summary = {
        "decay_time_s": fit["decay_time"] if fit.converged else math.nan,
        "decay_time_err_s": spread,
        "predicted_decay_s": DecayParams(params.T1e, params.T2C_pure).decay_time,
    }
    summary.update(extra)
    return SweepResult(name, x, y, y_err=y_err, seed=seed, params=params.snapshot(), fit=fit, summary=summary)


def rf_frame_offset(params: RegisterParams) -> float:
    """mS=0 precession seen from the RF1 drive frame: f_RF2 - f_RF1 (Hz)."""
    return spin_core.transition(params, "RF2").frequency - spin_core.transition(params, "RF1").frequency


def cpmg_train(total: float, n_pulses: int) -> List[Tuple[float, str]]:
    """RF1 pi pulses at total*(2k+1)/(2n), read at ``total``."""
    if n_pulses < 1:
        raise ValueError("CPMG needs at least one pulse")
    events = [(total * (2 * k + 1) / (2 * n_pulses), "rf1") for k in range(n_pulses)]
    return events + [(total, "read")]


def run_cpmg_storage(
    params: RegisterParams = RegisterParams(),
    n_pulses: int = 1,
    times=None,
    ensemble: int = 1000,
    seed: int = 0,
    branching: str = "one-way",
    bootstrap: int = 100,
    n_jobs: int = 1,
) -> SweepResult:
    """Echo signal vs total storage time with ``n_pulses`` RF1 refocusing pulses."""
    if n_pulses not in (1, 2, 4):
        raise ValueError(f"n_pulses must be 1, 2 or 4, got {n_pulses}")
    times = _ascending(np.linspace(0, 10e-3, 21) if times is None else times, "storage time")
    trains = [cpmg_train(t, n_pulses) for t in times]
    phases, _ = _ensemble_phases(trains, params, ensemble, seed, branching, n_jobs, rf_frame_offset(params))
    return _echo_result("cpmg-storage", times, phases, params, seed, bootstrap,
                        {"n_pulses": n_pulses, "ensemble": ensemble})


def extended_dd_train(tau: float, n_cycles: int, scheme: bool = True) -> List[Tuple[float, str]]:
    """Echo actions for ``n_cycles`` cycles of length 4 tau with a read at every cycle end.

    With ``scheme`` the cycle of the reference sequence is used; otherwise plain
    RF1 pulses every 2 tau.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if n_cycles < 1:
        raise ValueError("need at least one cycle")
    if not scheme:
        events: List[Tuple[float, str]] = []
        for k in range(n_cycles):
            base = 4 * tau * k
            events += [(base + tau, "rf1"), (base + 3 * tau, "rf1"), (base + 4 * tau, "read")]
        return events
    ir = sequence.expand_repeats(corpus("extended_dd"), {"cycle": n_cycles})
    train = sequence.echo_train(sequence.bind(ir, {"tau": tau}))
    events = []
    swaps = 0
    for t, action in train:
        events.append((t, action))
        if action == "swap":
            swaps += 1
            if swaps % 2 == 0:
                events.append((t, "read"))
    return events


def run_extended_dd(
    params: RegisterParams = RegisterParams(),
    tau: float = 20e-6,
    n_cycles: int = 40,
    ensemble: int = 1000,
    seed: int = 0,
    branching: str = "one-way",
    scheme: bool = True,
    bootstrap: int = 50,
    n_jobs: int = 1,
) -> SweepResult:
    """Coherence surviving electron flips under the extended cycle (or plain CPMG).

    The cycle swaps the memory through both manifolds, so each manifold is tracked in
    its own drive frame. The plain-CPMG reference only drives RF1 and sees the mS=0
    coherence precess at the RF1/RF2 difference.
    """
    train = extended_dd_train(tau, n_cycles, scheme)
    reads = np.array([t for t, action in train if action == "read"])
    offset = 0.0 if scheme else rf_frame_offset(params)
    phases, flips = _ensemble_phases([train], params, ensemble, seed, branching, n_jobs, offset)
    x = np.concatenate([[0.0], reads])
    phases = np.hstack([np.zeros((phases.shape[0], 1)), phases])
    still = flips == 0
    residual = float(np.max(np.abs(phases[still]))) if still.any() else 0.0
    name = "extended-dd" if scheme else "extended-dd-reference"
    return _echo_result(name, x, phases, params, seed, bootstrap,
                        {"tau_s": tau, "n_cycles": n_cycles, "ensemble": ensemble,
                         "no_flip_residual_rad": residual, "scheme": float(scheme)})


def run_power_scan(
    params: RegisterParams = RegisterParams(),
    rate_table: Sequence[Mapping[str, float]] = (),
    powers=None,
    cycles: int = 4,
    laser_duration: float = 300e-9,
) -> SweepResult:
    """P(|0,up>) after ``cycles`` purification cycles vs laser power (tabulated rates)."""
    if not rate_table:
        raise ValueError("power scan needs a rate table")
    if powers is None:
        table_powers = sorted(row["power"] for row in rate_table)
        powers = np.linspace(table_powers[0], table_powers[-1], 21)
    powers = _ascending(powers, "laser power")
    y = []
    for power in powers:
        rates = dissipation.rates_from_table(rate_table, power)
        state = _init_state(params, rates, cycles, laser_duration)
        y.append(state.populations(params)[(0, "up")])
    y = np.array(y)
    best = int(np.argmax(y))
    summary = {"best_power": float(powers[best]), "best_p_up": float(y[best]), "cycles": cycles}
    return SweepResult("power-scan", powers, y, x_unit="relative power", params=params.snapshot(),
                       summary=summary)
