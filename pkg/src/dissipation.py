import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from .spin_core import QuantumState, RegisterParams, _from_eig, _to_eig, register_eigensystem

logger = logging.getLogger(__name__)

POPULATION_LEVELS = ((0, "up"), (0, "down"), (1, "up"), (1, "down"))

# Switch to the coalesced-exponent branch when |alpha + beta - 2 gamma| is this small
DEGENERATE_RTOL = 1e-6


@dataclass(frozen=True)
class RateParams:
    """Laser pumping rates (1/s) of the four-level model."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"rate {name} must be finite and non-negative, got {value}")

    @classmethod
    def from_lifetimes(cls, alpha: float, beta: float, gamma: float) -> "RateParams":
        """Build from the inverse rates 1/alpha, 1/beta, 1/gamma (s)."""
        return cls(1.0 / alpha, 1.0 / beta, 1.0 / gamma)

    def lifetimes(self) -> Tuple[float, float, float]:
        return tuple(1.0 / r if r > 0 else math.inf for r in (self.alpha, self.beta, self.gamma))


MEASURED_RATES = RateParams.from_lifetimes(0.17e-6, 0.92e-6, 1.6e-6)


@dataclass(frozen=True, eq=False)
class Populations:
    """P(|0,up>), P(|0,down>), P(|1,up>), P(|1,down>)."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (4,):
            raise ValueError(f"populations need 4 entries, got shape {p.shape}")
        if p.min() < -1e-10 or abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"invalid population vector {p}")
        object.__setattr__(self, "p", p)

    def __getitem__(self, level) -> float:
        return float(self.p[POPULATION_LEVELS.index(level)])

    @property
    def bright(self) -> float:
        return float(self.p[0] + self.p[1])


@dataclass(frozen=True)
class DecayParams:
    T1e: float
    T2C_pure: float = math.inf

    def __post_init__(self):
        if not (self.T1e > 0 and self.T2C_pure > 0):
            raise ValueError("T1e and T2C_pure must be positive")

    @property
    def decay_time(self) -> float:
        rate = 1.0 / self.T1e + 1.0 / self.T2C_pure
        return 1.0 / rate if rate > 0 else math.inf


def rate_matrix(r: RateParams) -> np.ndarray:
    a, b, g = r.alpha, r.beta, r.gamma
    return np.array(
        [
            [-g, g, a, b],
            [g, -g, b, a],
            [0.0, 0.0, -(a + b), 0.0],
            [0.0, 0.0, 0.0, -(a + b)],
        ]
    )


def _coalesced(r: RateParams) -> bool:
    total = r.alpha + r.beta
    return abs(total - 2 * r.gamma) <= DEGENERATE_RTOL * total


def _g(r: RateParams, t: np.ndarray) -> np.ndarray:
    """(exp(-(alpha+beta) t) - exp(-2 gamma t)) / (alpha + beta - 2 gamma) and its limit."""
    c = 2 * r.gamma
    d = r.alpha + r.beta - c
    decay = np.exp(-c * t)
    if _coalesced(r):
        dt = d * t
        return -t * decay * (1 - dt / 2 + dt * dt / 6)
    return decay * np.expm1(-d * t) / d


def analytic_curves(r: RateParams, t) -> np.ndarray:
    """Closed-form populations for P(0) = (1/2, 0, 1/2, 0); shape (len(t), 4)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    g = _g(r, t)
    p0u = 0.5 - 0.5 * (r.alpha - r.gamma) * g
    p0d = 0.5 - 0.5 * np.exp(-2 * r.gamma * t) - 0.5 * (r.beta - r.gamma) * g
    p1u = 0.5 * np.exp(-(r.alpha + r.beta) * t)
    return np.column_stack([p0u, p0d, p1u, np.zeros_like(t)])


def analytic_populations(r: RateParams, t: float) -> Populations:
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    return Populations(analytic_curves(r, t)[0])


def propagate_rates(p0: Populations, r: RateParams, t: float) -> Populations:
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    p = expm(rate_matrix(r) * t) @ p0.p
    return Populations(p / p.sum())


def optimal_laser_duration(r: RateParams) -> float:
    """Pulse length maximizing P(|0,up>) from the swapped initial state."""
    a, c = r.alpha + r.beta, 2 * r.gamma
    if a == 0 or c == 0:
        return math.inf
    if _coalesced(r):
        return 1.0 / c
    return math.log(a / c) / (a - c)


def laser_generator(r: RateParams, labels: Sequence[Tuple[int, str]]) -> np.ndarray:
    """6-level pumping generator in the given level order.

    mS = +1 and mS = -1 both pump into mS = 0 with alpha (nuclear spin kept) and
    beta (nuclear spin flipped); gamma mixes the two mS = 0 levels.
    """
    index = {label: i for i, label in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)))

    def add(src, dst, rate):
        m[index[dst], index[src]] += rate
        m[index[src], index[src]] -= rate

    for ms in (-1, 1):
        for nuc, other in (("up", "down"), ("down", "up")):
            add((ms, nuc), (0, nuc), r.alpha)
            add((ms, nuc), (0, other), r.beta)
    add((0, "up"), (0, "down"), r.gamma)
    add((0, "down"), (0, "up"), r.gamma)
    return m


def apply_laser(
    state: QuantumState,
    params: RegisterParams,
    r: RateParams,
    duration: float,
    coherence_threshold: float = 0.0,
) -> QuantumState:
    """Optical pumping of the eigenlevel populations.

    Pulses longer than ``coherence_threshold`` leave a diagonal state. Shorter ones
    damp each coherence by the mean outflow rate of its two levels.
    """
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    if duration == 0:
        return state
    es = register_eigensystem(params)
    m = laser_generator(r, es.labels)
    rho = _to_eig(state.rho, es)
    pops = expm(m * duration) @ np.real(np.diag(rho))
    pops = np.clip(pops, 0.0, None)
    pops /= pops.sum()
    if duration > coherence_threshold:
        out = np.diag(pops).astype(complex)
    else:
        outflow = -np.diag(m)
        out = rho * np.exp(-0.5 * (outflow[:, None] + outflow[None, :]) * duration)
        np.fill_diagonal(out, pops)
    return state._replace_rho(_from_eig(out, es))


def storage_decay_envelope(d: DecayParams, t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be non-negative")
    out = np.exp(-t_arr * (1.0 / d.T2C_pure + 1.0 / d.T1e))
    return float(out) if out.ndim == 0 else out


def sample_t1_flips(T1e: float, horizon: float, rng_seed: int) -> List[float]:
    """Poisson flip times at rate 1/T1e within [0, horizon]."""
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon}")
    if horizon == 0 or math.isinf(T1e):
        return []
    rng = np.random.default_rng(rng_seed)
    n = rng.poisson(horizon / T1e)
    return sorted(rng.uniform(0.0, horizon, n).tolist())


def sample_static_detunings(T2star: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Lorentzian static detunings (Hz) whose ensemble FID decays as exp(-t/T2star)."""
    if math.isinf(T2star):
        return np.zeros(n)
    return rng.standard_cauchy(n) / (2 * math.pi * T2star)


@dataclass(frozen=True)
class TelegraphModel:
    """Electron mS=1 <-> mS=0 flips during storage.

    ``one-way`` relaxes 1 -> 0 at 1/T1e and stays there; ``symmetric`` flips in
    both directions at 1/T1e.
    """

    T1e: float
    branching: str = "one-way"

    def __post_init__(self):
        if self.branching not in ("one-way", "symmetric"):
            raise ValueError(f"unknown branching {self.branching!r}")

    def sample(self, horizon: float, rng_seed: int) -> np.ndarray:
        flips = sample_t1_flips(self.T1e, horizon, rng_seed)
        if self.branching == "one-way":
            flips = flips[:1]
        return np.asarray(flips, dtype=float)


def occupancy(flips: np.ndarray, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Time spent in mS=1 up to each of ``times`` and the manifold occupied at each.

    The electron starts in mS=1 and toggles at every flip.
    """
    times = np.asarray(times, dtype=float)
    end = max(float(times.max(initial=0.0)), float(flips[-1]) if len(flips) else 0.0)
    knots = np.concatenate(([0.0], flips, [end]))
    in_one = (np.arange(len(knots) - 1) % 2 == 0).astype(float)
    cumulative = np.concatenate(([0.0], np.cumsum(np.diff(knots) * in_one)))
    time_in_one = np.interp(times, knots, cumulative)
    manifold = np.where(np.searchsorted(flips, times, side="right") % 2 == 0, 1, 0)
    return time_in_one, manifold


# Echo-train actions: "rf1" inverts the mS=1 coherence, "swap" (MW pair + RF1 + MW pair)
# inverts the mS=0 coherence, "read" records the phase.
ACTIONS = ("rf1", "swap", "read")


def echo_phases(
    events: Sequence[Tuple[float, str]],
    flips: Sequence[np.ndarray],
    f1: np.ndarray,
    f0: np.ndarray,
) -> np.ndarray:
    """Accumulated coherence phase (rad) at every "read" event, per trajectory.

    The coherence precesses at ``f1`` (Hz) while the electron is in mS=1 and at ``f0``
    in mS=0, in manifold-local rotating frames, so a flip leaves the phase continuous.
    Returns an array of shape (n_trajectories, n_reads).
    """
    times = np.array([t for t, _ in events], dtype=float)
    actions = [a for _, a in events]
    if np.any(np.diff(times) < 0):
        raise ValueError("echo events must be time ordered")
    unknown = set(actions) - set(ACTIONS)
    if unknown:
        raise ValueError(f"unknown echo actions {sorted(unknown)}")

    n = len(flips)
    grid = np.concatenate(([0.0], times))
    t1 = np.empty((n, len(grid)))
    manifold = np.empty((n, len(grid)), dtype=int)
    for i, trajectory in enumerate(flips):
        t1[i], manifold[i] = occupancy(np.asarray(trajectory, dtype=float), grid)

    f1 = np.asarray(f1, dtype=float)
    f0 = np.asarray(f0, dtype=float)
    phase = np.zeros(n)
    reads = []
    for k, action in enumerate(actions, start=1):
        dt = grid[k] - grid[k - 1]
        dt1 = t1[:, k] - t1[:, k - 1]
        phase = phase + 2 * np.pi * (f1 * dt1 + f0 * (dt - dt1))
        if action == "rf1":
            phase = np.where(manifold[:, k] == 1, -phase, phase)
        elif action == "swap":
            phase = np.where(manifold[:, k] == 0, -phase, phase)
        else:
            reads.append(phase.copy())
    if not reads:
        return np.zeros((n, 0))
    return np.column_stack(reads)


def rates_from_table(table: Sequence[Mapping[str, float]], power: float) -> RateParams:
    """Linear interpolation of tabulated rates vs laser power (clamped at the ends)."""
    if not table:
        raise ValueError("empty rate table")
    rows = sorted(table, key=lambda row: row["power"])
    powers = [row["power"] for row in rows]
    values: Dict[str, float] = {
        name: float(np.interp(power, powers, [row[name] for row in rows]))
        for name in ("alpha", "beta", "gamma")
    }
    return RateParams(**values)


def populations_from_state(state: QuantumState, params: RegisterParams) -> Populations:
    """Four-level view of a register state (mS=-1 must be empty)."""
    pops = state.populations(params)
    vec = np.array([pops[level] for level in POPULATION_LEVELS])
    if abs(vec.sum() - 1.0) > 1e-9:
        raise ValueError("state has population outside the mS=0/+1 manifolds")
    return Populations(vec / vec.sum())


def state_from_populations(p: Populations, params: RegisterParams) -> QuantumState:
    return QuantumState.mixture(params, dict(zip(POPULATION_LEVELS, p.p)))

