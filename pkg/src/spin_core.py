import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

Level = Tuple[int, str]

# Product basis order: |mS, nuclear> with mS = -1, 0, +1 and nuclear = up, down
BASIS_LABELS: Tuple[Level, ...] = (
    (-1, "up"), (-1, "down"),
    (0, "up"), (0, "down"),
    (1, "up"), (1, "down"),
)

TRANSITION_LEVELS: Dict[str, Tuple[Level, Level]] = {
    "MW1": ((0, "down"), (1, "down")),
    "MW2": ((0, "up"), (1, "up")),
    "RF1": ((1, "down"), (1, "up")),
    "RF2": ((0, "down"), (0, "up")),
}

_SQRT2 = math.sqrt(2.0)

# Spin-1 operators in the (-1, 0, +1) ordering
_S_PLUS = np.array([[0, 0, 0], [_SQRT2, 0, 0], [0, _SQRT2, 0]], dtype=complex)
SZ = np.diag([-1.0, 0.0, 1.0]).astype(complex)
SX = (_S_PLUS + _S_PLUS.conj().T) / 2
SY = (_S_PLUS - _S_PLUS.conj().T) / 2j

# Spin-1/2 operators in the (up, down) ordering
IZ = np.diag([0.5, -0.5]).astype(complex)
IX = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
IY = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)

_E3 = np.eye(3, dtype=complex)
_E2 = np.eye(2, dtype=complex)


class TransitionError(ValueError):
    """Raised when eigenstates cannot be labeled or a transition is degenerate."""


@dataclass(frozen=True)
class RegisterParams:
    """Physical constants of the electron + 13C register (SI units, frequencies in Hz).

    ``B`` is signed along the NV axis. The default field of 65 G points against it, which
    places the mS=+1 manifold at D - gamma_e*|B| where the hyperfine mixing is strongest.
    """

    D: float = 2.870e9
    B: float = -65e-4
    gamma_e: float = 28.03e9
    gamma_n: float = 10.705e6
    A_par: float = 130.202e6
    A_perp: float = 127e6
    T1e: float = 3.3e-3
    T2star_n: float = 50e-6
    T2C_pure: float = math.inf
    T2star_e: float = 1e-6

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError(f"D must be positive, got {self.D}")
        for name in ("T1e", "T2star_n", "T2C_pure", "T2star_e"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma_n == 0 or not self.gamma_e / self.gamma_n > 1:
            raise ValueError("gamma_e / gamma_n must exceed 1")

    def snapshot(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class Transition:
    label: str
    levels: Tuple[int, int]  # (lower, upper) eigenstate indices
    frequency: float


@dataclass(frozen=True)
class Frame:
    """Reference frame for free evolution.

    ``lab`` keeps the full static Hamiltonian. ``rotating`` removes every eigenenergy
    (all drives on resonance) except that the upper level of ``transition`` sits at
    ``-detuning``, so its coherence advances by ``2*pi*detuning*t``. ``detuning`` is
    drive frequency minus transition frequency.
    """

    kind: str = "lab"
    transition: Optional[Transition] = None
    detuning: float = 0.0

    def __post_init__(self):
        if self.kind not in ("lab", "rotating"):
            raise ValueError(f"unknown frame kind {self.kind!r}")


LAB = Frame()


def rotating(transition: Optional[Transition] = None, detuning: float = 0.0) -> Frame:
    return Frame("rotating", transition, detuning)


@dataclass(frozen=True)
class Eigensystem:
    energies: np.ndarray
    vectors: np.ndarray
    labels: Tuple[Level, ...]

    def index(self, label: Level) -> int:
        return self.labels.index(label)


@dataclass(frozen=True, eq=False)
class QuantumState:
    """6x6 density matrix in the product basis ``BASIS_LABELS``."""

    rho: np.ndarray
    warnings: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.shape != (6, 6):
            raise ValueError(f"density matrix must be 6x6, got {rho.shape}")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_product(cls, label: Level) -> "QuantumState":
        psi = np.zeros(6, dtype=complex)
        psi[BASIS_LABELS.index(label)] = 1.0
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def from_eigenstate(cls, params: RegisterParams, label: Level) -> "QuantumState":
        es = register_eigensystem(params)
        v = es.vectors[:, es.index(label)]
        return cls(np.outer(v, v.conj()))

    @classmethod
    def mixture(cls, params: RegisterParams, weights: Dict[Level, float]) -> "QuantumState":
        """Incoherent mixture of labeled eigenstates."""
        es = register_eigensystem(params)
        diag = np.zeros(6)
        for label, w in weights.items():
            diag[es.index(label)] = w
        return cls(_from_eig(np.diag(diag).astype(complex), es))

    def in_eigenbasis(self, params: RegisterParams) -> np.ndarray:
        return _to_eig(self.rho, register_eigensystem(params))

    def populations(self, params: RegisterParams) -> Dict[Level, float]:
        es = register_eigensystem(params)
        p = np.real(np.diag(_to_eig(self.rho, es)))
        return {label: float(p[i]) for i, label in enumerate(es.labels)}

    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))

    def check(self, tol: float = 1e-10, positivity_tol: float = 1e-8) -> None:
        rho = self.rho
        if np.max(np.abs(rho - rho.conj().T)) > tol:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(rho) - 1.0) > tol:
            raise ValueError(f"trace deviates from 1: {np.trace(rho)}")
        if np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() < -positivity_tol:
            raise ValueError("density matrix is not positive")

    def with_warning(self, message: str) -> "QuantumState":
        return QuantumState(self.rho, self.warnings + (message,))

    def _replace_rho(self, rho: np.ndarray) -> "QuantumState":
        return QuantumState(rho, self.warnings)


def build_hamiltonian(p: RegisterParams) -> np.ndarray:
    """Static register Hamiltonian in Hz, product basis."""
    h = (
        p.D * np.kron(SZ @ SZ, _E2)
        + p.gamma_e * p.B * np.kron(SZ, _E2)
        - p.gamma_n * p.B * np.kron(_E3, IZ)
        + p.A_par * np.kron(SZ, IZ)
        + p.A_perp * (np.kron(SX, IX) + np.kron(SY, IY))
    )
    return (h + h.conj().T) / 2


def drive_operator(p: RegisterParams) -> np.ndarray:
    """Coupling to a transverse field along x, in Hz per tesla."""
    return p.gamma_e * np.kron(SX, _E2) + p.gamma_n * np.kron(_E3, IX)


def eigensystem(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and orthonormal eigenvectors (columns) of a Hermitian matrix.

    Each eigenvector is rotated so that its largest component is real and positive,
    which fixes the phase gauge used by pulse phases.
    """
    h = np.asarray(h, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(h))))
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("eigensystem needs a square matrix")
    if np.max(np.abs(h - h.conj().T)) > 1e-12 * scale:
        raise ValueError("eigensystem needs a Hermitian matrix")
    values, vectors = np.linalg.eigh(h)
    for k in range(vectors.shape[1]):
        j = int(np.argmax(np.abs(vectors[:, k])))
        vectors[:, k] *= np.exp(-1j * np.angle(vectors[j, k]))
    return values, vectors


def label_eigenstates(vectors: np.ndarray) -> Tuple[Level, ...]:
    """Assign product labels by maximum overlap; ties go to the lower product index."""
    overlaps = np.abs(vectors) ** 2
    labels = []
    for k in range(vectors.shape[1]):
        labels.append(BASIS_LABELS[int(np.argmax(overlaps[:, k]))])
    if len(set(labels)) != len(labels):
        raise TransitionError(f"ambiguous eigenstate labeling: {labels}")
    return tuple(labels)


@lru_cache(maxsize=256)
def register_eigensystem(p: RegisterParams) -> Eigensystem:
    values, vectors = eigensystem(build_hamiltonian(p))
    labels = label_eigenstates(vectors)
    values.setflags(write=False)
    vectors.setflags(write=False)
    return Eigensystem(values, vectors, labels)


def transition(p: RegisterParams, label: str) -> Transition:
    if label not in TRANSITION_LEVELS:
        raise ValueError(f"unknown transition {label!r}")
    es = register_eigensystem(p)
    a, b = (es.index(lv) for lv in TRANSITION_LEVELS[label])
    if es.energies[a] > es.energies[b]:
        a, b = b, a
    freq = float(es.energies[b] - es.energies[a])
    if freq <= 1e-9 * max(1.0, float(np.max(np.abs(es.energies)))):
        raise TransitionError(f"{label} levels are degenerate")
    return Transition(label, (a, b), freq)


def transitions(p: RegisterParams) -> Dict[str, Transition]:
    return {label: transition(p, label) for label in TRANSITION_LEVELS}


def _as_transition(p: RegisterParams, t: Union[Transition, str]) -> Transition:
    return transition(p, t) if isinstance(t, str) else t


def _bare_element(p: RegisterParams, label: str) -> float:
    if label.startswith("RF"):
        return p.gamma_n * 0.5
    return p.gamma_e / _SQRT2


def transition_strength(p: RegisterParams, t: Union[Transition, str]) -> float:
    """Eigenbasis drive matrix element relative to the bare (unmixed) one."""
    t = _as_transition(p, t)
    es = register_eigensystem(p)
    lower, upper = t.levels
    element = es.vectors[:, upper].conj() @ drive_operator(p) @ es.vectors[:, lower]
    return float(abs(element) / _bare_element(p, t.label))


def enhancement_factor_analytic(p: RegisterParams, mS: int) -> float:
    if mS not in (-1, 0, 1):
        raise ValueError(f"mS must be -1, 0 or +1, got {mS}")
    return (p.gamma_e / p.gamma_n) * (p.A_perp / p.D) * (3 * abs(mS) - 2)


def enhancement_factor_numeric(p: RegisterParams, t: Union[Transition, str] = "RF1") -> float:
    t = _as_transition(p, t)
    if not t.label.startswith("RF"):
        raise ValueError(f"enhancement is defined for nuclear transitions, got {t.label}")
    return transition_strength(p, t)


def calibrate_a_par(p: RegisterParams, target: float = 127.2e6, span: float = 30e6) -> RegisterParams:
    """Return params whose RF1 eigen-splitting equals ``target`` (Hz)."""

    def mismatch(a_par: float) -> float:
        return transition(replace(p, A_par=a_par), "RF1").frequency - target

    a_par = brentq(mismatch, target - span, target + span, xtol=1e-3)
    logger.debug("calibrated A_par = %.6f MHz for RF1 = %.4f MHz", a_par / 1e6, target / 1e6)
    return replace(p, A_par=a_par)


def _to_eig(rho: np.ndarray, es: Eigensystem) -> np.ndarray:
    return es.vectors.conj().T @ rho @ es.vectors


def _from_eig(rho_eig: np.ndarray, es: Eigensystem) -> np.ndarray:
    out = es.vectors @ rho_eig @ es.vectors.conj().T
    return (out + out.conj().T) / 2


def _dephasing_factors(es: Eigensystem, p: RegisterParams, duration: float) -> np.ndarray:
    """Schur-product damping: electron-type and nuclear-type coherences decay exponentially."""
    ms = np.array([lv[0] for lv in es.labels])
    nuc = np.array([lv[1] for lv in es.labels])
    electron = np.where(ms[:, None] != ms[None, :], math.exp(-duration / p.T2star_e), 1.0)
    nuclear = np.where(nuc[:, None] != nuc[None, :], math.exp(-duration / p.T2star_n), 1.0)
    return electron * nuclear


def _frame_energies(es: Eigensystem, frame: Frame) -> np.ndarray:
    if frame.kind == "lab":
        return np.asarray(es.energies, dtype=float)
    energies = np.zeros(len(es.energies))
    if frame.transition is not None:
        energies[frame.transition.levels[1]] = -frame.detuning
    return energies


def pulse_unitary(angle: float, phase: float) -> np.ndarray:
    """2x2 rotation in the (lower, upper) basis."""
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    return np.array(
        [[c, -np.exp(-1j * phase) * s], [np.exp(1j * phase) * s, c]], dtype=complex
    )


def _embed(u2: np.ndarray, levels: Tuple[int, int]) -> np.ndarray:
    u = np.eye(6, dtype=complex)
    lower, upper = levels
    u[np.ix_([lower, upper], [lower, upper])] = u2
    return u


def apply_ideal_pulse(
    state: QuantumState, p: RegisterParams, t: Union[Transition, str], angle: float, phase: float = 0.0
) -> QuantumState:
    """Selective rotation on the two eigenlevels of ``t``; identity elsewhere."""
    t = _as_transition(p, t)
    es = register_eigensystem(p)
    u = _embed(pulse_unitary(angle, phase), t.levels)
    rho = u @ _to_eig(state.rho, es) @ u.conj().T
    return state._replace_rho(_from_eig(rho, es))


def evolve_free(
    state: QuantumState,
    p: RegisterParams,
    duration: float,
    frame: Frame = LAB,
    dephasing: bool = False,
) -> QuantumState:
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    if duration == 0:
        return state
    es = register_eigensystem(p)
    phases = np.exp(-2j * np.pi * _frame_energies(es, frame) * duration)
    rho = _to_eig(state.rho, es) * np.outer(phases, phases.conj())
    if dephasing:
        rho = rho * _dephasing_factors(es, p, duration)
    return state._replace_rho(_from_eig(rho, es))


def unresolved_drive(p: RegisterParams, t: Union[Transition, str], rabi_eff: float) -> Optional[str]:
    """Warning text when an effective Rabi frequency exceeds the gap to the nearest other transition."""
    t = _as_transition(p, t)
    others = [o.frequency for o in transitions(p).values() if o.label != t.label]
    gap = min(abs(t.frequency - f) for f in others)
    if rabi_eff > gap:
        return (
            f"{t.label} drive unresolved: Rabi {rabi_eff / 1e6:.3f} MHz exceeds "
            f"neighbouring splitting {gap / 1e6:.3f} MHz"
        )
    return None


def evolve_driven(
    state: QuantumState,
    p: RegisterParams,
    t: Union[Transition, str],
    rabi: float,
    phase: float,
    duration: float,
    detuning: float = 0.0,
    dephasing: bool = False,
) -> QuantumState:
    """Rotating-wave drive of one transition.

    ``rabi`` is the bare Rabi frequency (Hz); the effective one is scaled by
    ``transition_strength``. Other levels stay stationary (all other drives resonant).
    """
    if rabi < 0:
        raise ValueError(f"rabi must be non-negative, got {rabi}")
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    t = _as_transition(p, t)
    es = register_eigensystem(p)
    rabi_eff = rabi * transition_strength(p, t)

    warning = unresolved_drive(p, t, rabi_eff)
    if warning:
        logger.warning(warning)
        state = state.with_warning(warning)

    # (i*rabi/2)(e^{i phase} sigma+ - e^{-i phase} sigma-) - detuning |u><u|, basis (lower, upper)
    h2 = np.array(
        [[0.0, -0.5j * rabi_eff * np.exp(-1j * phase)],
         [0.5j * rabi_eff * np.exp(1j * phase), -detuning]],
        dtype=complex,
    )
    u = _embed(expm(-2j * np.pi * h2 * duration), t.levels)

    rho = _to_eig(state.rho, es)
    if dephasing:
        half = _dephasing_factors(es, p, duration / 2)
        rho = half * (u @ (half * rho) @ u.conj().T)
    else:
        rho = u @ rho @ u.conj().T
    return state._replace_rho(_from_eig(rho, es))


def evolve_driven_lab(
    state: QuantumState,
    p: RegisterParams,
    t: Union[Transition, str],
    rabi: float,
    phase: float,
    duration: float,
    steps_per_period: int = 50,
) -> QuantumState:
    """Full-cosine lab-frame integration, used to validate the rotating-wave drive.

    The field amplitude is chosen so that the bare Rabi frequency equals ``rabi``;
    fixed midpoint steps no longer than 1/(steps_per_period * max frequency).
    """
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    t = _as_transition(p, t)
    h0 = build_hamiltonian(p)
    coupling = drive_operator(p) * (rabi / (2 * _bare_element(p, t.label)))
    spread = float(np.ptp(np.linalg.eigvalsh(h0)))
    f_max = max(spread, t.frequency)
    n_steps = max(1, int(math.ceil(duration * steps_per_period * f_max)))
    dt = duration / n_steps
    logger.debug("lab-frame drive on %s: %d steps of %.3e s", t.label, n_steps, dt)

    rho = state.rho
    for k in range(n_steps):
        tm = (k + 0.5) * dt
        h = h0 + 2 * math.cos(2 * math.pi * t.frequency * tm + phase) * coupling
        u = expm(-2j * np.pi * h * dt)
        rho = u @ rho @ u.conj().T
    return state._replace_rho((rho + rho.conj().T) / 2)


def bright_population(state: QuantumState, p: RegisterParams) -> float:
    """Optical readout signal: population of the mS=0 eigenlevels."""
    pops = state.populations(p)
    return pops[(0, "up")] + pops[(0, "down")]


def state_distance(a: QuantumState, b: QuantumState) -> float:
    """Trace-norm distance between two states."""
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(a.rho - b.rho))))


def pi_time(p: RegisterParams, t: Union[Transition, str], rabi: float) -> float:
    """Duration of a pi rotation for bare Rabi frequency ``rabi``."""
    return 1.0 / (2.0 * rabi * transition_strength(p, _as_transition(p, t)))

