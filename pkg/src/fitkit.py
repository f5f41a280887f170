"""Least-squares curve fits for sweep signals.

Each model is a small class in the style of ``value`` / ``jacobian`` / ``guess``
static methods; :func:`_run_fit` drives ``scipy.optimize.least_squares`` with the
analytic Jacobian, projecting bounds and holding any fixed parameters.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .dissipation import RateParams, _coalesced, _g

logger = logging.getLogger(__name__)

TOLERANCE = 1e-14
MAX_EVALUATIONS = 2000


@dataclass
class FitResult:
    model: str
    params: Dict[str, float]
    units: Dict[str, str]
    stderr: Dict[str, float]
    residual: float
    converged: bool
    iterations: int
    message: str = ""
    held: Dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stderr"] = {k: (None if not math.isfinite(v) else v) for k, v in self.stderr.items()}
        return out


def _prepare(x, y, sigma) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be 1-D arrays of equal length, got {x.shape} and {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("fit data must be finite")
    if sigma is None:
        w = np.ones_like(y)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
        if np.any(sigma <= 0):
            raise ValueError("per-point sigma must be positive")
        w = 1.0 / sigma
    order = np.argsort(x, kind="stable")
    return x[order], y[order], w[order]


def _is_flat(y: np.ndarray) -> bool:
    return float(np.ptp(y)) <= 1e-12 * max(1.0, float(np.max(np.abs(y))))


def _nyquist(x: np.ndarray) -> float:
    steps = np.diff(x)
    steps = steps[steps > 0]
    if len(steps) == 0:
        raise ValueError("fit grid needs at least two distinct x values")
    return 0.5 / float(np.median(steps))


class Cosine:
    """A * cos(2 pi f x + phi) + y0, with A >= 0 and 0 < f <= Nyquist."""

    name = "cosine"
    names = ("amplitude", "frequency", "phase", "offset")
    units = ("", "Hz", "rad", "")

    @staticmethod
    def value(x, amplitude, frequency, phase, offset):
        return amplitude * np.cos(2 * np.pi * frequency * x + phase) + offset

    @staticmethod
    def jacobian(x, amplitude, frequency, phase, offset):
        arg = 2 * np.pi * frequency * x + phase
        c, s = np.cos(arg), np.sin(arg)
        return np.column_stack([c, -amplitude * s * 2 * np.pi * x, -amplitude * s, np.ones_like(x)])

    @staticmethod
    def bounds(x):
        nyq = _nyquist(x)
        return [0.0, 1e-9 * nyq, -np.inf, -np.inf], [np.inf, nyq, np.inf, np.inf]

    @staticmethod
    def guess(x, y, w):
        # scan frequencies below Nyquist; A, phi and y0 are linear for a fixed frequency
        nyq = _nyquist(x)
        span = float(x[-1] - x[0])
        candidates = np.linspace(0.25 / span, nyq, 800)
        detrended = y - np.mean(y)
        spectrum = np.abs(np.fft.rfft(detrended))
        freqs = np.fft.rfftfreq(len(y), d=0.5 / nyq)
        if len(spectrum) > 1:
            peak = freqs[1:][int(np.argmax(spectrum[1:]))]
            candidates = np.append(candidates, peak)
        best = None
        for f in candidates:
            arg = 2 * np.pi * f * x
            basis = np.column_stack([np.cos(arg), np.sin(arg), np.ones_like(x)]) * w[:, None]
            coef, *_ = np.linalg.lstsq(basis, y * w, rcond=None)
            cost = float(np.sum((basis @ coef - y * w) ** 2))
            if best is None or cost < best[0]:
                best = (cost, f, coef)
        _, f, (a, b, y0) = best
        return {
            "amplitude": float(math.hypot(a, b)),
            "frequency": float(f),
            "phase": float(math.atan2(-b, a)),
            "offset": float(y0),
        }


class DampedCosine:
    """A * exp(-x / tau) * cos(2 pi f x + phi) + y0."""

    name = "damped-cosine"
    names = ("amplitude", "frequency", "decay_time", "phase", "offset")
    units = ("", "Hz", "s", "rad", "")

    @staticmethod
    def value(x, amplitude, frequency, decay_time, phase, offset):
        return amplitude * np.exp(-x / decay_time) * np.cos(2 * np.pi * frequency * x + phase) + offset

    @staticmethod
    def jacobian(x, amplitude, frequency, decay_time, phase, offset):
        arg = 2 * np.pi * frequency * x + phase
        env = np.exp(-x / decay_time)
        c, s = env * np.cos(arg), env * np.sin(arg)
        return np.column_stack([
            c,
            -amplitude * s * 2 * np.pi * x,
            amplitude * c * x / decay_time ** 2,
            -amplitude * s,
            np.ones_like(x),
        ])

    @staticmethod
    def bounds(x):
        nyq = _nyquist(x)
        return [0.0, 1e-9 * nyq, 1e-12, -np.inf, -np.inf], [np.inf, nyq, np.inf, np.inf, np.inf]

    @staticmethod
    def guess(x, y, w):
        g = Cosine.guess(x, y, w)
        span = float(x[-1] - x[0])
        best = None
        for tau in np.geomspace(0.05 * span, 50 * span, 40):
            arg = 2 * np.pi * g["frequency"] * x
            env = np.exp(-x / tau)
            basis = np.column_stack([env * np.cos(arg), env * np.sin(arg), np.ones_like(x)]) * w[:, None]
            coef, *_ = np.linalg.lstsq(basis, y * w, rcond=None)
            cost = float(np.sum((basis @ coef - y * w) ** 2))
            if best is None or cost < best[0]:
                best = (cost, tau, coef)
        _, tau, (a, b, y0) = best
        return {
            "amplitude": float(math.hypot(a, b)),
            "frequency": g["frequency"],
            "decay_time": float(tau),
            "phase": float(math.atan2(-b, a)),
            "offset": float(y0),
        }


class Exponential:
    """A * exp(-x / tau) + y0."""

    name = "exponential"
    names = ("amplitude", "decay_time", "offset")
    units = ("", "s", "")

    @staticmethod
    def value(x, amplitude, decay_time, offset):
        return amplitude * np.exp(-x / decay_time) + offset

    @staticmethod
    def jacobian(x, amplitude, decay_time, offset):
        e = np.exp(-x / decay_time)
        return np.column_stack([e, amplitude * e * x / decay_time ** 2, np.ones_like(x)])

    @staticmethod
    def bounds(x):
        return [-np.inf, 1e-15, -np.inf], [np.inf, np.inf, np.inf]

    @staticmethod
    def guess(x, y, w, offset: Optional[float] = None):
        span = max(float(x[-1] - x[0]), float(np.max(np.abs(x))), 1e-300)
        best = None
        for tau in np.geomspace(1e-3 * span, 1e3 * span, 121):
            e = np.exp(-x / tau)
            if offset is None:
                basis = np.column_stack([e, np.ones_like(x)]) * w[:, None]
                coef, *_ = np.linalg.lstsq(basis, y * w, rcond=None)
                model = basis @ coef
            else:
                basis = (e * w)[:, None]
                coef, *_ = np.linalg.lstsq(basis, (y - offset) * w, rcond=None)
                model = basis @ coef + offset * w
                coef = np.append(coef, offset)
            cost = float(np.sum((model - y * w) ** 2))
            if best is None or cost < best[0]:
                best = (cost, tau, coef)
        _, tau, (a, y0) = best
        return {"amplitude": float(a), "decay_time": float(tau), "offset": float(y0)}


MODELS = {m.name: m for m in (Cosine, DampedCosine, Exponential)}


def _covariance_stderr(jac: np.ndarray, rss: float, n: int) -> Tuple[np.ndarray, bool]:
    """Standard errors from (J^T J)^-1 scaled by the reduced residual; flags rank loss."""
    p = jac.shape[1]
    if p == 0:
        return np.zeros(0), True
    _, s, vt = np.linalg.svd(jac, full_matrices=False)
    if s[0] == 0 or s[-1] <= 1e-10 * s[0]:
        return np.full(p, np.inf), False
    cov = (vt.T / s ** 2) @ vt
    dof = max(n - p, 1)
    scale = rss / dof
    return np.sqrt(np.clip(np.diag(cov) * scale, 0.0, None)), True


def _run_fit(
    name: str,
    names: Sequence[str],
    units: Sequence[str],
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    start: Mapping[str, float],
    bounds: Tuple[Sequence[float], Sequence[float]],
    hold: Mapping[str, float],
    n_points: int,
) -> FitResult:
    free = [i for i, k in enumerate(names) if k not in hold]
    lower = np.array([bounds[0][i] for i in free], dtype=float)
    upper = np.array([bounds[1][i] for i in free], dtype=float)

    def full(q: np.ndarray) -> np.ndarray:
        values = np.array([hold.get(k, start[k]) for k in names], dtype=float)
        values[free] = q
        return values

    x0 = np.array([start[names[i]] for i in free], dtype=float)
    # strictly inside the box for the trust-region reflective solver
    width = np.where(np.isfinite(upper - lower), upper - lower, np.abs(x0) + 1.0)
    x0 = np.clip(x0, lower + 1e-9 * width, upper - 1e-9 * width)

    result = least_squares(
        lambda q: residual_fn(full(q)),
        x0,
        jac=lambda q: jacobian_fn(full(q))[:, free],
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        ftol=TOLERANCE,
        xtol=TOLERANCE,
        gtol=TOLERANCE,
        max_nfev=MAX_EVALUATIONS,
    )
    values = full(result.x)
    rss = float(np.sum(result.fun ** 2))
    errors, identifiable = _covariance_stderr(result.jac, rss, n_points)
    converged = bool(result.status > 0) and identifiable
    message = result.message if identifiable else "parameters are not identifiable (rank-deficient Jacobian)"
    if not converged:
        logger.warning("%s fit did not converge: %s", name, message)

    stderr = {k: 0.0 for k in hold}
    stderr.update({names[i]: float(e) for i, e in zip(free, errors)})
    return FitResult(
        model=name,
        params={k: float(v) for k, v in zip(names, values)},
        units=dict(zip(names, units)),
        stderr={k: stderr[k] for k in names},
        residual=rss,
        converged=converged,
        iterations=int(result.nfev),
        message=str(message),
        held=dict(hold),
    )


def _flat_result(model, start: Mapping[str, float], hold: Mapping[str, float], rss: float) -> FitResult:
    logger.warning("%s fit on flat data: parameters are not identifiable", model.name)
    params = {k: float(hold.get(k, start[k])) for k in model.names}
    return FitResult(
        model=model.name,
        params=params,
        units=dict(zip(model.names, model.units)),
        stderr={k: math.inf for k in model.names},
        residual=rss,
        converged=False,
        iterations=0,
        message="flat data: parameters are not identifiable",
        held=dict(hold),
    )


def _fit_model(model, x, y, sigma, guess, hold, min_points) -> FitResult:
    x, y, w = _prepare(x, y, sigma)
    if len(x) < min_points:
        raise ValueError(f"{model.name} fit needs at least {min_points} points, got {len(x)}")
    hold = dict(hold or {})
    unknown = set(hold) - set(model.names)
    if unknown:
        raise ValueError(f"unknown parameters held: {sorted(unknown)}")
    start = model.guess(x, y, w, offset=hold.get("offset")) if model is Exponential else model.guess(x, y, w)
    start.update(guess or {})
    if _is_flat(y):
        start["offset"] = float(np.mean(y))
        rss = float(np.sum(((y - np.mean(y)) * w) ** 2))
        return _flat_result(model, start, hold, rss)

    def residual(values):
        return (model.value(x, *values) - y) * w

    def jacobian(values):
        return model.jacobian(x, *values) * w[:, None]

    fit = _run_fit(model.name, model.names, model.units, residual, jacobian, start,
                   model.bounds(x), hold, len(x))
    if "phase" in fit.params:
        fit.params["phase"] = float(math.remainder(fit.params["phase"], 2 * math.pi))
    return fit


def fit_cosine(x, y, guess: Optional[Dict[str, float]] = None, sigma=None,
               hold: Optional[Dict[str, float]] = None) -> FitResult:
    """Fit ``amplitude*cos(2 pi frequency x + phase) + offset``.

    Needs at least 8 points spanning a full period; the starting point comes from a
    frequency scan unless ``guess`` overrides it.
    """
    return _fit_model(Cosine, x, y, sigma, guess, hold, min_points=8)


def fit_damped_cosine(x, y, guess: Optional[Dict[str, float]] = None, sigma=None,
                      hold: Optional[Dict[str, float]] = None) -> FitResult:
    return _fit_model(DampedCosine, x, y, sigma, guess, hold, min_points=10)


def fit_fringe(x, y, frequency: float, decay_time: float, sigma=None) -> FitResult:
    """Damped cosine with known ``frequency`` and ``decay_time`` (``inf`` for no decay).

    Only amplitude, phase and offset are free, so the linear least-squares solution is
    the starting point. ``amplitude`` is the contrast extrapolated to x = 0.
    """
    if frequency <= 0 or not decay_time > 0:
        raise ValueError("fringe fit needs a positive frequency and decay time")
    xs, ys, w = _prepare(x, y, sigma)
    arg = 2 * np.pi * frequency * xs
    env = np.exp(-xs / decay_time)
    basis = np.column_stack([env * np.cos(arg), env * np.sin(arg), np.ones_like(xs)]) * w[:, None]
    (a, b, y0), *_ = np.linalg.lstsq(basis, ys * w, rcond=None)
    guess = {"amplitude": float(math.hypot(a, b)), "phase": float(math.atan2(-b, a)), "offset": float(y0)}
    hold = {"frequency": float(frequency), "decay_time": float(decay_time)}
    return _fit_model(DampedCosine, x, y, sigma, guess, hold, min_points=10)


def fit_exponential(x, y, offset: Optional[float] = None, guess: Optional[Dict[str, float]] = None,
                    sigma=None) -> FitResult:
    """Fit ``amplitude*exp(-x/decay_time) + offset``; a given ``offset`` is held fixed."""
    hold = {} if offset is None else {"offset": float(offset)}
    return _fit_model(Exponential, x, y, sigma, guess, hold, min_points=3)


RATE_NAMES = ("alpha", "beta", "gamma")


class _RateModel:
    name = "rates"
    names = RATE_NAMES
    units = ("1/s", "1/s", "1/s")


def rate_curves(t: np.ndarray, alpha: float, beta: float, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Total mS=0 population and P(|0,up>) for the swapped initial state."""
    r = RateParams(alpha, beta, gamma)
    a = alpha + beta
    total = 1.0 - 0.5 * np.exp(-a * t)
    up = 0.5 - 0.5 * (alpha - gamma) * _g(r, t)
    return total, up


def rate_jacobian(t: np.ndarray, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """d[total; up]/d(alpha, beta, gamma), shape (2 len(t), 3)."""
    r = RateParams(alpha, beta, gamma)
    a, c = alpha + beta, 2 * gamma
    d = a - c
    g = _g(r, t)
    if _coalesced(r):
        dg_da = dg_dc = 0.5 * t * t * np.exp(-c * t)
    else:
        dg_da = (-t * np.exp(-a * t) - g) / d
        dg_dc = (t * np.exp(-c * t) + g) / d
    k = alpha - gamma
    d_total = 0.5 * t * np.exp(-a * t)
    total = np.column_stack([d_total, d_total, np.zeros_like(t)])
    up = np.column_stack([
        -0.5 * g - 0.5 * k * dg_da,
        -0.5 * k * dg_da,
        0.5 * g - k * dg_dc,
    ])
    return np.vstack([total, up])


def _rate_start(t: np.ndarray, total: np.ndarray) -> float:
    """Log-linear estimate of alpha + beta from the total mS=0 curve."""
    gap = 2 * (1.0 - total)
    mask = (gap > 0.05) & (gap < 0.99) & (t > 0)
    if mask.sum() >= 2:
        slope = np.polyfit(t[mask], np.log(gap[mask]), 1)[0]
        if slope < 0:
            return float(-slope)
    return 5.0 / max(float(t[-1]), 1e-300)


def fit_rate_params(durations, total_ms0, p_up, sigma=None) -> FitResult:
    """Joint fit of both tomography curves for (alpha, beta, gamma) in 1/s."""
    t = np.asarray(durations, dtype=float)
    total_ms0 = np.asarray(total_ms0, dtype=float)
    p_up = np.asarray(p_up, dtype=float)
    if not (t.shape == total_ms0.shape == p_up.shape) or t.ndim != 1:
        raise ValueError("both tomography curves must share the duration grid")
    if np.any(t < 0):
        raise ValueError("laser durations must be non-negative")
    y = np.concatenate([total_ms0, p_up])
    if not np.all(np.isfinite(y)):
        raise ValueError("fit data must be finite")
    w = np.ones_like(y)
    if sigma is not None:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
        if np.any(sigma <= 0):
            raise ValueError("per-point sigma must be positive")
        w = 1.0 / sigma

    def residual(values):
        return (np.concatenate(rate_curves(t, *values)) - y) * w

    def jacobian(values):
        return rate_jacobian(t, *values) * w[:, None]

    if _is_flat(total_ms0) and _is_flat(p_up):
        start = {"alpha": 0.0, "beta": 0.0, "gamma": 0.0}
        rss = float(np.sum(residual(np.zeros(3)) ** 2))
        return _flat_result(_RateModel, start, {}, rss)

    a0 = _rate_start(t, total_ms0)
    bounds = ([0.0, 0.0, 0.0], [np.inf, np.inf, np.inf])
    best = None
    for share in (0.85, 0.6, 0.4):
        for gamma_frac in (0.05, 0.15, 0.4, 1.0):
            start = {"alpha": share * a0, "beta": (1 - share) * a0, "gamma": gamma_frac * a0}
            fit = _run_fit(_RateModel.name, RATE_NAMES, _RateModel.units, residual, jacobian,
                           start, bounds, {}, len(y))
            if best is None or fit.residual < best.residual:
                best = fit
    logger.debug("rate fit: %s", best.params)
    return best
