"""Run configuration: JSON5 files with unit-suffixed values, plus environment settings."""

import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import json5
import numpy as np
from dotenv import load_dotenv

from .dissipation import MEASURED_RATES, RateParams, rates_from_table
from .spin_core import RegisterParams
from .utils import parse_pi_fraction, parse_rate, split_quantity, to_si

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

REGISTER_KINDS = {
    "D": "frequency",
    "B": "field",
    "gamma_e": "gyromagnetic",
    "gamma_n": "gyromagnetic",
    "A_par": "frequency",
    "A_perp": "frequency",
    "T1e": "time",
    "T2star_n": "time",
    "T2C_pure": "time",
    "T2star_e": "time",
}
TOP_LEVEL_KEYS = ("experiment", "register", "rates", "rate_table", "laser_power", "ensemble", "seed",
                  "readout_noise", "output_dir", "sweep")
TRAJECTORY_EXPERIMENTS = ("cpmg-storage", "extended-dd")
WORD = re.compile(r"[A-Za-z][\w-]*")


class ConfigError(ValueError):
    """Invalid configuration, rendered as ``file:line: error: message``."""

    def __init__(self, message: str, path: Optional[str] = None, line: int = 1):
        super().__init__(message)
        self.message = message
        self.path = path
        self.line = line

    def __str__(self) -> str:
        return f"{self.path or '<config>'}:{self.line}: error: {self.message}"


@dataclass(frozen=True)
class SweepAxis:
    param: str
    values: Tuple[float, ...]


@dataclass
class RunConfig:
    experiment: Optional[str] = None
    register: RegisterParams = RegisterParams()
    rates: RateParams = MEASURED_RATES
    rate_table: Tuple[Dict[str, float], ...] = ()
    laser_power: float = 1.0
    grid: Optional[np.ndarray] = None
    options: Dict[str, Any] = field(default_factory=dict)
    ensemble: int = 1000
    seed: Optional[int] = 0
    readout_noise: float = 0.0
    output_dir: Path = Path("results")
    sweep: Optional[SweepAxis] = None
    path: Optional[str] = None

    @property
    def effective_rates(self) -> RateParams:
        """Rates at ``laser_power`` when a table is configured, else the fixed rates."""
        if self.rate_table:
            return rates_from_table(self.rate_table, self.laser_power)
        return self.rates

    def with_value(self, param: str, value: float) -> "RunConfig":
        """Copy with one dotted parameter (``register.B``, ``experiment.tau``, ...) replaced."""
        section, _, key = param.partition(".")
        if section == "register" and key in REGISTER_KINDS:
            return replace(self, register=replace(self.register, **{key: value}))
        if section == "rates" and key in ("alpha", "beta", "gamma"):
            return replace(self, rates=replace(self.rates, **{key: value}))
        if section == "experiment" and key:
            return replace(self, options={**self.options, key: value})
        if not key and section in ("laser_power", "readout_noise"):
            return replace(self, **{section: float(value)})
        raise ConfigError(f"cannot sweep {param!r}", self.path, 1)

    def snapshot(self) -> Dict[str, Any]:
        rates = self.effective_rates
        return {
            "experiment": self.experiment,
            "register": self.register.snapshot(),
            "rates": {"alpha": rates.alpha, "beta": rates.beta, "gamma": rates.gamma},
            "laser_power": self.laser_power,
            "grid": None if self.grid is None else [float(v) for v in self.grid],
            "options": {k: (v if isinstance(v, (str, bool, int)) else float(v)) for k, v in self.options.items()},
            "ensemble": self.ensemble,
            "seed": self.seed,
            "readout_noise": self.readout_noise,
        }


def parse_value(value: Any, kind: Optional[str] = None) -> float:
    """A JSON number (SI) or a unit-suffixed string ('3.3ms', '65G', 'pi/2', '1/0.17us')."""
    if isinstance(value, bool):
        raise ValueError(f"expected a quantity, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"expected a quantity, got {value!r}")
    text = value.strip()
    if text.lower() in ("inf", "infinity"):
        return math.inf
    if kind == "rate":
        return parse_rate(text)
    if kind in (None, "angle"):
        angle = parse_pi_fraction(text)
        if angle is not None:
            return angle
    number, unit = split_quantity(text)
    return to_si(number, unit, kind)


def _locate(text: str, key: str) -> int:
    pattern = re.compile(r"""(^|[\s{,])["']?""" + re.escape(key) + r"""["']?\s*:""")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return 1


def line_of(path: Optional[str], key: str) -> int:
    """Line of ``key`` in a configuration file, or 1 when it cannot be found."""
    if not path or not Path(path).exists():
        return 1
    return _locate(Path(path).read_text(encoding="utf-8"), key)


class _Loader:
    def __init__(self, text: str, path: Optional[str]):
        self.text = text
        self.path = path

    def fail(self, message: str, key: str) -> ConfigError:
        return ConfigError(message, self.path, _locate(self.text, key))

    def quantity(self, value: Any, key: str, kind: Optional[str] = None) -> float:
        try:
            return parse_value(value, kind)
        except ValueError as exc:
            raise self.fail(f"{key}: {exc}", key) from None

    def section(self, data: Any, key: str) -> Dict[str, Any]:
        if not isinstance(data, dict):
            raise self.fail(f"{key} must be an object", key)
        return data

    def register(self, data: Any) -> RegisterParams:
        values = {}
        for key, value in self.section(data, "register").items():
            if key not in REGISTER_KINDS:
                raise self.fail(f"unknown register parameter {key!r}", key)
            values[key] = self.quantity(value, key, REGISTER_KINDS[key])
        try:
            return RegisterParams(**values)
        except ValueError as exc:
            raise self.fail(str(exc), "register") from None

    def rates(self, data: Any, key: str = "rates") -> RateParams:
        section = self.section(data, key)
        unknown = set(section) - {"alpha", "beta", "gamma", "power"}
        if unknown:
            name = sorted(unknown)[0]
            raise self.fail(f"unknown rate {name!r}", name)
        missing = [k for k in ("alpha", "beta", "gamma") if k not in section]
        if missing:
            raise self.fail(f"{key} needs {', '.join(missing)}", key)
        try:
            return RateParams(*(self.quantity(section[k], k, "rate") for k in ("alpha", "beta", "gamma")))
        except ValueError as exc:
            raise self.fail(str(exc), key) from None

    def rate_table(self, data: Any) -> Tuple[Dict[str, float], ...]:
        if isinstance(data, str):
            base = Path(self.path).parent if self.path else Path(".")
            table_path = base / data
            if not table_path.exists():
                raise self.fail(f"rate table {data!r} not found", "rate_table")
            return load_rate_table(table_path)
        if isinstance(data, dict):
            data = data.get("table")
        if not isinstance(data, list) or not data:
            raise self.fail("rate_table must be a non-empty list or a file name", "rate_table")
        rows = []
        for row in data:
            if not isinstance(row, dict) or "power" not in row:
                raise self.fail("every rate_table row needs a power", "power")
            rates = self.rates(row, "rate_table")
            rows.append({"power": self.quantity(row["power"], "power"),
                         "alpha": rates.alpha, "beta": rates.beta, "gamma": rates.gamma})
        powers = [r["power"] for r in rows]
        if len(set(powers)) != len(powers):
            raise self.fail("duplicate power in rate_table", "power")
        return tuple(sorted(rows, key=lambda r: r["power"]))

    def grid(self, data: Any) -> np.ndarray:
        if isinstance(data, list):
            return np.array([self.quantity(v, "grid") for v in data])
        section = self.section(data, "grid")
        try:
            start = self.quantity(section["from"], "from")
            stop = self.quantity(section["to"], "to")
            steps = section["steps"]
        except KeyError as exc:
            raise self.fail(f"grid needs {exc.args[0]!r}", "grid") from None
        if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
            raise self.fail("grid steps must be a positive integer", "steps")
        return np.linspace(start, stop, steps)

    def option(self, key: str, value: Any) -> Any:
        if isinstance(value, (bool, int)) or value is None:
            return value
        if isinstance(value, str):
            try:
                return parse_value(value)
            except ValueError:
                if WORD.fullmatch(value.strip()):
                    return value.strip()
                raise self.fail(f"{key}: cannot parse {value!r}", key) from None
        return self.quantity(value, key)

    def sweep(self, data: Any) -> SweepAxis:
        section = self.section(data, "sweep")
        param = section.get("param")
        values = section.get("values", [])
        if not isinstance(param, str) or not param:
            raise self.fail("sweep needs a param name", "sweep")
        if not isinstance(values, list):
            raise self.fail("sweep values must be a list", "values")
        section_name, _, key = param.partition(".")
        kind = REGISTER_KINDS.get(key) if section_name == "register" else ("rate" if section_name == "rates" else None)
        return SweepAxis(param, tuple(self.quantity(v, "values", kind) for v in values))


def load_rate_table(path: Union[str, Path]) -> Tuple[Dict[str, float], ...]:
    """Laser power -> rates table from a JSON5 file (``{table: [...]}`` or a bare list)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    loader = _Loader(text, str(path))
    try:
        data = json5.loads(text)
    except ValueError as exc:
        raise ConfigError(str(exc), str(path), _error_line(exc)) from None
    return loader.rate_table(data)


def _error_line(exc: Exception) -> int:
    match = re.search(r"(?:line |:)(\d+)", str(exc))
    return int(match.group(1)) if match else 1


def parse_config(text: str, path: Optional[str] = None, experiment: Optional[str] = None) -> RunConfig:
    try:
        data = json5.loads(text)
    except ValueError as exc:
        raise ConfigError(f"invalid JSON5: {exc}", path, _error_line(exc)) from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be an object", path, 1)
    loader = _Loader(text, path)
    for key in data:
        if key not in TOP_LEVEL_KEYS:
            raise loader.fail(f"unknown section {key!r}", key)

    cfg = RunConfig(path=path)
    if "register" in data:
        cfg.register = loader.register(data["register"])
    if "rates" in data:
        cfg.rates = loader.rates(data["rates"])
    if "rate_table" in data:
        cfg.rate_table = loader.rate_table(data["rate_table"])
    if "laser_power" in data:
        cfg.laser_power = loader.quantity(data["laser_power"], "laser_power")

    section = dict(loader.section(data.get("experiment", {}), "experiment"))
    cfg.experiment = experiment or section.pop("name", None)
    section.pop("name", None)
    if "grid" in section:
        cfg.grid = loader.grid(section.pop("grid"))
    cfg.options = {key: loader.option(key, value) for key, value in section.items()}

    ensemble = data.get("ensemble", cfg.ensemble)
    if isinstance(ensemble, bool) or not isinstance(ensemble, int) or ensemble < 1:
        raise loader.fail("ensemble must be a positive integer", "ensemble")
    cfg.ensemble = ensemble
    seed = data.get("seed", cfg.seed)
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise loader.fail("seed must be a non-negative integer", "seed")
    cfg.seed = seed
    if cfg.experiment in TRAJECTORY_EXPERIMENTS and cfg.seed is None:
        raise loader.fail(f"{cfg.experiment} samples trajectories and needs a seed", "seed")
    if "readout_noise" in data:
        cfg.readout_noise = loader.quantity(data["readout_noise"], "readout_noise")
        if cfg.readout_noise < 0:
            raise loader.fail("readout_noise must be non-negative", "readout_noise")
    if "output_dir" in data:
        cfg.output_dir = Path(str(data["output_dir"]))
    if "sweep" in data:
        cfg.sweep = loader.sweep(data["sweep"])
    logger.debug("loaded configuration %s for %s", path or "<text>", cfg.experiment)
    return cfg


def load_config(path: Union[str, Path], experiment: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("configuration file not found", str(path), 1)
    return parse_config(path.read_text(encoding="utf-8"), str(path), experiment)


def thread_limit() -> int:
    """Worker cap for ensemble shards (``NVMEM_THREADS``, default 1)."""
    value = os.getenv("NVMEM_THREADS", "").strip()
    if not value:
        return 1
    try:
        return max(int(value), 1)
    except ValueError:
        raise ConfigError(f"NVMEM_THREADS must be an integer, got {value!r}", ".env", 1) from None


def database_path() -> str:
    return os.getenv("NVMEM_DB", "data/runs.db")


def log_level() -> str:
    return os.getenv("NVMEM_LOG_LEVEL", "WARNING").upper()
