import hashlib
import json
import math
import re
from datetime import datetime

UNITS = {
    'time': {'s': 1.0, 'ms': 1e-3, 'us': 1e-6, 'µs': 1e-6, 'μs': 1e-6, 'ns': 1e-9},
    'frequency': {'Hz': 1.0, 'kHz': 1e3, 'MHz': 1e6, 'GHz': 1e9},
    'field': {'T': 1.0, 'mT': 1e-3, 'G': 1e-4},
    'gyromagnetic': {'Hz/T': 1.0, 'kHz/T': 1e3, 'MHz/T': 1e6, 'GHz/T': 1e9},
    'angle': {'rad': 1.0, 'deg': math.pi / 180, 'pi': math.pi},
}

QUANTITY_PATTERN = re.compile(
    r'^\s*(?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(?P<unit>[^\s\d.+-][^\s]*)?\s*$'
)


def unit_kind(unit):
    """Return the quantity kind ('time', 'frequency', ...) a unit belongs to, or None"""
    for kind, table in UNITS.items():
        if unit in table:
            return kind
    return None


def split_quantity(text):
    """Split '4.3MHz' into (4.3, 'MHz'); a bare number gives (value, '')"""
    match = QUANTITY_PATTERN.match(text)
    if not match:
        raise ValueError(f"not a number with unit: {text!r}")
    return float(match.group('number')), match.group('unit') or ''


def to_si(value, unit, kind=None):
    """Convert a value in ``unit`` to SI; ``kind`` restricts which units are accepted"""
    if unit == '':
        return float(value)
    found = unit_kind(unit)
    if found is None or (kind is not None and found != kind):
        expected = f" {kind}" if kind else ""
        raise ValueError(f"unknown{expected} unit {unit!r}")
    result = float(value) * UNITS[found][unit]
    if not math.isfinite(result):
        raise ValueError(f"non-finite value {value}{unit}")
    return result


def parse_pi_fraction(text):
    """'pi', 'pi/2', '2pi' style angles in radians, or None if the text is not one"""
    match = re.fullmatch(r'\s*(?P<mult>\d*\.?\d*)\s*pi\s*(?:/\s*(?P<div>\d+))?\s*', text)
    if not match:
        return None
    mult = float(match.group('mult')) if match.group('mult') not in ('', '.') else 1.0
    div = int(match.group('div')) if match.group('div') else 1
    if div == 0:
        raise ValueError("division by zero in angle")
    return mult * math.pi / div


def parse_rate(text):
    """'1/0.17us' or '5.9e6/s' style rates in 1/s"""
    text = text.strip()
    if text.startswith('1/'):
        value, unit = split_quantity(text[2:])
        lifetime = to_si(value, unit, 'time')
        if lifetime <= 0:
            raise ValueError(f"lifetime must be positive in {text!r}")
        return 1.0 / lifetime
    if text.endswith('/s'):
        value, unit = split_quantity(text[:-2])
        if unit:
            raise ValueError(f"unexpected unit in rate {text!r}")
        return value
    value, unit = split_quantity(text)
    if unit == 'Hz':
        return value
    if unit:
        raise ValueError(f"not a rate: {text!r}")
    return value


def generate_params_hash(snapshot):
    """Short stable hash of a parameter snapshot for tagging output files"""
    payload = json.dumps(snapshot, sort_keys=True, default=repr)
    return hashlib.md5(payload.encode()).hexdigest()[:8]


def format_timestamp(timestamp):
    """Format timestamp for display"""
    if isinstance(timestamp, str):
        try:
            timestamp = datetime.fromisoformat(timestamp)
        except ValueError:
            return timestamp

    return timestamp.strftime("%Y-%m-%d %H:%M:%S")


def truncate_text(text, max_length=100):
    """Truncate text with ellipsis"""
    if len(text) <= max_length:
        return text
    return text[:max_length-3] + "..."


def format_si(value):
    """Compact representation used in summary lines and CSV cells"""
    return f"{value:.12g}"
