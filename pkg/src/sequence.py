"""Pulse-sequence language: lexer, recursive-descent parser, compiler and executor.

A program is a list of statements separated by ``;`` or newlines::

    sweep t from 0ns to 1us steps 101
    laser 10us
    mw1 pi
    rf1 X(t)
    mw1 pi
    laser 300ns

See ``docs/sequence_grammar.md`` for the full grammar. Parsing yields an immutable
:class:`SequenceIR` holding the statement tree (so repeat counts can be changed
later) together with the compiled, time-ordered :class:`PulseEvent` list.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import dissipation, spin_core
from .utils import split_quantity, to_si, unit_kind

logger = logging.getLogger(__name__)

CHANNELS = ("LASER", "MW1", "MW2", "RF1", "RF2", "DELAY")
DRIVE_CHANNELS = ("MW1", "MW2", "RF1", "RF2")
DEFAULT_RABI = {"MW1": 25e6, "MW2": 25e6, "RF1": 4.3e6, "RF2": 4.3e6}
MAX_EVENTS = 200_000
MAX_DEPTH = 32
MAX_SWEEP_STEPS = 100_000
TIMING_TOLERANCE = 1e-9
ANGLE_TOLERANCE = 1e-9

# A slot value is either a concrete number (SI units) or the name of a variable
Value = Union[float, str]


class SequenceError(ValueError):
    """Any problem with sequence text, rendered as ``file:line:col: error: message``."""

    def __init__(self, message: str, line: int = 1, col: int = 1, path: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col
        self.path = path

    def render(self) -> str:
        return f"{self.path or '<sequence>'}:{self.line}:{self.col}: error: {self.message}"

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str
    line: int = 0
    col: int = 0
    events: Tuple[int, ...] = ()
    path: Optional[str] = None

    def render(self) -> str:
        where = f"{self.path or '<sequence>'}:{self.line}:{self.col}"
        return f"{where}: {self.severity}: {self.message}"


# ---------------------------------------------------------------- lexer


@dataclass(frozen=True)
class Token:
    kind: str  # WORD, NUMBER, SYMBOL, SEP, EOF
    text: str
    line: int
    col: int


_SYMBOLS = "{}()=/"
_DIGITS = "0123456789"


def tokenize(text: str, path: Optional[str] = None) -> List[Token]:
    tokens: List[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def fail(message: str):
        raise SequenceError(message, line, col, path)

    while i < n:
        ch = text[i]
        if ch == "\n":
            tokens.append(Token("SEP", "\n", line, col))
            i, line, col = i + 1, line + 1, 1
            continue
        if ch in " \t\r\ufeff":
            i, col = i + 1, col + 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == ";":
            tokens.append(Token("SEP", ";", line, col))
            i, col = i + 1, col + 1
            continue
        if ch in _SYMBOLS:
            tokens.append(Token("SYMBOL", ch, line, col))
            i, col = i + 1, col + 1
            continue
        starts_number = ch in _DIGITS or (
            ch in "+-." and i + 1 < n and (text[i + 1] in _DIGITS or (text[i + 1] == "." and ch != "."))
        )
        if starts_number:
            j = i + 1
            while j < n and (text[j] in _DIGITS or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE" and j + 1 < n and (
                text[j + 1] in _DIGITS or (text[j + 1] in "+-" and j + 2 < n and text[j + 2] in _DIGITS)
            ):
                j += 2
                while j < n and text[j] in _DIGITS:
                    j += 1
            while j < n and (text[j].isalpha() or text[j] in "µμ"):
                j += 1
            tokens.append(Token("NUMBER", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(Token("WORD", text[i:j], line, col))
            col += j - i
            i = j
            continue
        fail(f"unexpected character {ch!r}")
    tokens.append(Token("EOF", "", line, col))
    return tokens


# ---------------------------------------------------------------- syntax tree


@dataclass(frozen=True)
class Quantity:
    value: float
    kind: str  # time | angle | frequency | number

    def emit(self) -> str:
        suffix = {"time": "s", "angle": "rad", "frequency": "Hz", "number": ""}[self.kind]
        return f"{self.value!r}{suffix}"


@dataclass(frozen=True)
class Pulse:
    channel: str
    duration: Optional[Value] = None
    angle: Optional[float] = None
    phase: Value = 0.0
    rabi: Optional[Value] = None
    power: float = 1.0
    shorthand: Optional[str] = None  # "X" or "Y" when the duration came from X(var)/Y(var)
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Repeat:
    count: int
    body: Tuple["Node", ...]
    label: Optional[str] = None
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Parallel:
    body: Tuple[Pulse, ...]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


Node = Union[Pulse, Repeat, Parallel]


@dataclass(frozen=True)
class Sweep:
    name: str
    start: Quantity
    stop: Quantity
    steps: int

    def values(self) -> np.ndarray:
        return np.linspace(self.start.value, self.stop.value, self.steps)


@dataclass(frozen=True)
class PulseEvent:
    channel: str
    start: Optional[float]
    duration: Optional[float]
    amplitude: float = 0.0  # effective Rabi frequency (Hz); 0 for LASER and DELAY
    phase: Optional[float] = 0.0
    laser_power: Optional[float] = None
    angle: Optional[float] = None
    unresolved: Tuple[str, ...] = ()
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)

    @property
    def end(self) -> Optional[float]:
        if self.start is None or self.duration is None:
            return None
        return self.start + self.duration

    @property
    def is_drive(self) -> bool:
        return self.channel in DRIVE_CHANNELS


@dataclass(frozen=True)
class SequenceIR:
    program: Tuple[Node, ...] = ()
    sweeps: Tuple[Sweep, ...] = ()
    defaults: Tuple[Tuple[str, Quantity], ...] = ()
    bindings: Tuple[Tuple[str, float], ...] = ()
    events: Tuple[PulseEvent, ...] = field(default=(), compare=False)
    path: Optional[str] = field(default=None, compare=False)

    @property
    def variables(self) -> Tuple[str, ...]:
        names: List[str] = []
        for node in _walk(self.program):
            for slot in (node.duration, node.phase, node.rabi):
                if isinstance(slot, str) and slot not in names:
                    names.append(slot)
        return tuple(names)

    @property
    def environment(self) -> Dict[str, float]:
        env = {name: q.value for name, q in self.defaults}
        env.update(dict(self.bindings))
        return env

    @property
    def unresolved(self) -> Tuple[str, ...]:
        env = self.environment
        return tuple(name for name in self.variables if name not in env)

    @property
    def sweep_variables(self) -> Tuple[str, ...]:
        """Declared sweeps, then variables still waiting for a value from the caller."""
        declared = tuple(s.name for s in self.sweeps)
        return declared + tuple(name for name in self.unresolved if name not in declared)

    @property
    def is_concrete(self) -> bool:
        return not self.unresolved

    @property
    def duration(self) -> Optional[float]:
        ends = [ev.end for ev in self.events]
        if any(e is None for e in ends):
            return None
        return max(ends, default=0.0)


def _walk(nodes: Sequence[Node]) -> Iterator[Pulse]:
    for node in nodes:
        if isinstance(node, Pulse):
            yield node
        elif isinstance(node, Repeat):
            yield from _walk(node.body)
        else:
            yield from node.body


def _repeats(nodes: Sequence[Node]) -> Iterator[Repeat]:
    for node in nodes:
        if isinstance(node, Repeat):
            yield node
            yield from _repeats(node.body)


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, tokens: List[Token], path: Optional[str]):
        self.tokens = tokens
        self.pos = 0
        self.path = path
        self.rabi = dict(DEFAULT_RABI)
        self.sweeps: List[Sweep] = []
        self.defaults: Dict[str, Quantity] = {}
        self.labels: set = set()
        self.depth = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Optional[Token] = None) -> SequenceError:
        tok = tok or self.tok
        return SequenceError(message, tok.line, tok.col, self.path)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        tok = self.tok
        if tok.kind != kind or (text is not None and tok.text != text):
            wanted = repr(text) if text else kind.lower()
            found = repr(tok.text) if tok.text else "end of input"
            raise self.error(f"expected {wanted}, found {found}")
        return self.advance()

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        return self.tok.kind == kind and (text is None or self.tok.text == text)

    def skip_separators(self):
        while self.at("SEP"):
            self.advance()

    def end_statement(self):
        if self.at("SEP"):
            self.skip_separators()
        elif not (self.at("EOF") or self.at("SYMBOL", "}")):
            raise self.error(f"unexpected {self.tok.text!r} after statement")

    # grammar
    def program(self, closing: Optional[Token] = None) -> Tuple[Node, ...]:
        nodes: List[Node] = []
        self.skip_separators()
        while not self.at("EOF"):
            if self.at("SYMBOL", "}"):
                if closing is None:
                    raise self.error("unmatched '}'")
                return tuple(nodes)
            node = self.statement(nested=closing is not None)
            if node is not None:
                nodes.append(node)
            self.end_statement()
        if closing is not None:
            raise self.error("missing '}' for block opened here", closing)
        return tuple(nodes)

    def statement(self, nested: bool) -> Optional[Node]:
        tok = self.tok
        if tok.kind != "WORD":
            raise self.error(f"expected a statement, found {tok.text or 'end of input'!r}")
        word = tok.text.lower()
        if word == "laser":
            return self.laser()
        if word == "delay":
            self.advance()
            return Pulse("DELAY", duration=self.duration_value(), line=tok.line, col=tok.col)
        if word.upper() in DRIVE_CHANNELS:
            return self.pulse()
        if word == "repeat":
            return self.repeat()
        if word == "par":
            return self.parallel()
        if word == "rabi":
            self.rabi_directive()
            return None
        if word == "sweep":
            if nested:
                raise self.error("sweep must be declared at top level")
            self.sweep()
            return None
        if word == "let":
            if nested:
                raise self.error("let must be declared at top level")
            self.let()
            return None
        raise self.error(f"unknown channel or statement {tok.text!r}")

    def quantity(self, kinds: Sequence[str], what: str) -> Quantity:
        tok = self.tok
        if tok.kind == "WORD" and tok.text == "pi" and "angle" in kinds:
            return Quantity(self.pi_angle(), "angle")
        if tok.kind != "NUMBER":
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}")
        self.advance()
        try:
            value, unit = split_quantity(tok.text)
        except ValueError:
            raise self.error(f"cannot parse {what} {tok.text!r}", tok) from None
        if unit == "pi" and "angle" in kinds:
            value = value * math.pi
            if self.at("SYMBOL", "/"):
                value /= self.divisor()
            return Quantity(self._finite(value, tok), "angle")
        kind = unit_kind(unit) if unit else "number"
        if kind not in kinds:
            raise self.error(f"expected {what}, found {tok.text!r}", tok)
        try:
            value = to_si(value, unit, None if kind == "number" else kind)
        except ValueError as exc:
            raise self.error(str(exc), tok) from None
        return Quantity(self._finite(value, tok), kind)

    def _finite(self, value: float, tok: Token) -> float:
        if not math.isfinite(value):
            raise self.error(f"non-finite number {tok.text!r}", tok)
        return value

    def divisor(self) -> float:
        self.expect("SYMBOL", "/")
        tok = self.expect("NUMBER")
        try:
            div = float(tok.text)
        except ValueError:
            raise self.error(f"bad divisor {tok.text!r}", tok) from None
        if div == 0 or not math.isfinite(div):
            raise self.error("angle divisor must be a non-zero number", tok)
        return div

    def pi_angle(self) -> float:
        self.expect("WORD", "pi")
        angle = math.pi
        if self.at("SYMBOL", "/"):
            angle /= self.divisor()
        return angle

    def duration_value(self) -> Value:
        tok = self.tok
        if tok.kind == "WORD":
            return self.advance().text
        q = self.quantity(("time",), "a duration")
        if q.value < 0:
            raise self.error(f"negative duration {tok.text!r}", tok)
        return q.value

    def laser(self) -> Pulse:
        tok = self.advance()
        duration = self.duration_value()
        power = 1.0
        while self.at("WORD", "power"):
            self.advance()
            self.expect("SYMBOL", "=")
            ptok = self.tok
            power = self.quantity(("number",), "a laser power").value
            if power < 0:
                raise self.error("laser power must be non-negative", ptok)
        return Pulse("LASER", duration=duration, power=power, line=tok.line, col=tok.col)

    def pulse(self) -> Pulse:
        tok = self.advance()
        channel = tok.text.upper()
        duration: Optional[Value] = None
        angle: Optional[float] = None
        phase: Value = 0.0
        shorthand = None
        arg = self.tok
        if arg.kind == "WORD" and arg.text in ("X", "Y"):
            self.advance()
            self.expect("SYMBOL", "(")
            duration = self.duration_value()
            self.expect("SYMBOL", ")")
            shorthand = arg.text
            phase = 0.0 if arg.text == "X" else math.pi / 2
        elif arg.kind == "WORD" and arg.text == "pi":
            angle = self.pi_angle()
        elif arg.kind == "NUMBER":
            q = self.quantity(("angle", "time"), "a rotation angle or duration")
            if q.value < 0:
                raise self.error(f"negative {'duration' if q.kind == 'time' else 'angle'} {arg.text!r}", arg)
            if q.kind == "time":
                duration = q.value
            else:
                angle = q.value
        else:
            raise self.error(f"expected a rotation for {channel}, found {arg.text or 'end of input'!r}")

        rabi: Optional[Value] = self.rabi[channel]
        while self.at("WORD", "phase") or self.at("WORD", "rabi"):
            option = self.advance().text
            self.expect("SYMBOL", "=")
            if option == "phase":
                phase = self.advance().text if self.at("WORD") and self.tok.text != "pi" else \
                    self.quantity(("angle",), "a phase").value
            else:
                if self.at("WORD"):
                    rabi = self.advance().text
                else:
                    rtok = self.tok
                    rabi = self.quantity(("frequency",), "a Rabi frequency").value
                    if rabi < 0:
                        raise self.error("Rabi frequency must be non-negative", rtok)
        if angle is not None and isinstance(rabi, float) and rabi <= 0:
            raise self.error(f"{channel} rotation by angle needs a positive Rabi frequency", tok)
        return Pulse(channel, duration=duration, angle=angle, phase=phase, rabi=rabi,
                     shorthand=shorthand, line=tok.line, col=tok.col)

    def block(self) -> Tuple[Node, ...]:
        opening = self.expect("SYMBOL", "{")
        if self.depth >= MAX_DEPTH:
            raise self.error(f"blocks nested deeper than {MAX_DEPTH} levels", opening)
        self.depth += 1
        body = self.program(closing=opening)
        self.expect("SYMBOL", "}")
        self.depth -= 1
        return body

    def repeat(self) -> Repeat:
        tok = self.advance()
        ctok = self.expect("NUMBER")
        if not ctok.text.isdigit():
            raise self.error(f"repeat count must be a non-negative integer, found {ctok.text!r}", ctok)
        label = None
        if self.at("WORD", "as"):
            self.advance()
            ltok = self.expect("WORD")
            label = ltok.text
            if label in self.labels:
                raise self.error(f"duplicate repeat label {label!r}", ltok)
            self.labels.add(label)
        return Repeat(int(ctok.text), self.block(), label, tok.line, tok.col)

    def parallel(self) -> Parallel:
        tok = self.advance()
        body = self.block()
        for node in body:
            if not isinstance(node, Pulse):
                raise self.error("par blocks may only contain pulses and delays", tok)
        return Parallel(tuple(body), tok.line, tok.col)

    def rabi_directive(self):
        self.advance()
        ctok = self.expect("WORD")
        channel = ctok.text.upper()
        if channel not in DRIVE_CHANNELS:
            raise self.error(f"unknown channel {ctok.text!r}", ctok)
        qtok = self.tok
        value = self.quantity(("frequency",), "a Rabi frequency").value
        if value <= 0:
            raise self.error("Rabi frequency must be positive", qtok)
        self.rabi[channel] = value

    def sweep(self):
        self.advance()
        name = self.expect("WORD").text
        if any(s.name == name for s in self.sweeps):
            raise self.error(f"variable {name!r} is swept twice")
        self.expect("WORD", "from")
        start = self.quantity(("time", "angle", "frequency", "number"), "a sweep start")
        self.expect("WORD", "to")
        stop = self.quantity(("time", "angle", "frequency", "number"), "a sweep end")
        if stop.kind != start.kind:
            raise self.error(f"sweep {name!r} mixes {start.kind} and {stop.kind} units")
        self.expect("WORD", "steps")
        stok = self.expect("NUMBER")
        if not stok.text.isdigit() or int(stok.text) < 1:
            raise self.error("sweep steps must be a positive integer", stok)
        if int(stok.text) > MAX_SWEEP_STEPS:
            raise self.error(f"sweep steps exceed {MAX_SWEEP_STEPS}", stok)
        self.sweeps.append(Sweep(name, start, stop, int(stok.text)))

    def let(self):
        self.advance()
        name = self.expect("WORD").text
        self.expect("SYMBOL", "=")
        self.defaults[name] = self.quantity(("time", "angle", "frequency", "number"), "a value")


def _decode(text: Union[str, bytes], path: Optional[str]) -> str:
    if isinstance(text, bytes):
        try:
            return text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SequenceError(f"input is not valid UTF-8 ({exc.reason})", 1, 1, path) from None
    return text


def parse_sequence(text: Union[str, bytes], path: Optional[str] = None, strict: bool = True) -> SequenceIR:
    """Parse sequence text into a :class:`SequenceIR`.

    With ``strict`` (the default) overlapping drive pulses and laser + microwave
    overlap are errors; otherwise they are left for :func:`validate_timing`.
    """
    source = _decode(text, path)
    parser = _Parser(tokenize(source, path), path)
    program = parser.program()
    ir = SequenceIR(
        program=program,
        sweeps=tuple(parser.sweeps),
        defaults=tuple(sorted(parser.defaults.items())),
        path=path,
    )
    return _compiled(ir, strict)


def load_sequence(path: Union[str, Path], strict: bool = True) -> SequenceIR:
    path = Path(path)
    return parse_sequence(path.read_bytes(), str(path), strict=strict)


# ---------------------------------------------------------------- compiler


def _count_events(nodes: Sequence[Node]) -> int:
    total = 0
    for node in nodes:
        if isinstance(node, Pulse):
            total += 1
        elif isinstance(node, Parallel):
            total += len(node.body)
        else:
            total += node.count * _count_events(node.body)
        if total > MAX_EVENTS:
            return total
    return total


def _resolve(slot: Optional[Value], env: Mapping[str, float], missing: List[str]) -> Optional[float]:
    if isinstance(slot, str):
        if slot in env:
            return float(env[slot])
        missing.append(slot)
        return None
    return slot


def _event(node: Pulse, start: Optional[float], env: Mapping[str, float], path: Optional[str]) -> PulseEvent:
    missing: List[str] = []
    rabi = _resolve(node.rabi, env, missing) if node.channel in DRIVE_CHANNELS else None
    phase = _resolve(node.phase, env, missing)
    duration = _resolve(node.duration, env, missing)
    angle = node.angle

    if rabi is not None and (rabi < 0 or not math.isfinite(rabi)):
        raise SequenceError(f"invalid Rabi frequency {rabi!r}", node.line, node.col, path)
    if duration is not None and (duration < 0 or not math.isfinite(duration)):
        raise SequenceError(f"invalid duration {duration!r}", node.line, node.col, path)
    if angle is not None:
        if rabi is not None:
            if rabi <= 0:
                raise SequenceError("rotation by angle needs a positive Rabi frequency",
                                    node.line, node.col, path)
            duration = angle / (2 * math.pi * rabi)
            if not math.isfinite(duration):
                raise SequenceError("pulse duration overflows", node.line, node.col, path)
    elif duration is not None and rabi is not None:
        angle = 2 * math.pi * rabi * duration

    return PulseEvent(
        channel=node.channel,
        start=start,
        duration=duration,
        amplitude=rabi or 0.0,
        phase=phase,
        laser_power=node.power if node.channel == "LASER" else None,
        angle=angle,
        unresolved=tuple(missing),
        line=node.line,
        col=node.col,
    )


def _check_parallel(events: Sequence[PulseEvent], node: Parallel, path: Optional[str]):
    def active(ev):
        return ev.duration is None or ev.duration > 0

    drives = [ev for ev in events if ev.is_drive and active(ev)]
    if len(drives) > 1:
        names = "/".join(ev.channel for ev in drives)
        raise SequenceError(f"overlapping MW/RF events ({names})", node.line, node.col, path)
    lasers = [ev for ev in events if ev.channel == "LASER" and active(ev)]
    if lasers and any(ev.channel.startswith("MW") for ev in drives):
        raise SequenceError("simultaneous laser and microwave pulses are not supported",
                            node.line, node.col, path)


def _compile(ir: SequenceIR, strict: bool) -> Tuple[PulseEvent, ...]:
    n_events = _count_events(ir.program)
    if n_events > MAX_EVENTS:
        raise SequenceError(f"sequence expands to more than {MAX_EVENTS} events", 1, 1, ir.path)
    env = ir.environment
    events: List[PulseEvent] = []

    def emit_nodes(nodes: Sequence[Node], cursor: Optional[float]) -> Optional[float]:
        for node in nodes:
            if isinstance(node, Pulse):
                ev = _event(node, cursor, env, ir.path)
                events.append(ev)
                cursor = ev.end
            elif isinstance(node, Parallel):
                group = [_event(child, cursor, env, ir.path) for child in node.body]
                if strict:
                    _check_parallel(group, node, ir.path)
                events.extend(group)
                ends = [ev.end for ev in group]
                if cursor is None or any(e is None for e in ends):
                    cursor = None
                else:
                    cursor = max(ends, default=cursor)
            elif _count_events(node.body):
                for _ in range(node.count):
                    cursor = emit_nodes(node.body, cursor)
            if cursor is not None and not math.isfinite(cursor):
                raise SequenceError("sequence duration overflows", node.line, node.col, ir.path)
        return cursor

    emit_nodes(ir.program, 0.0)
    order = sorted(range(len(events)), key=lambda k: (events[k].start is None, events[k].start or 0.0, k))
    return tuple(events[k] for k in order)


def _compiled(ir: SequenceIR, strict: bool = True) -> SequenceIR:
    return replace(ir, events=_compile(ir, strict))


def bind(ir: SequenceIR, values: Mapping[str, float], strict: bool = True) -> SequenceIR:
    """Resolve variables; every variable used by the program must end up with a value."""
    bindings = dict(ir.bindings)
    for name, value in values.items():
        value = float(value)
        if not math.isfinite(value):
            raise SequenceError(f"non-finite value for {name!r}", 1, 1, ir.path)
        bindings[name] = value
    bound = _compiled(replace(ir, bindings=tuple(sorted(bindings.items()))), strict)
    if bound.unresolved:
        name = bound.unresolved[0]
        where = next(n for n in _walk(ir.program) if name in (n.duration, n.phase, n.rabi))
        raise SequenceError(f"unresolved sweep variable {name!r}", where.line, where.col, ir.path)
    return bound


def sweep_points(ir: SequenceIR) -> List[Dict[str, float]]:
    """Cartesian product of the declared sweeps, in declaration order."""
    if not ir.sweeps:
        return [{}]
    axes = [[(s.name, float(v)) for v in s.values()] for s in ir.sweeps]
    return [dict(point) for point in product(*axes)]


def expand_repeats(ir: SequenceIR, counts: Mapping[Union[str, int], int]) -> SequenceIR:
    """Set repeat counts by label or by document-order index and recompile."""
    blocks = list(_repeats(ir.program))
    by_key: Dict[int, int] = {}
    for key, count in counts.items():
        if isinstance(count, bool) or not isinstance(count, int) or count < 0:
            raise ValueError(f"repeat count must be a non-negative integer, got {count!r}")
        if isinstance(key, int):
            if not 0 <= key < len(blocks):
                raise ValueError(f"no repeat block with index {key}")
            by_key[id(blocks[key])] = count
        else:
            matches = [b for b in blocks if b.label == key]
            if not matches:
                raise ValueError(f"no repeat block labeled {key!r}")
            by_key[id(matches[0])] = count

    def rewrite(nodes: Sequence[Node]) -> Tuple[Node, ...]:
        out = []
        for node in nodes:
            if isinstance(node, Repeat):
                count = by_key.get(id(node), node.count)
                node = replace(node, count=count, body=rewrite(node.body))
            out.append(node)
        return tuple(out)

    return _compiled(replace(ir, program=rewrite(ir.program)))


# ---------------------------------------------------------------- emitter


def _emit_value(slot: Value, kind: str) -> str:
    if isinstance(slot, str):
        return slot
    return Quantity(slot, kind).emit()


def _emit_pulse(node: Pulse) -> str:
    if node.channel == "DELAY":
        return f"delay {_emit_value(node.duration, 'time')}"
    if node.channel == "LASER":
        return f"laser {_emit_value(node.duration, 'time')} power={node.power!r}"
    head = node.channel.lower()
    if node.shorthand:
        rotation = f"{node.shorthand}({_emit_value(node.duration, 'time')})"
    elif node.angle is not None:
        rotation = Quantity(node.angle, "angle").emit()
    else:
        rotation = _emit_value(node.duration, "time")
    return f"{head} {rotation} phase={_emit_value(node.phase, 'angle')} rabi={_emit_value(node.rabi, 'frequency')}"


def _emit_nodes(nodes: Sequence[Node], indent: str) -> List[str]:
    lines = []
    for node in nodes:
        if isinstance(node, Pulse):
            lines.append(indent + _emit_pulse(node))
        elif isinstance(node, Parallel):
            lines.append(indent + "par {")
            lines.extend(_emit_nodes(node.body, indent + "  "))
            lines.append(indent + "}")
        else:
            label = f" as {node.label}" if node.label else ""
            lines.append(f"{indent}repeat {node.count}{label} {{")
            lines.extend(_emit_nodes(node.body, indent + "  "))
            lines.append(indent + "}")
    return lines


def emit(ir: SequenceIR) -> str:
    """Canonical text: SI units with exact float repr, explicit phase and Rabi on every pulse."""
    lines = [f"let {name} = {q.emit()}" for name, q in ir.defaults]
    lines += [
        f"sweep {s.name} from {s.start.emit()} to {s.stop.emit()} steps {s.steps}" for s in ir.sweeps
    ]
    lines += _emit_nodes(ir.program, "")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------- timing checks


def _close(angle: Optional[float], target: float) -> bool:
    return angle is not None and abs(angle - target) <= ANGLE_TOLERANCE


def _center(ev: PulseEvent) -> float:
    return ev.start + ev.duration / 2


def validate_timing(ir: SequenceIR, p: spin_core.RegisterParams) -> List[Diagnostic]:
    """Advisories for overlaps, echo alignment and unresolved drives of a concrete IR."""
    if not ir.is_concrete:
        raise ValueError(f"cannot validate timing with unresolved variables {list(ir.unresolved)}")
    events = list(ir.events)
    diagnostics: List[Diagnostic] = []

    def add(severity, message, *idx):
        ev = events[idx[0]]
        diagnostics.append(Diagnostic(severity, message, ev.line, ev.col, tuple(idx), ir.path))

    active = [(i, ev) for i, ev in enumerate(events) if ev.channel != "DELAY" and ev.duration > 0]
    for a, (i, ev) in enumerate(active):
        for j, other in active[a + 1:]:
            if other.start >= ev.end:
                break
            if ev.is_drive and other.is_drive:
                add("error", f"overlapping {ev.channel}/{other.channel} events #{i} and #{j}", i, j)
            elif {ev.channel, other.channel} & {"LASER"} and any(
                e.channel.startswith("MW") for e in (ev, other)
            ):
                add("error", f"laser overlaps microwave pulse (events #{i} and #{j})", i, j)

    drives = [(i, ev) for i, ev in enumerate(events) if ev.is_drive]
    for k in range(len(drives) - 3):
        (i0, half), (i1, refocus), (i2, rf), (i3, closing) = drives[k:k + 4]
        if not (half.channel.startswith("MW") and _close(half.angle, math.pi / 2)):
            continue
        if not (refocus.channel == half.channel and _close(refocus.angle, math.pi)):
            continue
        if not (rf.channel.startswith("RF") and _close(rf.angle, math.pi)):
            continue
        if not (closing.channel == half.channel and _close(closing.angle, math.pi)):
            continue
        echo = 2 * _center(refocus) - _center(half)
        offset = _center(rf) - echo
        if abs(offset) > TIMING_TOLERANCE:
            add("warning",
                f"{rf.channel} pi centered {offset * 1e9:+.3f} ns from the echo maximum at {echo * 1e9:.3f} ns",
                i2, i0, i1)
        gap = closing.start - rf.end
        if abs(gap) > TIMING_TOLERANCE:
            add("warning", f"gap of {gap * 1e9:.3f} ns between {rf.channel} pi and the closing {closing.channel} pi",
                i2, i3)

    for i, ev in drives:
        if ev.amplitude <= 0:
            continue
        t = spin_core.transition(p, ev.channel)
        message = spin_core.unresolved_drive(p, t, ev.amplitude)
        if message:
            add("warning", message, i)
    return diagnostics


# ---------------------------------------------------------------- execution


def echo_train(ir: SequenceIR) -> List[Tuple[float, str]]:
    """Idealized echo actions of a concrete IR.

    Pulses are instantaneous and only delays advance time. A lone RF1 pi maps to
    "rf1"; a group ``MW pi ... RF1 pi ... MW pi`` with matching MW sets maps to
    "swap".
    """
    if not ir.is_concrete:
        raise ValueError(f"unresolved variables {list(ir.unresolved)}")
    actions: List[Tuple[float, str]] = []
    clock = 0.0
    group: List[PulseEvent] = []

    def flush():
        if not group:
            return
        channels = [ev.channel for ev in group]
        if any(not _close(ev.angle, math.pi) for ev in group):
            raise ValueError(f"echo trains need pi pulses, got group {channels}")
        if channels == ["RF1"]:
            actions.append((clock, "rf1"))
        elif channels.count("RF1") == 1:
            cut = channels.index("RF1")
            before, after = channels[:cut], channels[cut + 1:]
            if before and sorted(before) == sorted(after) and all(c.startswith("MW") for c in before):
                actions.append((clock, "swap"))
            else:
                raise ValueError(f"pulse group {channels} has no echo action")
        else:
            raise ValueError(f"pulse group {channels} has no echo action")
        group.clear()

    for ev in ir.events:
        if ev.channel == "DELAY":
            if ev.duration > 0:
                flush()
                clock += ev.duration
        elif ev.channel == "LASER":
            raise ValueError("echo trains cannot contain laser pulses")
        else:
            group.append(ev)
    flush()
    return actions


@dataclass(frozen=True)
class SimulationResult:
    state: spin_core.QuantumState
    readouts: Tuple[float, ...]

    @property
    def signal(self) -> float:
        """Bright population at the last laser pulse, or of the final state."""
        return self.readouts[-1]


def _laser_rates(ev: PulseEvent, rates, rate_table) -> dissipation.RateParams:
    if rate_table:
        return dissipation.rates_from_table(rate_table, ev.laser_power)
    if rates is None:
        raise ValueError("laser pulses need rate parameters")
    return rates


def simulate(
    ir: SequenceIR,
    params: spin_core.RegisterParams,
    rates: Optional[dissipation.RateParams] = None,
    state: Optional[spin_core.QuantumState] = None,
    detunings: Optional[Mapping[str, float]] = None,
    dephasing: bool = True,
    rate_table: Optional[Sequence[Mapping[str, float]]] = None,
    coherence_threshold: float = 0.0,
) -> SimulationResult:
    """Run a concrete IR on the density-matrix engine.

    Free evolution happens in the frame where every drive is resonant, except the one
    channel listed in ``detunings``. Each laser pulse records the bright population
    it reads out before pumping. A laser overlapping an RF drive is Strang-split.
    """
    if not ir.is_concrete:
        raise SequenceError(f"unresolved sweep variable {ir.unresolved[0]!r}", 1, 1, ir.path)
    detunings = dict(detunings or {})
    if len(detunings) > 1:
        raise ValueError("only one channel can be detuned")
    for label in detunings:
        if label not in DRIVE_CHANNELS:
            raise ValueError(f"unknown channel {label!r}")
    if detunings:
        (label, delta), = detunings.items()
        frame = spin_core.rotating(spin_core.transition(params, label), delta)
    else:
        label, delta = None, 0.0
        frame = spin_core.rotating()

    state = state if state is not None else spin_core.QuantumState(np.eye(6) / 6)
    events = [ev for ev in ir.events if ev.channel != "DELAY"]
    cuts = sorted({0.0, ir.duration or 0.0} | {ev.start for ev in events} | {ev.end for ev in events})
    readouts: List[float] = []
    strengths = {ch: spin_core.transition_strength(params, ch) for ch in DRIVE_CHANNELS
                 if any(ev.channel == ch for ev in events)}

    def drive(s, ev, dt):
        bare = ev.amplitude / strengths[ev.channel]
        return spin_core.evolve_driven(s, params, ev.channel, bare, ev.phase, dt,
                                       detuning=delta if ev.channel == label else 0.0,
                                       dephasing=dephasing)

    for t0, t1 in zip(cuts, cuts[1:] + [None]):
        for ev in events:
            if ev.channel == "LASER" and ev.start == t0:
                readouts.append(spin_core.bright_population(state, params))
        if t1 is None:
            break
        dt = t1 - t0
        running = [ev for ev in events if ev.duration > 0 and ev.start <= t0 and ev.end >= t1]
        lasers = [ev for ev in running if ev.channel == "LASER"]
        drives = [ev for ev in running if ev.is_drive]
        if len(drives) > 1:
            raise SequenceError("overlapping MW/RF events", drives[1].line, drives[1].col, ir.path)
        if len(lasers) > 1:
            raise SequenceError("overlapping laser pulses", lasers[1].line, lasers[1].col, ir.path)
        if lasers and drives and drives[0].channel.startswith("MW"):
            raise SequenceError("simultaneous laser and microwave pulses are not supported",
                                drives[0].line, drives[0].col, ir.path)
        if lasers:
            r = _laser_rates(lasers[0], rates, rate_table)
            if drives:
                state = dissipation.apply_laser(state, params, r, dt / 2, coherence_threshold)
                state = drive(state, drives[0], dt)
                state = dissipation.apply_laser(state, params, r, dt / 2, coherence_threshold)
            else:
                state = dissipation.apply_laser(state, params, r, dt, coherence_threshold)
        elif drives:
            state = drive(state, drives[0], dt)
        else:
            state = spin_core.evolve_free(state, params, dt, frame, dephasing)

    if not readouts:
        readouts.append(spin_core.bright_population(state, params))
    return SimulationResult(state, tuple(readouts))
