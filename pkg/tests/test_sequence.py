import math
import os
import sys

import numpy as np
import pytest

# Add the repository root to the Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.dissipation import MEASURED_RATES, analytic_curves
from src.sequence import (
    SequenceError,
    bind,
    echo_train,
    emit,
    expand_repeats,
    load_sequence,
    parse_sequence,
    simulate,
    sweep_points,
    tokenize,
    validate_timing,
)
from src.spin_core import RegisterParams

SEQUENCES = os.path.join(os.path.dirname(__file__), '..', 'data', 'sequences')
CORPUS = ["rabi", "fid", "init", "transfer", "extended_dd"]
DEFAULTS = RegisterParams()


def corpus(name):
    return load_sequence(os.path.join(SEQUENCES, f"{name}.seq"))


def concrete(ir):
    return bind(ir, sweep_points(ir)[0])


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_validates_cleanly(name):
    ir = corpus(name)
    assert ir.events
    assert validate_timing(concrete(ir), DEFAULTS) == []


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_round_trips_through_emit(name):
    ir = corpus(name)
    again = parse_sequence(emit(ir))
    assert again == ir
    assert emit(again) == emit(ir)


def test_pulse_durations_follow_effective_rabi():
    ir = parse_sequence("mw1 pi\nmw1 pi/2\nrf1 pi\nrf1 90deg rabi=1MHz\nrf2 250ns")
    durations = [ev.duration for ev in ir.events]
    assert durations == pytest.approx([20e-9, 10e-9, 1 / (2 * 4.3e6), 250e-9, 250e-9])
    assert ir.events[0].amplitude == 25e6


def test_events_are_time_ordered():
    ir = parse_sequence("laser 1us; delay 100ns; mw2 pi phase=90deg; laser 300ns")
    starts = [ev.start for ev in ir.events]
    assert starts == sorted(starts)
    assert ir.events[2].phase == pytest.approx(math.pi / 2)
    assert ir.duration == pytest.approx(1e-6 + 100e-9 + 20e-9 + 300e-9)


def test_rabi_directive_changes_later_pulses():
    ir = parse_sequence("rabi rf1 2.15MHz\nrf1 pi")
    assert ir.events[0].duration == pytest.approx(1 / (2 * 2.15e6))


def test_shorthand_phase():
    ir = bind(parse_sequence("rf1 Y(t)"), {"t": 50e-9})
    assert ir.events[0].phase == pytest.approx(math.pi / 2)
    assert ir.events[0].duration == pytest.approx(50e-9)


def test_empty_sequence():
    ir = parse_sequence("")
    assert ir.events == ()
    assert ir.duration == 0.0
    assert emit(ir) == ""


def test_comments_and_separators():
    ir = parse_sequence("# header\nlaser 1us ; mw1 pi # trailing\n\n")
    assert [ev.channel for ev in ir.events] == ["LASER", "MW1"]


def test_unknown_statement_reports_position():
    with pytest.raises(SequenceError) as info:
        parse_sequence("laser 1us\n  blink 2us\n", path="bad.seq")
    err = info.value
    assert (err.line, err.col) == (2, 3)
    assert err.render().startswith("bad.seq:2:3: error:")


def test_unclosed_block():
    with pytest.raises(SequenceError) as info:
        parse_sequence("repeat 2 {\n  mw1 pi\n")
    assert "missing '}'" in info.value.message


def test_negative_duration_is_rejected():
    with pytest.raises(SequenceError):
        parse_sequence("delay -5ns")


def test_invalid_utf8_is_a_sequence_error():
    with pytest.raises(SequenceError):
        parse_sequence(b"laser \xff\xfe")


def test_overlapping_drives_in_parallel_block():
    with pytest.raises(SequenceError) as info:
        parse_sequence("par {\n  mw1 pi\n  mw2 pi\n}")
    assert "overlapping" in info.value.message
    lenient = parse_sequence("par {\n  mw1 pi\n  mw2 pi\n}", strict=False)
    diagnostics = validate_timing(lenient, DEFAULTS)
    assert [d.severity for d in diagnostics] == ["error"]


def test_laser_with_rf_is_allowed_in_parallel():
    ir = parse_sequence("par { laser 200ns; rf1 pi }")
    assert len(ir.events) == 2
    with pytest.raises(SequenceError):
        parse_sequence("par { laser 200ns; mw1 pi }")


def test_repeat_expansion_and_labels():
    ir = corpus("init")
    assert len(ir.events) == 1 + 3 * 10
    three = expand_repeats(ir, {"cycle": 3})
    assert len(three.events) == 1 + 3 * 3
    none = expand_repeats(ir, {0: 0})
    assert [ev.channel for ev in none.events] == ["LASER"]
    with pytest.raises(ValueError):
        expand_repeats(ir, {"missing": 2})
    with pytest.raises(ValueError):
        expand_repeats(ir, {"cycle": -1})


def test_duplicate_repeat_label():
    with pytest.raises(SequenceError):
        parse_sequence("repeat 1 as a { mw1 pi }\nrepeat 1 as a { mw2 pi }")


def test_sweep_points():
    points = sweep_points(corpus("rabi"))
    assert len(points) == 101
    assert points[0]["t"] == 0.0
    assert points[-1]["t"] == pytest.approx(1e-6)


def test_unbound_variable():
    ir = parse_sequence("delay t\nmw1 pi")
    assert ir.unresolved == ("t",)
    with pytest.raises(SequenceError) as info:
        bind(ir, {})
    assert "unresolved sweep variable" in info.value.message
    assert info.value.line == 1
    with pytest.raises(SequenceError):
        bind(ir, {"t": math.inf})


def test_let_default_can_be_overridden():
    ir = corpus("extended_dd")
    assert ir.is_concrete
    bound = bind(ir, {"tau": 5e-6})
    delays = [ev.duration for ev in bound.events if ev.channel == "DELAY"]
    assert delays == pytest.approx([5e-6] * 4)


def test_misaligned_rf_pulse_is_reported():
    text = "mw2 pi/2\ndelay 96ns\nmw2 pi\ndelay 50ns\nrf1 pi\nmw2 pi"
    diagnostics = validate_timing(parse_sequence(text, path="w.seq"), DEFAULTS)
    assert len(diagnostics) == 1
    assert diagnostics[0].severity == "warning"
    assert "RF1 pi centered" in diagnostics[0].message
    assert diagnostics[0].render().startswith("w.seq:5:1: warning:")


def test_gap_before_closing_pulse_is_reported():
    text = "mw2 pi/2\ndelay 96ns\nmw2 pi\ndelay 42.8604651ns\nrf1 pi\ndelay 5ns\nmw2 pi"
    messages = [d.message for d in validate_timing(parse_sequence(text), DEFAULTS)]
    assert any(m.startswith("gap of") for m in messages)


def test_fast_rf_drive_is_reported():
    diagnostics = validate_timing(parse_sequence("rf1 pi rabi=300MHz"), DEFAULTS)
    assert any("unresolved" in d.message for d in diagnostics)


def test_validate_needs_concrete_sequence():
    with pytest.raises(ValueError):
        validate_timing(corpus("rabi"), DEFAULTS)


def test_echo_train_of_extended_cycle():
    ir = bind(expand_repeats(corpus("extended_dd"), {"cycle": 2}), {"tau": 10e-6})
    train = echo_train(ir)
    assert [a for _, a in train] == ["rf1", "swap", "rf1", "swap"] * 2
    assert [t for t, _ in train] == pytest.approx([10e-6 * k for k in range(1, 9)])


def test_echo_train_rejects_lasers():
    with pytest.raises(ValueError):
        echo_train(parse_sequence("laser 1us"))


def test_tokenizer_rejects_stray_characters():
    with pytest.raises(SequenceError):
        tokenize("laser 1us $")


FUZZ_VOCABULARY = [
    "laser", "delay", "mw1", "mw2", "rf1", "rf2", "repeat", "par", "rabi", "sweep", "let", "as",
    "from", "to", "steps", "phase", "power", "pi", "X", "Y", "t", "{", "}", "(", ")", "=", "/",
    ";", "\n", "#", "0", "3", "2.5us", "-1ns", "1e999", "90deg", "4.3MHz", "0Hz", "1e-300Hz",
    "pi/0", "µs", "$", "\x00", "é",
]


def test_random_input_only_raises_sequence_errors():
    rng = np.random.default_rng(0)
    parsed = 0
    for _ in range(10_000):
        words = rng.choice(FUZZ_VOCABULARY, size=rng.integers(1, 13))
        text = " ".join(words)
        try:
            parse_sequence(text)
            parsed += 1
        except SequenceError as exc:
            assert exc.line >= 1 and exc.col >= 1
    assert parsed > 0


def test_random_bytes_only_raise_sequence_errors():
    rng = np.random.default_rng(1)
    parsed = 0
    for k in range(10_000):
        size = int(rng.integers(0, 65))
        # every other sample stays 7-bit so it gets past UTF-8 decoding
        raw = rng.integers(0, 256 if k % 2 else 128, size, dtype=np.uint8).tobytes()
        try:
            parse_sequence(raw)
            parsed += 1
        except SequenceError as exc:
            assert exc.line >= 1 and exc.col >= 1
    assert parsed > 0


def test_undeclared_variable_is_a_sweep_variable():
    ir = parse_sequence("laser 10us; mw1 pi; rf1 X(t); mw1 pi; laser 300ns")
    assert ir.sweeps == ()
    assert ir.variables == ("t",)
    assert ir.sweep_variables == ("t",)
    assert len(ir.events) == 5
    bound = bind(ir, {"t": 0.5e-6})
    assert bound.sweep_variables == ()
    assert [ev.channel for ev in bound.events] == ["LASER", "MW1", "RF1", "MW1", "LASER"]


def test_declared_sweeps_come_first():
    assert corpus("rabi").sweep_variables == ("t",)
    ir = parse_sequence("sweep t from 0ns to 1us steps 3\nrf1 X(t)\ndelay tau\nrf1 X(t)")
    assert ir.sweep_variables == ("t", "tau")


def test_initialization_matches_closed_form():
    ir = expand_repeats(corpus("init"), {"cycle": 1})
    for t_laser in (0.0, 0.1e-6, 0.3e-6, 1e-6):
        state = simulate(bind(ir, {"t_laser": t_laser}), DEFAULTS, MEASURED_RATES).state
        pops = state.populations(DEFAULTS)
        expected = analytic_curves(MEASURED_RATES, [t_laser])[0]
        assert pops[(0, "up")] == pytest.approx(expected[0], abs=1e-6)
        assert pops[(0, "down")] == pytest.approx(expected[1], abs=1e-6)


def test_readout_is_taken_at_each_laser():
    ir = bind(corpus("rabi"), {"t": 0.0})
    result = simulate(ir, DEFAULTS, MEASURED_RATES)
    assert len(result.readouts) == 2
    # maximally mixed start: one third bright
    assert result.readouts[0] == pytest.approx(1 / 3)
    assert result.signal == pytest.approx(1.0, abs=1e-6)


def test_rabi_signal_at_pi_time():
    ir = bind(corpus("rabi"), {"t": 1 / (2 * 4.3e6)})
    assert simulate(ir, DEFAULTS, MEASURED_RATES).signal == pytest.approx(0.5, abs=0.01)


def test_simulate_requires_rates_for_lasers():
    with pytest.raises(ValueError):
        simulate(parse_sequence("laser 1us"), DEFAULTS)


def test_simulate_rejects_unbound_sequence():
    with pytest.raises(SequenceError):
        simulate(corpus("rabi"), DEFAULTS, MEASURED_RATES)


def test_simulate_with_two_detuned_channels():
    with pytest.raises(ValueError):
        simulate(parse_sequence("mw1 pi"), DEFAULTS, detunings={"RF1": 1e3, "RF2": 1e3})


def test_simulation_without_laser_reads_final_state():
    result = simulate(parse_sequence("mw1 pi"), DEFAULTS)
    assert len(result.readouts) == 1
    assert np.isfinite(result.signal)
