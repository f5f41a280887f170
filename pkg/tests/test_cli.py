import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the repository root to the Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.cli import main, summary_line, write_csv
from src.fitkit import rate_curves

ROOT = Path(__file__).resolve().parent.parent
SEQUENCES = ROOT / "data" / "sequences"
RABI_CONFIG = "{experiment: {grid: {from: 0, to: '1us', steps: 41}}}\n"


@pytest.fixture(autouse=True)
def isolated_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NVMEM_DB", str(tmp_path / "runs.db"))
    monkeypatch.setenv("NVMEM_THREADS", "1")
    monkeypatch.delenv("NVMEM_LOG_LEVEL", raising=False)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def data_lines(path):
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if not line.startswith("#")]


class TestRun:
    def test_rabi_run_writes_outputs(self, tmp_path, capsys):
        config = write(tmp_path / "rabi.json5", RABI_CONFIG)
        out = tmp_path / "out"
        assert main(["run", "rabi", "-c", config, "-o", str(out)]) == 0

        line = capsys.readouterr().out.strip()
        assert line.startswith("rabi_frequency_hz: ")
        assert float(line.split(": ")[1]) == pytest.approx(4.3e6, rel=1e-2)

        frame = pd.read_csv(out / "rabi.csv", comment="#")
        assert list(frame.columns) == ["x", "y"]
        assert len(frame) == 41
        meta = json.loads((out / "rabi.meta.json").read_text(encoding="utf-8"))
        assert meta["experiment"] == "rabi"
        assert meta["results"]["rabi"]["fit"]["converged"] is True

        assert main(["history"]) == 0
        assert "rabi" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write(tmp_path / "rabi.json5", RABI_CONFIG)
        assert main(["run", "rabi", "-c", config, "-o", str(tmp_path / "a")]) == 0
        assert main(["run", "rabi", "-c", config, "-o", str(tmp_path / "b")]) == 0
        first = (tmp_path / "a" / "rabi.csv").read_bytes()
        assert first == (tmp_path / "b" / "rabi.csv").read_bytes()
        assert first.startswith(b"# experiment: rabi\n")

    def test_init_tomography_writes_two_tables(self, tmp_path):
        config = write(tmp_path / "tomo.json5", "{experiment: {grid: {from: 0, to: '1us', steps: 11}}}")
        out = tmp_path / "out"
        assert main(["run", "init-tomography", "-c", config, "-o", str(out)]) == 0
        assert (out / "init-tomography_total.csv").exists()
        assert (out / "init-tomography_up.csv").exists()

    def test_unknown_experiment(self, capsys):
        assert main(["run", "teleport"]) == 2
        assert "available: rabi" in capsys.readouterr().err

    def test_unknown_option(self, tmp_path, capsys):
        config = write(tmp_path / "bad.json5", "{\n  experiment: {\n    warp: 9,\n  },\n}\n")
        assert main(["run", "rabi", "-c", config, "-o", str(tmp_path)]) == 2
        assert "bad.json5:3: error: unknown option 'warp'" in capsys.readouterr().err

    def test_grid_on_gridless_experiment(self, tmp_path):
        config = write(tmp_path / "bad.json5", "{experiment: {grid: [0, 1, 2]}}")
        assert main(["run", "repeated-init", "-c", config]) == 2

    def test_power_scan_needs_table(self):
        assert main(["run", "power-scan"]) == 2

    def test_bad_command_line(self):
        assert main(["launch"]) == 2
        assert main(["run", "rabi", "--ensemble", "0"]) == 2


class TestParseCheck:
    def test_reference_sequence(self, capsys):
        assert main(["parse-check", str(SEQUENCES / "transfer.seq")]) == 0
        captured = capsys.readouterr()
        assert captured.out.strip().endswith(": 12 events")
        assert captured.err == ""

    def test_overlap_is_an_error(self, tmp_path, capsys):
        path = write(tmp_path / "overlap.seq", "par {\n  mw1 pi\n  mw2 pi\n}\n")
        assert main(["parse-check", path]) == 2
        assert "overlap.seq:1:1: error: overlapping MW/RF events" in capsys.readouterr().err

    def test_syntax_error_position(self, tmp_path, capsys):
        path = write(tmp_path / "typo.seq", "laser 1us\nmw1 pi phase=\n")
        assert main(["parse-check", path]) == 2
        assert "typo.seq:2:" in capsys.readouterr().err

    def test_warning_keeps_exit_zero(self, tmp_path, capsys):
        path = write(tmp_path / "late.seq", "mw2 pi/2\ndelay 96ns\nmw2 pi\ndelay 50ns\nrf1 pi\nmw2 pi\n")
        assert main(["parse-check", path]) == 0
        assert "warning: RF1 pi centered" in capsys.readouterr().err

    def test_empty_file(self, tmp_path, capsys):
        path = write(tmp_path / "empty.seq", "")
        assert main(["parse-check", path]) == 0
        assert capsys.readouterr().out.strip() == f"{path}: 0 events"

    def test_missing_file(self, tmp_path):
        assert main(["parse-check", str(tmp_path / "none.seq")]) == 2


class TestFit:
    def test_cosine(self, tmp_path, capsys):
        x = np.linspace(0, 1e-6, 51)
        frame = pd.DataFrame({"x": x, "y": 0.25 * np.cos(2 * np.pi * 4.3e6 * x) + 0.75})
        path = tmp_path / "rabi.csv"
        write_csv(frame, path, {"experiment": "rabi"})
        assert main(["fit", "cosine", str(path)]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["params"]["frequency"] == pytest.approx(4.3e6, rel=1e-6)

    def test_flat_data_does_not_converge(self, tmp_path):
        path = write(tmp_path / "flat.csv", "x,y\n" + "".join(f"{k},0.5\n" for k in range(10)))
        assert main(["fit", "exponential", path]) == 1

    def test_malformed_csv(self, tmp_path, capsys):
        path = write(tmp_path / "bad.csv", "x,y\n0,0.5\n1,abc\n")
        assert main(["fit", "cosine", path]) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_column(self, tmp_path):
        path = write(tmp_path / "bad.csv", "t,signal\n0,0.5\n1,0.6\n")
        assert main(["fit", "damped-cosine", path]) == 2

    def test_unknown_model(self, tmp_path):
        path = write(tmp_path / "any.csv", "x,y\n0,1\n")
        assert main(["fit", "gaussian", path]) == 2

    def test_rates_from_one_table(self, tmp_path, capsys):
        t = np.linspace(0, 3e-6, 61)
        truth = (1 / 0.17e-6, 1 / 0.92e-6, 1 / 1.6e-6)
        total, up = rate_curves(t, *truth)
        path = tmp_path / "tomo.csv"
        write_csv(pd.DataFrame({"x": t, "total": total, "up": up}), path, {})
        assert main(["fit", "rates", str(path)]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["params"]["alpha"] == pytest.approx(truth[0], rel=1e-3)

    def test_rates_from_two_tables(self, tmp_path):
        t = np.linspace(0, 3e-6, 61)
        total, up = rate_curves(t, 1 / 0.17e-6, 1 / 0.92e-6, 1 / 1.6e-6)
        write_csv(pd.DataFrame({"x": t, "y": total}), tmp_path / "total.csv", {})
        write_csv(pd.DataFrame({"x": t, "y": up}), tmp_path / "up.csv", {})
        assert main(["fit", "rates", str(tmp_path / "total.csv"), str(tmp_path / "up.csv")]) == 0


class TestSweep:
    CONFIG = (
        "{\n"
        "  experiment: {name: 'repeated-init', cycles: 2},\n"
        "  sweep: {param: 'experiment.laser_duration', values: %s},\n"
        "}\n"
    )

    def test_two_points(self, tmp_path, capsys):
        config = write(tmp_path / "sweep.json5", self.CONFIG % "['100ns', '300ns']")
        out = tmp_path / "out"
        assert main(["sweep", "-c", config, "-o", str(out)]) == 0
        assert capsys.readouterr().out.strip() == "sweep_points: 2"
        frame = pd.read_csv(out / "repeated-init_sweep.csv", comment="#")
        assert list(frame["x"]) == pytest.approx([100e-9, 300e-9])
        assert frame["y"].between(0, 1).all()
        assert (out / "repeated-init_sweep.meta.json").exists()

    def test_empty_sweep_writes_header_only(self, tmp_path):
        config = write(tmp_path / "sweep.json5", self.CONFIG % "[]")
        out = tmp_path / "out"
        assert main(["sweep", "-c", config, "-o", str(out)]) == 0
        assert data_lines(out / "repeated-init_sweep.csv") == ["x,y"]

    def test_sweep_needs_a_section(self, tmp_path):
        config = write(tmp_path / "plain.json5", "{experiment: {name: 'rabi'}}")
        assert main(["sweep", "-c", config]) == 2


def test_summary_line_formatting():
    assert summary_line("rabi", {"rabi_frequency_hz": 4300000.0}) == "rabi_frequency_hz: 4300000"
    assert summary_line("fid", {}) == "t2star_n_s: nan"
