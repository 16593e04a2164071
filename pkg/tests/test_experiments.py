import json
import math

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid

from config import validate_config
from errors import ConfigError
from experiments import (
    ExperimentOutcome,
    switch_time,
    decay_rate,
    run_experiment,
    write_outcome,
)
from model import ModelParams
from scheduler import WorkerPool

SERIAL = WorkerPool(1)


def small_trace(tmp_path, **overrides):
    raw = {
        "experiment": "trace_audit",
        "output_dir": str(tmp_path),
        "trace": {"trials": 20, "equality_trials": 5},
    }
    raw.update(overrides)
    return validate_config(raw)


class TestOutcome:
    def test_check_records_and_aggregates(self):
        out = ExperimentOutcome("demo")
        assert out.check("first", True, value=1.0)
        assert out.passed
        assert not out.check("second", np.bool_(False))
        assert not out.passed
        summary = out.summary()
        assert summary["checks"]["first"] == {"pass": True, "value": 1.0}
        assert summary["checks"]["second"]["pass"] is False

    def test_empty_outcome_passes(self):
        assert ExperimentOutcome("demo").passed


class TestHelpers:
    def test_decay_rate_recovers_exponent(self):
        t = np.linspace(0.0, 4.0, 9)
        assert decay_rate(t, 3.0 * np.exp(-0.5 * t)) == pytest.approx(0.5)

    def test_decay_rate_ignores_values_below_floor(self):
        t = np.array([0.0, 1.0, 2.0, 3.0])
        w = np.array([1.0, np.exp(-2.0), 0.0, 0.0])
        assert decay_rate(t, w) == pytest.approx(2.0)

    def test_decay_rate_needs_two_points(self):
        assert decay_rate([0.0, 1.0], [1.0, 0.0]) is None

    def test_switch_time_default_delta(self):
        params = ModelParams(a=0.1, eps=0.01)
        delta = 1.0 / (2.0 * (1.0 + 4.0 * (0.1 + 0.01 + 1.0)))
        assert switch_time(100, 1.0, params, 1.0) == pytest.approx(delta * math.log(100))

    def test_switch_time_explicit_delta(self):
        params = ModelParams(a=0.1, eps=0.01)
        assert switch_time(4, 1.0, params, 1.0, delta=0.5) == pytest.approx(math.log(2.0))
        assert switch_time(1, 1.0, params, 1.0) == 0.0

    def test_switch_time_rejects_empty_system(self):
        with pytest.raises(ValueError):
            switch_time(0, 1.0, ModelParams(a=0.1, eps=0.0), 1.0)


class TestDrivers:
    def test_trace_audit(self, tmp_path):
        out = run_experiment(small_trace(tmp_path), SERIAL)
        assert out.passed
        assert [c.name for c in out.checks] == ["trace_superadditivity", "block_diagonal_equality"]
        assert len(out.tables["trace_audit"].rows) == 20
        assert out.metrics["min_relative_margin"] >= -1e-9

    def test_superadditivity_audit(self, tmp_path):
        cfg = validate_config({
            "experiment": "superadditivity_audit",
            "output_dir": str(tmp_path),
            "superadditivity": {"pairs": 12, "tensor_pairs": 6},
        })
        out = run_experiment(cfg, SERIAL)
        assert out.passed
        assert len(out.tables["marginal_superadditivity"].rows) == 12
        assert len(out.tables["tensorization"].rows) == 6

    def test_constants_frontier(self, tmp_path):
        cfg = validate_config({
            "experiment": "constants_frontier",
            "output_dir": str(tmp_path),
            "frontier": {"a_min": 1e-4, "a_max": 0.2, "points": 12, "eps": 0.0},
        })
        out = run_experiment(cfg, SERIAL)
        assert out.passed
        assert 5e-4 < out.metrics["a_star"] < 2e-3
        feasible = [row[8] for row in out.tables["constants_frontier"].rows]
        assert feasible[0] and not feasible[-1]

    def test_frontier_needs_increasing_range(self, tmp_path):
        cfg = validate_config({
            "experiment": "constants_frontier",
            "output_dir": str(tmp_path),
            "frontier": {"a_min": 0.1, "a_max": 0.01},
        })
        with pytest.raises(ConfigError, match="a_max"):
            run_experiment(cfg, SERIAL)

    def test_moment_decay_support_must_fit_grid(self, tmp_path):
        cfg = validate_config({"experiment": "moment_decay", "output_dir": str(tmp_path), "moment_decay": {"m2_0": 100.0}})
        with pytest.raises(ConfigError, match="half_width"):
            run_experiment(cfg, SERIAL)

    def test_prop23_rejects_oversized_plan(self, tmp_path):
        cfg = validate_config({"experiment": "prop23_audit", "output_dir": str(tmp_path), "sim": {"n_replicas": 1024}})
        with pytest.raises(ConfigError, match="plan_cap"):
            run_experiment(cfg, SERIAL)

    def test_particle_drivers_need_one_dimension(self, tmp_path):
        cfg = validate_config({"experiment": "chaos_scaling", "output_dir": str(tmp_path), "model": {"dim": 2}})
        with pytest.raises(ConfigError, match="dim"):
            run_experiment(cfg, SERIAL)

    def test_moment_decay_records_particle_moments(self, tmp_path):
        cfg = validate_config({
            "experiment": "moment_decay",
            "output_dir": str(tmp_path),
            "grid": {"n_cells": 64},
            "sim": {"dt": 0.005, "n_replicas": 4, "record_every": 5},
            "moment_decay": {
                "t_end": 0.2,
                "snapshot_every": 10,
                "free_energy_steps": 100,
                "perturbations": 2,
                "drift_t_end": 0.1,
                "stationary_n_cells": 64,
                "particles": 8,
            },
        })
        out = run_experiment(cfg, SERIAL)
        assert "particle_moment_envelope" in {c.name for c in out.checks}
        table = out.tables["particle_moments"]
        assert table.header == ["time", "observable", "value", "replica"]
        assert len(table.rows) == 9 * 4
        assert {row[1] for row in table.rows} == {"m2"}
        assert sorted({row[3] for row in table.rows}) == [0, 1, 2, 3]
        assert table.rows[-1][0] == pytest.approx(0.2)
        run_dir = write_outcome(out, cfg)
        lines = (run_dir / "particle_moments.csv").read_bytes().split(b"\r\n")
        assert lines[0] == b"time,observable,value,replica"
        assert lines[1].split(b",")[1:4:2] == [b"m2", b"0"]

    @pytest.mark.slow
    def test_prop23_short_horizon(self, tmp_path):
        cfg = validate_config({
            "experiment": "prop23_audit",
            "output_dir": str(tmp_path),
            "model": {"a": 0.1, "eps": 0.05},
            "sim": {"dt": 0.01, "n_replicas": 16},
            "grid": {"n_cells": 128},
            "prop23": {"t_end": 0.2, "fn_samples": 20000, "fn_eps": [0.05], "fn_n": [2, 8]},
        })
        out = run_experiment(cfg, SERIAL)
        names = {c.name: c.passed for c in out.checks}
        assert names["prop23_chain"]
        assert names["prop23_initial_tight"]
        assert names["fn_closed_form"]
        rows = out.tables["prop23_chain"].rows
        assert rows[0][1] == pytest.approx(0.0, abs=1e-12)
        assert rows[-1][0] == pytest.approx(0.2)

        t, w2, _, fn, rhs, slack, fn_full, rhs_lipschitz = (np.array(col, dtype=float) for col in zip(*rows))
        eta = out.metrics["eta"]
        expected = w2[0] + eta * cumulative_trapezoid(w2, t, initial=0.0) + cumulative_trapezoid(fn, t, initial=0.0) / eta
        np.testing.assert_allclose(rhs, expected, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(fn_full, 2.0 * fn, rtol=1e-12)
        assert np.all(slack >= -1e-12)
        assert np.all(rhs_lipschitz >= rhs - 1e-12)


class TestWriteOutcome:
    def test_artifacts(self, tmp_path):
        cfg = small_trace(tmp_path)
        run_dir = write_outcome(run_experiment(cfg, SERIAL), cfg)
        assert run_dir == tmp_path / "trace_audit"
        for name in ("trace_audit.csv", "trace_audit.svg", "checks.csv", "summary.json", "config.json"):
            assert (run_dir / name).is_file()
        summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
        assert summary["pass"] is True
        assert summary["experiment"] == "trace_audit"
        assert (run_dir / "checks.csv").read_bytes().startswith(b"check,pass\r\n")

    def test_reruns_are_byte_identical(self, tmp_path):
        first = write_outcome(run_experiment(small_trace(tmp_path / "a"), SERIAL), small_trace(tmp_path / "a"))
        second = write_outcome(run_experiment(small_trace(tmp_path / "b"), WorkerPool(4)), small_trace(tmp_path / "b"))
        for name in ("trace_audit.csv", "trace_audit.svg", "summary.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
