"""
Test the experiment harness pieces: scenarios, trajectory CSV files, metrics and configuration
"""

import json
import math

import numpy as np
import pytest

from src.bridge import HoldPolicy, WireConfig
from src.config import (ExperimentConfig, dump_config, load_config, load_config_file, load_gains,
                        save_gains)
from src.control import ControllerConfig, PidGains, closed_loop_sim
from src.errors import ConfigError, CsvFormatError, InputDomainError
from src.metrics import compute_metrics
from src.plant import PlantState
from src.scenario import (CSV_HEADER, Disturbance, Scenario, Status, Trajectory, TrajectoryRow,
                          read_csv, write_csv)

ENV_VARS = ("CARTPOLE_LISTEN", "CARTPOLE_PEER", "CARTPOLE_TIMEOUT_MS", "CARTPOLE_MAX_MISSES",
            "CARTPOLE_HOLD_POLICY")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ENV_VARS:
        monkeypatch.delenv(var, raising=False)


def synthetic(phi, dt=0.001, status=Status.COMPLETED, u=None):
    rows = []
    for k, value in enumerate(phi, start=1):
        rows.append(TrajectoryRow(step=k, t=k * dt, x=0.0, x_dot=0.0, theta=math.pi + value, phi=value,
                                  u_cmd=0.0, u_applied=0.0 if u is None else u[k - 1], seq=k // 10))
    return Trajectory(rows=rows, status=status)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

def test_scenario_defaults():
    s = Scenario()
    assert s.substeps == 10 and s.n_ticks == 1000
    assert s.initial.phi == pytest.approx(0.05)
    assert s.disturbance_force(2.99) == 0.0
    assert s.disturbance_force(3.05) == 2.0
    assert s.disturbance_force(3.1) == 0.0


def test_scenario_validation():
    with pytest.raises(ConfigError) as err:
        Scenario(period=0.0105)
    assert err.value.field == "period"
    with pytest.raises(ConfigError) as err:
        Scenario(duration=1.0)
    assert err.value.field == "disturbances[0].time"
    with pytest.raises(ConfigError):
        Scenario(dt=0.1)
    with pytest.raises(ConfigError):
        Scenario(noise_std=-1.0)
    with pytest.raises(ConfigError):
        Scenario(initial=PlantState(x=float("inf")))
    with pytest.raises(ConfigError):
        Disturbance(time=1.0, force=1.0, duration=-0.1)


def test_duration_must_be_whole_periods():
    for duration in (0.015, 0.014, 0.004):
        with pytest.raises(ConfigError) as err:
            Scenario(duration=duration, disturbances=())
        assert err.value.field == "duration"
    assert Scenario(duration=0.02, disturbances=()).n_ticks == 2


def test_push_in_last_period_is_applied(p0):
    push = Disturbance(0.012, 2.0, 0.005)
    scenario = Scenario(initial=PlantState.upright(0.0), duration=0.02, disturbances=(push,))
    traj = closed_loop_sim(p0, ControllerConfig(), scenario)
    assert len(traj) == 20
    assert traj.rows[-1].t == pytest.approx(0.02)
    x_dot = traj.column("x_dot")
    assert x_dot[10] == 0.0
    assert x_dot[-1] > 0.0


def test_overlapping_disturbances_add():
    s = Scenario(disturbances=(Disturbance(1.0, 2.0, 1.0), Disturbance(1.5, -0.5, 1.0)))
    assert s.disturbance_force(1.6) == 1.5


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, tuned_gains, p0):
    traj = closed_loop_sim(p0, ControllerConfig(gains=tuned_gains),
                           Scenario(duration=1.0, disturbances=(), noise_std=0.001, seed=3))
    path = tmp_path / "traj.csv"
    write_csv(traj, path)
    back = read_csv(path)
    assert back.rows == traj.rows
    assert back.status is Status.COMPLETED


def test_csv_keeps_fall(tmp_path, p0):
    traj = closed_loop_sim(p0, ControllerConfig(), Scenario(initial=PlantState.upright(0.01),
                                                            disturbances=()))
    write_csv(traj, tmp_path / "fell.csv")
    back = read_csv(tmp_path / "fell.csv")
    assert back.rows == traj.rows
    assert back.status is Status.FELL


def test_empty_trajectory_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    write_csv(Trajectory(), path)
    assert path.read_text() == ",".join(CSV_HEADER) + "\n"
    assert len(read_csv(path)) == 0


def test_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("step,t,x\n1,0.001,0\n")
    with pytest.raises(CsvFormatError) as err:
        read_csv(path)
    assert err.value.line == 1

    path.write_text("")
    with pytest.raises(CsvFormatError):
        read_csv(path)

    header = ",".join(CSV_HEADER)
    path.write_text(f"{header}\n1,0.001,0,0,3.1,0,0,0,0,0\n2,0.002,0,0,oops,0,0,0,0,0\n")
    with pytest.raises(CsvFormatError) as err:
        read_csv(path)
    assert err.value.line == 3

    path.write_text(f"{header}\n1,0.001,0,0,3.1,0\n")
    with pytest.raises(CsvFormatError) as err:
        read_csv(path)
    assert err.value.line == 2

    path.write_text(f"{header}\n1,0.001,0,0,3.1,0,0,0,0,2\n")
    with pytest.raises(CsvFormatError):
        read_csv(path)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_metrics_of_flat_trajectory():
    m = compute_metrics(synthetic(np.zeros(500)))
    assert m.settling_time == 0.0
    assert m.peak_phi == 0.0
    assert m.overshoot == 0.0
    assert not m.fell and m.status is Status.COMPLETED


def test_settling_time_of_exponential_decay():
    phi0, dt = 0.05, 0.001
    t = np.arange(1, 10_001) * dt
    m = compute_metrics(synthetic(phi0 * np.exp(-t), dt), tolerance=0.01 * phi0, phi0=phi0)
    assert abs(m.settling_time - math.log(100)) <= dt
    assert m.peak_phi == pytest.approx(phi0 * math.exp(-dt))
    assert m.overshoot == 0.0


def test_wider_tolerance_never_settles_later(tuned_gains, p0):
    traj = closed_loop_sim(p0, ControllerConfig(gains=tuned_gains), Scenario())
    times = [compute_metrics(traj, tol).settling_time for tol in (0.001, 0.002, 0.005, 0.01, 0.05)]
    assert all(t is not None for t in times)
    assert times == sorted(times, reverse=True)


def test_overshoot_and_effort():
    phi = np.array([0.1, 0.05, -0.02, -0.01, 0.0])
    m = compute_metrics(synthetic(phi, u=[3.0, -3.0, 3.0, -3.0, 3.0]), tolerance=0.001)
    assert m.overshoot == pytest.approx(0.2)
    assert m.rms_u == pytest.approx(3.0)
    assert m.settling_time == pytest.approx(0.005)


def test_fall_detection():
    m = compute_metrics(synthetic(np.linspace(0.0, math.pi, 100)))
    assert m.fell
    assert m.settling_time is None
    assert compute_metrics(synthetic([0.0, 0.1], status=Status.FELL)).fell


def test_metrics_dict_in_degrees():
    m = compute_metrics(synthetic([0.0, math.pi / 4]))
    d = m.to_dict(degrees=True)
    assert d["peak_phi"] == pytest.approx(45.0)
    assert d["angle_unit"] == "deg"
    assert m.to_dict()["peak_phi"] == pytest.approx(math.pi / 4)


def test_metrics_reject_empty():
    with pytest.raises(InputDomainError):
        compute_metrics(Trajectory())
    with pytest.raises(InputDomainError):
        compute_metrics(synthetic([0.0]), tolerance=0.0)


def test_miss_count_counts_ticks():
    rows = [TrajectoryRow(k, k * 0.001, 0, 0, math.pi, 0, 0, 0, seq=k // 10, miss=k < 20)
            for k in range(1, 40)]
    assert Trajectory(rows).miss_count == 2


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_empty_config_is_all_defaults():
    assert load_config("{}") == ExperimentConfig()
    assert load_config("") == ExperimentConfig()
    assert load_config_file(None) == ExperimentConfig()


@pytest.mark.parametrize("doc, path", [
    ({"plant": {"M": -1}}, "plant.M"),
    ({"plant": {"mass": 1.0}}, "plant.mass"),
    ({"plant": {"M": "heavy"}}, "plant.M"),
    ({"controller": {"gains": {"kp": -2.0}}}, "controller.gains.kp"),
    ({"controller": {"period": 0.0105}}, "controller.period"),
    ({"scenario": {"period": 0.01}}, "scenario.period"),
    ({"scenario": {"duration": 0.015}}, "scenario.duration"),
    ({"scenario": {"initial": {"theta": 3.0, "phi": 0.1}}}, "scenario.initial"),
    ({"scenario": {"disturbances": [{"time": 1.0, "force": 2.0}]}}, "scenario.disturbances[0]"),
    ({"scenario": {"seed": 1.5}}, "scenario.seed"),
    ({"tuning": {"kp": [10.0, 1.0]}}, "tuning.kp"),
    ({"tuning": {"points": 1}}, "tuning.points"),
    ({"wire": {"peer": "nowhere"}}, "wire.peer"),
    ({"wire": {"max_misses": 0}}, "wire.max_misses"),
    ({"wire": {"hold_policy": "last"}}, "wire.hold_policy"),
    ({"channel": {"drop": 1.0}}, "channel.drop"),
    ({"transport": "tcp"}, "transport"),
    ({"metrics": {}}, "metrics"),
])
def test_config_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError) as err:
        load_config(json.dumps(doc))
    assert err.value.field == path


def test_invalid_json():
    with pytest.raises(ConfigError):
        load_config("{plant:")
    with pytest.raises(ConfigError):
        load_config("[1, 2]")


def test_config_values_land_in_place():
    cfg = load_config(json.dumps({
        "plant": {"M": 1.0},
        "controller": {"gains": {"kp": 40.0, "ki": 5.0, "kd": 3.0}, "period": 0.02},
        "scenario": {"initial": {"phi": -0.1}, "duration": 2.0, "disturbances": []},
        "wire": {"peer": "127.0.0.1:9100", "hold_policy": "zero"},
        "channel": {"delay_ms": 5.0, "seed": 4},
        "transport": "udp",
    }))
    assert cfg.plant.M == 1.0 and cfg.plant.m == 0.2
    assert cfg.controller.gains == PidGains(40.0, 5.0, 3.0)
    assert cfg.scenario.period == 0.02 and cfg.scenario.substeps == 20
    assert cfg.scenario.initial.phi == pytest.approx(-0.1)
    assert cfg.scenario.disturbances == ()
    assert cfg.wire.peer == ("127.0.0.1", 9100)
    assert cfg.wire.hold_policy is HoldPolicy.ZERO
    assert cfg.channel.delay_ms == 5.0
    assert cfg.transport == "udp"


def test_dump_is_idempotent():
    text = json.dumps({
        "controller": {"gains": {"kp": 40.0}},
        "scenario": {"initial": {"phi": 0.1}, "noise_std": 0.001},
        "tuning": {"kd": [0.0, 10.0]},
        "wire": {"peer": "127.0.0.1:9100"},
    })
    doc = dump_config(load_config(text))
    assert dump_config(load_config(json.dumps(doc))) == doc
    assert load_config(json.dumps(doc)) == load_config(text)
    assert dump_config(ExperimentConfig())["wire"]["listen"] == "127.0.0.1:0"


def test_environment_supplies_wire_defaults(monkeypatch):
    monkeypatch.setenv("CARTPOLE_PEER", "127.0.0.1:9100")
    monkeypatch.setenv("CARTPOLE_TIMEOUT_MS", "50")
    monkeypatch.setenv("CARTPOLE_HOLD_POLICY", "zero")
    cfg = load_config("{}")
    assert cfg.wire.peer == ("127.0.0.1", 9100)
    assert cfg.wire.timeout_ms == 50.0
    assert cfg.wire.hold_policy is HoldPolicy.ZERO
    assert load_config('{"wire": {"timeout_ms": 75}}').wire.timeout_ms == 75.0
    assert WireConfig.from_env(max_misses=4).max_misses == 4


def test_bad_environment_value(monkeypatch):
    monkeypatch.setenv("CARTPOLE_MAX_MISSES", "many")
    with pytest.raises(ConfigError) as err:
        load_config("{}")
    assert err.value.field == "wire.CARTPOLE_MAX_MISSES"


def test_config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text('{"scenario": {"duration": 4.0}}')
    assert load_config_file(path).scenario.duration == 4.0
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")


def test_gains_file(tmp_path, tuned):
    path = tmp_path / "gains.json"
    doc = save_gains(path, tuned)
    assert doc["cost"] == tuned.cost
    assert load_gains(path) == tuned.gains

    save_gains(path, PidGains(1.0, 2.0, 3.0))
    assert json.loads(path.read_text())["cost"] is None
    assert load_gains(path) == PidGains(1.0, 2.0, 3.0)

    path.write_text('{"kp": 1.0, "ki": 2.0}')
    with pytest.raises(ConfigError):
        load_gains(path)
    path.write_text('{"kp": -1.0, "ki": 2.0, "kd": 0.0}')
    with pytest.raises(ConfigError) as err:
        load_gains(path)
    assert err.value.field == "gains.kp"
