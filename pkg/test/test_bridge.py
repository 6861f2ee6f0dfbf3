"""
Test the lockstep bridge: in-process binding, UDP endpoints and the frame logs
"""

import math
import socket
import threading

import numpy as np
import pytest

from src.bridge import (ControllerEndpoint, ControllerHandler, FrameLog, HoldPolicy, PlantEndpoint,
                        WireConfig, format_address, inproc_loop, parse_address,
                        run_plant_endpoint)
from src.channel import ChannelConfig
from src.control import ControllerConfig, closed_loop_sim
from src.errors import BindError, ConfigError
from src.frames import Frame, FrameKind, decode_frame, encode_frame
from src.plant import PlantState
from src.scenario import Scenario, Status

STATE_COLUMNS = ("x", "x_dot", "theta", "phi")


def short(duration=0.5, phi=0.05, **kw):
    return Scenario(initial=PlantState.upright(phi), duration=duration, disturbances=(), **kw)


def _udp():
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    s.settimeout(5.0)
    return s


def fake_controller(sock, on_sensor):
    """Serve sensor frames with on_sensor(frame) -> [frames] until a shutdown arrives"""
    def serve():
        while True:
            try:
                data, addr = sock.recvfrom(2048)
            except socket.timeout:
                return
            frame = decode_frame(data)
            if frame.kind is FrameKind.SHUTDOWN:
                return
            for reply in on_sensor(frame):
                sock.sendto(encode_frame(reply), addr)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    return thread


def test_addresses():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_address("localhost:0") == ("localhost", 0)
    assert format_address(("10.0.0.1", 5)) == "10.0.0.1:5"
    assert format_address(None) is None
    for bad in ("9000", ":9000", "host:port", "host:70000"):
        with pytest.raises(ConfigError):
            parse_address(bad)


def test_wire_config_validation():
    assert WireConfig(hold_policy="zero").hold_policy is HoldPolicy.ZERO
    with pytest.raises(ConfigError):
        WireConfig(max_misses=0)
    with pytest.raises(ConfigError):
        WireConfig(timeout_ms=0)
    with pytest.raises(ValueError):
        WireConfig(hold_policy="last")


# ---------------------------------------------------------------------------
# Controller handler
# ---------------------------------------------------------------------------

def test_handler_echoes_seq_and_serves_each_seq_once(tuned_gains):
    handler = ControllerHandler(ControllerConfig(gains=tuned_gains))
    s = PlantState.upright(0.05)
    first = handler.handle(Frame.sensor(0, 0.0, s))
    assert first.kind is FrameKind.ACTUATOR and first.seq == 0
    assert handler.handle(Frame.sensor(0, 0.0, s)) is None
    assert handler.log.count(FrameKind.SENSOR, "duplicate") == 1
    assert handler.handle(Frame.sensor(1, 0.01, s)).seq == 1
    assert handler.handle(Frame.sensor(1, 0.01, s)) is None


def test_handler_late_seq_zero_is_dropped(tuned_gains):
    handler = ControllerHandler(ControllerConfig(gains=tuned_gains))
    s = PlantState.upright(0.05)
    handler.handle(Frame.sensor(1, 0.01, s))
    assert handler.handle(Frame.sensor(0, 0.0, s)) is None
    assert handler.last_seq == 1
    assert handler.log.seqs(FrameKind.SENSOR, "rx") == [1]
    assert handler.log.seqs(FrameKind.SENSOR, "duplicate") == [0]


def test_handler_restarts_only_on_reset(tuned_gains):
    handler = ControllerHandler(ControllerConfig(gains=tuned_gains))
    s = PlantState.upright(0.05)
    first = handler.handle(Frame.sensor(0, 0.0, s))
    handler.handle(Frame.sensor(1, 0.01, s))
    assert handler.handle(Frame.reset(0, 0.0, s)) is None
    assert handler.last_seq is None
    assert handler.handle(Frame.sensor(0, 0.0, s)).force == first.force

    handler.handle(Frame.shutdown(2, 0.02))
    assert handler.shutdown


def test_handler_commands_are_pruned(tuned_gains):
    s = PlantState.upright(0.05)
    plain = ControllerHandler(ControllerConfig(gains=tuned_gains))
    kept = ControllerHandler(ControllerConfig(gains=tuned_gains), keep_commands=True)
    for k in range(5):
        plain.handle(Frame.sensor(k, 0.01 * k, s))
        kept.handle(Frame.sensor(k, 0.01 * k, s))
    assert plain.commands == {}
    assert sorted(kept.commands) == [0, 1, 2, 3, 4]
    assert math.isfinite(kept.take_command(3))
    assert sorted(kept.commands) == [4]


# ---------------------------------------------------------------------------
# In-process binding
# ---------------------------------------------------------------------------

def test_inproc_equals_reference_loop(tuned_gains, p0):
    cfg = ControllerConfig(gains=tuned_gains)
    for scenario in (Scenario(), Scenario(noise_std=0.003, seed=8, duration=3.0, disturbances=())):
        ref = closed_loop_sim(p0, cfg, scenario)
        got = inproc_loop(p0, cfg, scenario)
        assert got.rows == ref.rows
        assert got.status is ref.status


def test_inproc_frame_log(tuned_gains, p0):
    log = FrameLog()
    scenario = short(1.0)
    inproc_loop(p0, ControllerConfig(gains=tuned_gains), scenario, frame_log=log)
    n = scenario.n_ticks
    assert log.seqs(FrameKind.SENSOR, "tx") == list(range(n))
    assert log.seqs(FrameKind.ACTUATOR, "tx") == list(range(n))
    assert log.seqs(FrameKind.ACTUATOR, "rx") == list(range(n))
    assert log.count(FrameKind.SHUTDOWN, "tx") == 1
    assert log.count(direction="stale") == 0


def test_inproc_zero_gains_fall_with_shutdown(p0):
    log = FrameLog()
    traj = inproc_loop(p0, ControllerConfig(), short(10.0, phi=0.01), frame_log=log)
    assert traj.status is Status.FELL
    assert log.count(FrameKind.SHUTDOWN, "tx") == 1


def test_inproc_delay_misses_first_ticks(tuned_gains, p0):
    log = FrameLog()
    traj = inproc_loop(p0, ControllerConfig(gains=tuned_gains), short(0.5),
                       channel=ChannelConfig(delay_ms=20.0), frame_log=log)
    per_tick = {}
    for r in traj.rows:
        per_tick.setdefault(r.seq, set()).add(r.miss)
    assert [per_tick[k] for k in range(6)] == [{True}] * 4 + [{False}] * 2
    assert traj.miss_count == 4
    # tick k applies the reply to sensor k - 4
    assert log.seqs(FrameKind.ACTUATOR, "rx")[:3] == [0, 1, 2]
    assert all(r.u_applied == 0.0 for r in traj.rows if r.miss)


def test_inproc_lossy_channel_is_reproducible(tuned_gains, p0):
    cfg = ControllerConfig(gains=tuned_gains)
    channel = ChannelConfig(drop=0.3, seed=7)
    wire = WireConfig(hold_policy=HoldPolicy.ZERO, max_misses=1000)
    logs = [FrameLog(), FrameLog()]
    a = inproc_loop(p0, cfg, short(1.0), channel=channel, wire=wire, frame_log=logs[0])
    b = inproc_loop(p0, cfg, short(1.0), channel=channel, wire=wire, frame_log=logs[1])
    assert a.rows == b.rows
    assert a.miss_count > 0

    ticks = {r.seq for r in a.rows}
    applied = logs[0].count(FrameKind.ACTUATOR, "rx")
    assert len(ticks) == a.miss_count + applied
    for r in a.rows:
        if r.miss:
            assert r.u_applied == 0.0 and r.u_cmd == 0.0
        else:
            assert math.isfinite(r.u_cmd)


def test_inproc_jitter_keeps_processed_seqs_monotone(tuned_gains, p0):
    log = FrameLog()
    wire = WireConfig(max_misses=1000)
    inproc_loop(p0, ControllerConfig(gains=tuned_gains), short(1.0),
                channel=ChannelConfig(jitter_ms=30.0, seed=0), wire=wire, frame_log=log)
    served = log.seqs(FrameKind.SENSOR, "rx")
    assert served == sorted(set(served))
    assert log.count(FrameKind.SENSOR, "duplicate") > 0
    applied = log.seqs(FrameKind.ACTUATOR, "rx")
    assert applied == sorted(set(applied))


def test_inproc_lossy_channel_aborts_on_miss_limit(tuned_gains, p0):
    wire = WireConfig(max_misses=1)
    traj = inproc_loop(p0, ControllerConfig(gains=tuned_gains), short(2.0),
                       channel=ChannelConfig(drop=0.6, seed=1), wire=wire)
    assert traj.status is Status.ABORTED
    assert traj.rows[-1].miss


# ---------------------------------------------------------------------------
# UDP endpoints
# ---------------------------------------------------------------------------

def test_udp_matches_inproc(tuned_gains, p0):
    cfg = ControllerConfig(gains=tuned_gains)
    scenario = short(1.0)
    controller = ControllerEndpoint(cfg, WireConfig(idle_timeout_s=5.0))
    thread = threading.Thread(target=controller.run, daemon=True)
    thread.start()
    try:
        udp = run_plant_endpoint(p0, WireConfig(peer=controller.address, timeout_ms=2000.0), scenario)
    finally:
        thread.join(timeout=5.0)
        controller.close()

    ref = inproc_loop(p0, cfg, scenario)
    assert udp.status is Status.COMPLETED and len(udp) == len(ref)
    for name in STATE_COLUMNS + ("u_applied",):
        assert np.max(np.abs(udp.column(name) - ref.column(name))) <= 1e-12
    assert np.all(np.isnan(udp.column("u_cmd")))
    assert udp.miss_count == 0
    assert controller.log.seqs(FrameKind.ACTUATOR, "tx") == list(range(scenario.n_ticks))
    assert controller.log.count(FrameKind.SHUTDOWN, "rx") == 1


def test_controller_endpoint_skips_garbage(tuned_gains):
    controller = ControllerEndpoint(ControllerConfig(gains=tuned_gains), WireConfig(idle_timeout_s=5.0))
    thread = threading.Thread(target=controller.run, daemon=True)
    thread.start()
    client = _udp()
    try:
        client.sendto(b"not a frame", controller.address)
        client.sendto(encode_frame(Frame.sensor(0, 0.0, PlantState.upright(0.05))), controller.address)
        reply = decode_frame(client.recvfrom(2048)[0])
        assert reply.kind is FrameKind.ACTUATOR and reply.seq == 0
        client.sendto(encode_frame(Frame.shutdown(1, 0.01)), controller.address)
        thread.join(timeout=5.0)
        assert not thread.is_alive()
        assert controller.log.count(direction="error") == 1
    finally:
        client.close()
        controller.close()


def test_silent_peer_aborts_after_max_misses(p0):
    silent = _udp()
    try:
        wire = WireConfig(peer=silent.getsockname(), timeout_ms=20.0, max_misses=3)
        traj = run_plant_endpoint(p0, wire, short(1.0))
        sent = [decode_frame(silent.recvfrom(2048)[0]) for _ in range(4)]
    finally:
        silent.close()
    assert traj.status is Status.ABORTED
    assert len(traj) == 3 * 10
    assert all(r.miss for r in traj.rows)
    assert traj.miss_count == 3
    assert all(r.u_applied == 0.0 for r in traj.rows)
    assert [f.kind for f in sent] == [FrameKind.SENSOR] * 3 + [FrameKind.SHUTDOWN]


def test_stale_actuators_are_ignored(p0):
    ctrl = _udp()

    def on_sensor(frame):
        out = [Frame.actuator(frame.seq - 1, frame.sim_time, 7.0)] if frame.seq > 0 else []
        return out + [Frame.actuator(frame.seq, frame.sim_time, 0.0)]

    thread = fake_controller(ctrl, on_sensor)
    endpoint = PlantEndpoint(p0, WireConfig(peer=ctrl.getsockname(), timeout_ms=2000.0),
                             short(0.1, phi=0.0))
    try:
        traj = endpoint.run()
    finally:
        endpoint.close()
        thread.join(timeout=5.0)
        ctrl.close()
    assert traj.status is Status.COMPLETED
    assert np.all(traj.column("u_applied") == 0.0)
    assert endpoint.log.count(FrameKind.ACTUATOR, "stale") == 9
    assert endpoint.log.seqs(FrameKind.ACTUATOR, "rx") == list(range(10))


def test_reset_frame_reinitializes_plant(p0):
    ctrl = _udp()
    restart = PlantState(0.3, 0.0, math.pi, 0.0)

    def on_sensor(frame):
        out = [Frame.reset(frame.seq, frame.sim_time, restart)] if frame.seq == 2 else []
        return out + [Frame.actuator(frame.seq, frame.sim_time, 0.0)]

    thread = fake_controller(ctrl, on_sensor)
    try:
        traj = run_plant_endpoint(p0, WireConfig(peer=ctrl.getsockname(), timeout_ms=2000.0),
                                  short(0.1, phi=0.0))
    finally:
        thread.join(timeout=5.0)
        ctrl.close()
    assert all(r.x == 0.0 for r in traj.rows if r.seq < 2)
    assert all(r.x == 0.3 and r.theta == math.pi for r in traj.rows if r.seq >= 2)


def test_plant_endpoint_needs_peer(p0):
    with pytest.raises(ConfigError):
        PlantEndpoint(p0, WireConfig(), short())


def test_endpoint_bind_failure():
    taken = _udp()
    try:
        with pytest.raises(BindError):
            ControllerEndpoint(ControllerConfig(), WireConfig(listen=taken.getsockname()))
    finally:
        taken.close()
