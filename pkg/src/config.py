"""
Experiment Configuration
Loads one JSON document into validated parameter objects and writes the
normalized form back. Wire settings start from CARTPOLE_* environment
defaults (see bridge.WireConfig.from_env).
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

from .bridge import HoldPolicy, WireConfig, format_address, parse_address
from .channel import ChannelConfig
from .control import ControllerConfig, GainRange, PidGains, TuningConfig, TuningResult
from .errors import ConfigError
from .plant import PlantParams, PlantState
from .scenario import Disturbance, Scenario

logger = logging.getLogger(__name__)

TRANSPORTS = ("inproc", "udp")


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    scenario: Scenario = field(default_factory=Scenario)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    wire: WireConfig = field(default_factory=WireConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    transport: str = "inproc"

    def with_gains(self, gains: PidGains) -> "ExperimentConfig":
        return replace(self, controller=replace(self.controller, gains=gains))


# ---------------------------------------------------------------------------
# Field readers
# ---------------------------------------------------------------------------

def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"must be a number, got {value!r}", field=path)
    return float(value)


def _integer(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"must be an integer, got {value!r}", field=path)
    return value


def _boolean(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"must be true or false, got {value!r}", field=path)
    return value


def _string(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"must be a string, got {value!r}", field=path)
    return value


def _address(value: Any, path: str):
    return parse_address(_string(value, path), path)


def _range(value: Any, path: str) -> GainRange:
    if not (isinstance(value, list) and len(value) == 2):
        raise ConfigError("must be a [lo, hi] pair", field=path)
    try:
        return GainRange(_number(value[0], path), _number(value[1], path))
    except ConfigError as e:
        raise ConfigError(e.detail, field=path) from None


def _section(doc: Dict, name: str) -> Dict:
    data = doc.get(name, {})
    if not isinstance(data, dict):
        raise ConfigError("must be an object", field=name)
    return data


def _read(data: Dict, path: str, readers: Dict[str, Callable[[Any, str], Any]]) -> Dict[str, Any]:
    """Apply one reader per key; unknown keys are an error"""
    out = {}
    for key, value in data.items():
        if key not in readers:
            raise ConfigError(f"unknown key (expected one of {sorted(readers)})",
                              field=f"{path}.{key}")
        out[key] = readers[key](value, f"{path}.{key}")
    return out


def _build(cls, section: str, kwargs: Dict[str, Any]):
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise e.under(section) from None


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

def _plant(doc: Dict) -> PlantParams:
    kwargs = _read(_section(doc, "plant"), "plant", {k: _number for k in ("M", "m", "b", "l", "I", "g")})
    return _build(PlantParams, "plant", kwargs)


def _gains(value: Any, path: str) -> PidGains:
    if not isinstance(value, dict):
        raise ConfigError("must be an object", field=path)
    return _build(PidGains, path, _read(value, path, {k: _number for k in ("kp", "ki", "kd")}))


def _controller(doc: Dict) -> ControllerConfig:
    readers = {k: _number for k in ("setpoint", "period", "derivative_filter", "integral_limit",
                                    "saturation", "lowpass_tau")}
    readers["gains"] = _gains
    kwargs = _read(_section(doc, "controller"), "controller", readers)
    return _build(ControllerConfig, "controller", kwargs)


def _initial(value: Any, path: str) -> PlantState:
    if not isinstance(value, dict):
        raise ConfigError("must be an object", field=path)
    kwargs = _read(value, path, {k: _number for k in ("x", "x_dot", "theta", "phi", "theta_dot")})
    if "theta" in kwargs and "phi" in kwargs:
        raise ConfigError("give theta or phi, not both", field=path)
    phi = kwargs.pop("phi", None)
    if phi is not None:
        kwargs["theta"] = math.pi + phi
    return PlantState(**kwargs)


def _disturbances(value: Any, path: str):
    if not isinstance(value, list):
        raise ConfigError("must be a list", field=path)
    out = []
    for i, item in enumerate(value):
        p = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise ConfigError("must be an object", field=p)
        kwargs = _read(item, p, {k: _number for k in ("time", "force", "duration")})
        missing = {"time", "force", "duration"} - set(kwargs)
        if missing:
            raise ConfigError(f"missing {sorted(missing)}", field=p)
        out.append(_build(Disturbance, p, kwargs))
    return tuple(out)


def _scenario(doc: Dict, period: float) -> Scenario:
    readers = {k: _number for k in ("duration", "dt", "noise_std", "track_limit", "actuator_limit")}
    readers.update(initial=_initial, disturbances=_disturbances, seed=_integer)
    data = _section(doc, "scenario")
    if "period" in data:
        raise ConfigError("the control period is set in controller.period", field="scenario.period")
    kwargs = _read(data, "scenario", readers)
    kwargs["period"] = period
    try:
        return Scenario(**kwargs)
    except ConfigError as e:
        if e.field == "period":
            raise e.under("controller") from None
        raise e.under("scenario") from None


def _tuning(doc: Dict) -> TuningConfig:
    readers: Dict[str, Callable] = {k: _range for k in ("kp", "ki", "kd")}
    readers.update({k: _number for k in ("phi0", "horizon", "stability_margin")})
    readers.update(points=_integer, refine_iters=_integer)
    return _build(TuningConfig, "tuning", _read(_section(doc, "tuning"), "tuning", readers))


def _wire(doc: Dict) -> WireConfig:
    readers: Dict[str, Callable] = {k: _address for k in ("listen", "peer", "peer_b")}
    readers.update(timeout_ms=_number, idle_timeout_s=_number, max_misses=_integer,
                   realtime=_boolean, hold_policy=_hold_policy)
    kwargs = _read(_section(doc, "wire"), "wire", readers)
    try:
        return WireConfig.from_env(**kwargs)
    except ConfigError as e:
        raise e.under("wire") from None


def _hold_policy(value: Any, path: str) -> HoldPolicy:
    try:
        return HoldPolicy(_string(value, path))
    except ValueError:
        raise ConfigError(f"must be one of {[p.value for p in HoldPolicy]}", field=path) from None


def _channel(doc: Dict) -> ChannelConfig:
    readers: Dict[str, Callable] = {k: _number for k in ("delay_ms", "jitter_ms", "drop")}
    readers["seed"] = _integer
    return _build(ChannelConfig, "channel", _read(_section(doc, "channel"), "channel", readers))


SECTIONS = ("plant", "controller", "scenario", "tuning", "wire", "channel", "transport")


def config_from_dict(doc: Dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section (expected one of {list(SECTIONS)})", field=unknown[0])
    transport = _string(doc.get("transport", "inproc"), "transport")
    if transport not in TRANSPORTS:
        raise ConfigError(f"must be one of {list(TRANSPORTS)}", field="transport")
    controller = _controller(doc)
    return ExperimentConfig(
        plant=_plant(doc),
        controller=controller,
        scenario=_scenario(doc, controller.period),
        tuning=_tuning(doc),
        wire=_wire(doc),
        channel=_channel(doc),
        transport=transport,
    )


def load_config(text: str) -> ExperimentConfig:
    """
    Parse and validate a JSON document; missing keys take their defaults

    Raises:
        ConfigError: malformed JSON, unknown key or invalid value, with the
            dotted path of the offending field
    """
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}") from None
    return config_from_dict(doc)


def load_config_file(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return load_config(text)


def dump_config(cfg: ExperimentConfig) -> Dict:
    """Fully populated document; load_config(json.dumps(dump_config(c))) rebuilds c"""
    p, c, s, t, w, ch = cfg.plant, cfg.controller, cfg.scenario, cfg.tuning, cfg.wire, cfg.channel
    return {
        "plant": {"M": p.M, "m": p.m, "b": p.b, "l": p.l, "I": p.I, "g": p.g},
        "controller": {
            "gains": {"kp": c.gains.kp, "ki": c.gains.ki, "kd": c.gains.kd},
            "setpoint": c.setpoint,
            "period": c.period,
            "derivative_filter": c.derivative_filter,
            "integral_limit": c.integral_limit,
            "saturation": c.saturation,
            "lowpass_tau": c.lowpass_tau,
        },
        "scenario": {
            "initial": {"x": s.initial.x, "x_dot": s.initial.x_dot,
                        "theta": s.initial.theta, "theta_dot": s.initial.theta_dot},
            "duration": s.duration,
            "dt": s.dt,
            "disturbances": [{"time": d.time, "force": d.force, "duration": d.duration}
                             for d in s.disturbances],
            "noise_std": s.noise_std,
            "seed": s.seed,
            "track_limit": s.track_limit,
            "actuator_limit": s.actuator_limit,
        },
        "tuning": {
            "kp": [t.kp.lo, t.kp.hi],
            "ki": [t.ki.lo, t.ki.hi],
            "kd": [t.kd.lo, t.kd.hi],
            "points": t.points,
            "refine_iters": t.refine_iters,
            "phi0": t.phi0,
            "horizon": t.horizon,
            "stability_margin": t.stability_margin,
        },
        "wire": {k: v for k, v in {
            "listen": format_address(w.listen),
            "peer": format_address(w.peer),
            "peer_b": format_address(w.peer_b),
            "timeout_ms": w.timeout_ms,
            "max_misses": w.max_misses,
            "hold_policy": w.hold_policy.value,
            "realtime": w.realtime,
            "idle_timeout_s": w.idle_timeout_s,
        }.items() if v is not None},
        "channel": {"delay_ms": ch.delay_ms, "jitter_ms": ch.jitter_ms, "drop": ch.drop,
                    "seed": ch.seed},
        "transport": cfg.transport,
    }


# ---------------------------------------------------------------------------
# Gains files
# ---------------------------------------------------------------------------

def save_gains(path: Union[str, Path], result: Union[TuningResult, PidGains],
               cost: Optional[float] = None) -> Dict:
    if isinstance(result, TuningResult):
        gains, cost = result.gains, result.cost
    else:
        gains = result
    doc = {"kp": gains.kp, "ki": gains.ki, "kd": gains.kd, "cost": cost}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    logger.info("gains written to %s", path)
    return doc


def load_gains(path: Union[str, Path]) -> PidGains:
    """Read {kp, ki, kd[, cost]}; cost is informational"""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("gains file must hold a JSON object", field="gains")
    doc = {k: v for k, v in doc.items() if k != "cost"}
    missing = {"kp", "ki", "kd"} - set(doc)
    if missing:
        raise ConfigError(f"missing {sorted(missing)}", field="gains")
    return _gains(doc, "gains")
