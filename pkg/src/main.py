"""
CART-POLE CO-SIMULATION - COMMAND LINE
Subcommands: model, tune, simulate, plant, control, channel, report, sweep

Exit codes: 0 success (a fallen or aborted episode is a result), 1 usage or
configuration error, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from dotenv import load_dotenv

from .bridge import WireConfig, parse_address, run_controller_endpoint, run_plant_endpoint
from .channel import ChannelConfig, channel_relay
from .config import (ExperimentConfig, dump_config, load_config_file, load_gains,
                     save_gains)
from .errors import CartPoleError, ConfigError, CsvFormatError
from .experiment import DEFAULT_DELAYS_MS, latency_sweep, run_experiment, tune_from_config
from .linmodel import model_report
from .metrics import DEFAULT_TOLERANCE, compute_metrics
from .scenario import read_csv, write_csv

load_dotenv()
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, allow_nan=True))


def _address(text: str):
    try:
        return parse_address(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e))


def _delays(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _config(args) -> ExperimentConfig:
    return load_config_file(getattr(args, "config", None))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_model(args) -> int:
    cfg = _config(args)
    _emit(model_report(cfg.plant))
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _config(args)
    result = tune_from_config(cfg, verbose=args.verbose)
    doc = save_gains(args.out, result)
    _emit(doc)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.transport:
        cfg = replace(cfg, transport=args.transport)
    gains = load_gains(args.gains) if args.gains else None
    _, result = run_experiment(cfg, gains, csv_path=args.out, verbose=args.verbose)
    _emit(result.to_dict())
    return EXIT_OK


def cmd_plant(args) -> int:
    cfg = _config(args)
    wire = replace(cfg.wire, listen=args.listen, realtime=args.realtime or cfg.wire.realtime)
    if args.peer:
        wire = replace(wire, peer=args.peer)
    traj = run_plant_endpoint(cfg.plant, wire, cfg.scenario)
    if args.out:
        write_csv(traj, args.out)
    _emit(compute_metrics(traj, phi0=cfg.scenario.initial.phi).to_dict())
    return EXIT_OK


def cmd_control(args) -> int:
    cfg = _config(args)
    controller = replace(cfg.controller, gains=load_gains(args.gains))
    wire = replace(cfg.wire, listen=args.listen, peer=args.peer)
    log = run_controller_endpoint(controller, wire)
    if args.log_out:
        with open(args.log_out, "w") as f:
            for event in log.events:
                f.write(json.dumps(event.to_dict()) + "\n")
    _emit(log.summary())
    return EXIT_OK


def cmd_channel(args) -> int:
    channel = ChannelConfig(delay_ms=args.delay_ms, jitter_ms=args.jitter_ms,
                            drop=args.drop, seed=args.seed)
    wire = WireConfig.from_env(listen=args.listen, peer=args.peer_a, peer_b=args.peer_b,
                               idle_timeout_s=args.idle_timeout_s)
    stats = channel_relay(channel, wire)
    _emit(stats.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        traj = read_csv(args.input)
    except OSError as e:
        raise UsageError(f"cannot read {args.input}: {e}")
    _emit(compute_metrics(traj, args.tolerance).to_dict(degrees=args.degrees))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    gains = load_gains(args.gains) if args.gains else None
    result = latency_sweep(cfg, gains, args.delays, verbose=args.verbose)
    _emit(result.to_dict())
    return EXIT_OK


def cmd_config(args) -> int:
    _emit(dump_config(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cartpole", description="Cart-pendulum co-simulation toolkit")
    parser.add_argument("--log-level", default=os.getenv("CARTPOLE_LOG_LEVEL", "WARNING"),
                        help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("model", help="print the linearized model report")
    p.add_argument("--config")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("tune", help="tune PID gains against the linear model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("simulate", help="run one episode and write its trajectory")
    p.add_argument("--config")
    p.add_argument("--gains")
    p.add_argument("--out", required=True)
    p.add_argument("--transport", choices=("inproc", "udp"))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plant", help="run the plant endpoint over UDP")
    p.add_argument("--config")
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--peer", type=_address)
    p.add_argument("--realtime", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plant)

    p = sub.add_parser("control", help="run the controller endpoint over UDP")
    p.add_argument("--config")
    p.add_argument("--gains", required=True)
    p.add_argument("--peer", type=_address)
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--log-out")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("channel", help="run the impairment relay")
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--peer-a", type=_address)
    p.add_argument("--peer-b", type=_address, required=True)
    p.add_argument("--delay-ms", type=float, default=0.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--drop", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--idle-timeout-s", type=float, default=10.0)
    p.set_defaults(func=cmd_channel)

    p = sub.add_parser("report", help="metrics of a trajectory file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--degrees", action="store_true")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="latency sweep over the in-process channel")
    p.add_argument("--config")
    p.add_argument("--gains")
    p.add_argument("--delays", type=_delays, default=list(DEFAULT_DELAYS_MS))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("config", help="print the normalized configuration")
    p.add_argument("--config")
    p.set_defaults(func=cmd_config)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"error: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (UsageError, ConfigError, CsvFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CartPoleError as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
