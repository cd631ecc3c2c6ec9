"""Command-line entry point: ``kmsig {simulate,inject,detect,run,report}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackError, AttackSpec, inject
from .detector import WindowConfig, run_stream
from .frames import Channel, FrameFormatError, ingest_csv
from .gridsim import ConfigError, GridSimulator, SimulationDivergence
from .koopman import BACKENDS
from .scenario import (EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, execute, load_config,
                       write_ground_truth, write_manifest, write_result)

CHANNELS = [c.value for c in Channel]

_WINDOW_FLAGS = {
    "backend": "backend",
    "divergence": "divergence",
    "tau": "tau",
    "learning_len": "learning_len",
    "prediction_len": "prediction_len",
    "stride": "stride",
    "delay": "delay",
}


def _add_window_flags(p):
    g = p.add_argument_group("detector window")
    g.add_argument("--backend", choices=BACKENDS)
    g.add_argument("--divergence", choices=("kl", "js"))
    g.add_argument("--tau", type=float)
    g.add_argument("--learning-len", type=int)
    g.add_argument("--prediction-len", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--delay", type=int, help="Hankel embedding depth")


def _window_overrides(args):
    return {f"window.{key}": getattr(args, attr) for attr, key in _WINDOW_FLAGS.items()
            if getattr(args, attr, None) is not None}


def _scenario_overrides(args):
    out = _window_overrides(args)
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "channel", None) is not None:
        out["channel"] = args.channel
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kmsig",
        description="Simulate grid scenarios, inject FDI attacks and score sensors "
                    "with Koopman-mode Delta-scores.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write clean frames for a scenario")
    p.add_argument("--config", required=True, help="scenario YAML or bundled scenario name")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: the config's output_dir)")

    p = sub.add_parser("inject", help="apply an FDI attack to a frame CSV")
    p.add_argument("--frame", required=True, help="frame CSV (time,<sensor ids>)")
    p.add_argument("--config", help="take the attack from this scenario's 'attack' section")
    p.add_argument("--attack-type", choices=("poisoning", "dos", "step", "ramp", "rtw"))
    p.add_argument("--targets", nargs="+")
    p.add_argument("--t1", type=float)
    p.add_argument("--t2", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--mu-c", type=float)
    p.add_argument("--sigma-c", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--channel", choices=CHANNELS, default=Channel.VOLTAGE_ANGLE.value)
    p.add_argument("--sample-period", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="score a frame CSV")
    p.add_argument("--frame", required=True)
    p.add_argument("--channel", choices=CHANNELS, default=Channel.VOLTAGE_ANGLE.value)
    p.add_argument("--sample-period", type=float)
    _add_window_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="simulate, inject and detect end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--channel", choices=CHANNELS)
    _add_window_flags(p)
    p.add_argument("--out")

    p = sub.add_parser("report", help="summarize argmin sensors and margins per window")
    p.add_argument("--summary", required=True, help="summary.json from detect or run")
    p.add_argument("--against", help="second summary.json; reports argmin agreement")
    p.add_argument("--truth", help="ground_truth.csv; reports hits on attacked sensors")
    return parser


def _cmd_simulate(args):
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    frames = GridSimulator(cfg.network).simulate(
        cfg.events, cfg.duration, cfg.sample_period, cfg.noise_std, seed=cfg.seed,
        attack=cfg.attack, closed_loop=cfg.closed_loop,
    )
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for channel, frame in frames.items():
        name = f"clean_{channel.value}.csv"
        frame.to_csv(out / name)
        files.append(name)
    write_manifest(out, files, cfg, command="simulate")
    print(f"wrote {len(files)} frames to {out}")


def _attack_from_args(args):
    item = {}
    if args.config:
        cfg = load_config(args.config)
        if cfg.attack is None:
            raise ConfigError(f"{args.config}: scenario has no attack section")
        spec = cfg.attack
        item = {"attack_type": spec.attack_type, "targets": spec.targets, "t1": spec.t1,
                "t2": spec.t2, "c": spec.c, "mu_c": spec.mu_c, "sigma_c": spec.sigma_c,
                "sigma_scale": spec.sigma_scale, "seed": spec.seed}
    flags = {"attack_type": args.attack_type, "targets": args.targets, "t1": args.t1,
             "t2": args.t2, "c": args.c, "mu_c": args.mu_c, "sigma_c": args.sigma_c,
             "seed": args.seed}
    item.update({k: v for k, v in flags.items() if v is not None})
    for key in ("attack_type", "targets", "t1", "t2"):
        if key not in item:
            raise ConfigError(f"--{key.replace('_', '-')}: required without --config")
    try:
        return AttackSpec(channel=Channel(args.channel), **item)
    except AttackError as exc:
        raise ConfigError(str(exc)) from None


def _cmd_inject(args):
    spec = _attack_from_args(args)
    frame = ingest_csv(args.frame, args.sample_period, Channel(args.channel))
    try:
        result = inject(frame, spec)
    except AttackError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = f"attacked_{frame.channel.value}.csv"
    result.frame.to_csv(out / name)
    write_ground_truth(result.ground_truth, out / "ground_truth.csv")
    write_manifest(out, [name, "ground_truth.csv"], None, command="inject")
    print(f"wrote {out / name}")


def _window_from_args(args):
    params = {key: getattr(args, attr) for attr, key in _WINDOW_FLAGS.items()
              if getattr(args, attr, None) is not None}
    try:
        return WindowConfig(**params)
    except ValueError as exc:
        raise ConfigError(f"window: {exc}") from None


def _cmd_detect(args):
    cfg = _window_from_args(args)
    frame = ingest_csv(args.frame, args.sample_period, Channel(args.channel))
    if frame.n_samples < cfg.learning_len + cfg.prediction_len:
        raise ConfigError(
            f"--prediction-len: {cfg.prediction_len} steps exceed the "
            f"{frame.n_samples - cfg.learning_len} samples left after the learning window"
        )
    series = run_stream(frame, cfg, frame.channel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series.write_csv(out / "scores.csv", out / "distances.csv")
    series.write_summary(out / "summary.json")
    write_manifest(out, ["scores.csv", "distances.csv", "summary.json"], None, command="detect")
    print(f"scored {series.n_windows} windows x {len(series.sensor_ids)} sensors -> {out}")


def _cmd_run(args):
    cfg = load_config(args.config, _scenario_overrides(args))
    result = execute(cfg)
    out = Path(args.out or cfg.output_dir)
    files = write_result(result, out)
    print(f"{cfg.name}: {result.scores.n_windows} windows, {len(files)} files -> {out}")


def _read_truth(path):
    with open(path) as fh:
        next(fh)
        return {s: flag.strip() == "true" for s, flag in (line.split(",") for line in fh)}


def _cmd_report(args):
    with open(args.summary) as fh:
        summary = json.load(fh)
    windows = summary["windows"]
    truth = _read_truth(args.truth) if args.truth else None
    print(f"{'window_time':>11}  {'argmin':<12} {'min_score':>10} {'margin':>10}")
    for w in windows:
        if w["flagged"]:
            print(f"{w['window_time']:11.2f}  {'(flagged)':<12}")
            continue
        mark = " *" if truth and truth.get(w["argmin_sensor"]) else ""
        print(f"{w['window_time']:11.2f}  {w['argmin_sensor']:<12} "
              f"{w['min_score']:10.4g} {w['margin']:10.4g}{mark}")
    ids = [w["argmin_sensor"] for w in windows if not w["flagged"]]
    if ids:
        values, counts = np.unique(ids, return_counts=True)
        top = int(np.argmax(counts))
        print(f"most frequent argmin: {values[top]} ({counts[top]}/{len(windows)} windows)")
    if truth:
        hits = sum(bool(truth.get(s)) for s in ids)
        print(f"argmin on an attacked sensor: {hits}/{len(windows)} windows")
    if args.against:
        with open(args.against) as fh:
            other = json.load(fh)["windows"]
        if len(other) != len(windows):
            raise ConfigError(f"--against: {len(other)} windows vs {len(windows)}")
        same = sum(a["argmin_sensor"] == b["argmin_sensor"] for a, b in zip(windows, other))
        print(f"argmin agreement: {same}/{len(windows)} windows ({same / len(windows):.1%})")


COMMANDS = {
    "simulate": _cmd_simulate,
    "inject": _cmd_inject,
    "detect": _cmd_detect,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FrameFormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
