"""Scenario configs and the end-to-end simulate -> inject -> detect runner.

A scenario is one YAML file::

    name: step_attack
    network: default_network.yaml   # path (relative to the config), or an inline mapping
    duration: 45.0
    sample_period: 0.05
    seed: 1
    channel: voltage_angle
    closed_loop: true
    noise_std: {voltage_angle: 1.0e-4}
    events:
      - {bus: 17, start_time: 1.0, end_time: 5.0, delta_load: 0.2}
    attack: {type: step, targets: [bus30], t1: 20.0, t2: 40.0, c: 0.1}
    window: {learning_len: 240, prediction_len: 40, stride: 5}
    output_dir: out/step_attack

Bundled scenarios are addressed by bare name (``step_attack``,
``event_only``, ``poisoning``).
"""

import copy
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn
import yaml

from . import __version__
from .attack import AttackError, AttackSpec, inject
from .detector import WindowConfig, run_stream
from .frames import Channel
from .gridsim import (ConfigError, GridEvent, GridSimulator, NetworkModel,
                      SimulationDivergence, build_network, data_path)

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

BUNDLED = ("step_attack", "event_only", "poisoning")

_TOP_KEYS = {"name", "network", "duration", "sample_period", "seed", "channel", "closed_loop",
             "noise_std", "events", "attack", "window", "output_dir"}
_ATTACK_KEYS = {"type", "targets", "t1", "t2", "channel", "c", "mu_c", "sigma_c",
                "sigma_scale", "seed"}


@dataclass(frozen=True)
class ScenarioConfig:
    network: NetworkModel
    events: tuple = ()
    attack: AttackSpec = None
    window: WindowConfig = field(default_factory=WindowConfig)
    duration: float = 45.0
    sample_period: float = 0.05
    channel: Channel = Channel.VOLTAGE_ANGLE
    seed: int = 0
    noise_std: dict = field(default_factory=dict)
    closed_loop: bool = True
    output_dir: str = "out"
    name: str = "scenario"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_samples(self):
        return int(round(self.duration / self.sample_period))

    def config_hash(self):
        """sha256 of the canonical JSON form of the parsed config."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def resolve_config_path(config):
    """Path of a scenario file; bare bundled names map to the shipped data."""
    path = Path(config)
    if path.exists():
        return path
    if path.parent == Path(".") and path.stem in BUNDLED:
        return Path(data_path(f"{path.stem}.yaml"))
    raise ConfigError(f"config: file {config!s} not found")


def _field(section, key, cast, default=None, required=False):
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"{key}: required field is missing")
        return default
    try:
        return cast(section[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {section[key]!r}") from None


def _load_network(spec, base_dir):
    if spec is None or spec == "default":
        return build_network()
    if isinstance(spec, dict):
        try:
            return build_network(spec.get("network", spec))
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from None
    candidates = [Path(base_dir) / spec, Path(spec), Path(data_path(str(spec)))]
    for path in candidates:
        if path.is_file():
            try:
                return build_network(path)
            except ValueError as exc:
                raise ConfigError(f"network: {exc}") from None
    raise ConfigError(f"network: file {spec!r} not found")


def _parse_events(items, net):
    events = []
    for n, item in enumerate(items or ()):
        where = f"events[{n}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{where}: must be a mapping")
        try:
            ev = GridEvent(
                bus=int(item["bus"]),
                start_time=float(item["start_time"]),
                delta_load=float(item["delta_load"]),
                end_time=float(item.get("end_time", np.inf)),
            )
        except KeyError as exc:
            raise ConfigError(f"{where}.{exc.args[0]}: required field is missing") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if not 1 <= ev.bus <= net.n_bus:
            raise ConfigError(f"{where}.bus: {ev.bus} is not a bus of the network")
        events.append(ev)
    return tuple(events)


def _parse_attack(item, channel):
    if item is None:
        return None
    if not isinstance(item, dict):
        raise ConfigError("attack: must be a mapping or null")
    unknown = set(item) - _ATTACK_KEYS
    if unknown:
        raise ConfigError(f"attack.{sorted(unknown)[0]}: unknown field")
    if "type" not in item:
        raise ConfigError("attack.type: required field is missing")
    if "targets" not in item:
        raise ConfigError("attack.targets: required field is missing")
    kwargs = {k: item[k] for k in ("c", "mu_c", "sigma_c", "sigma_scale", "seed") if k in item}
    try:
        return AttackSpec(
            attack_type=item["type"],
            targets=item["targets"],
            t1=float(item.get("t1", 20.0)),
            t2=float(item.get("t2", 40.0)),
            channel=Channel(item.get("channel", channel)),
            **kwargs,
        )
    except (AttackError, TypeError, ValueError) as exc:
        raise ConfigError(f"attack: {exc}") from None


def _parse_window(item, n_samples):
    item = dict(item or {})
    fields = WindowConfig.__dataclass_fields__
    unknown = set(item) - set(fields)
    if unknown:
        raise ConfigError(f"window.{sorted(unknown)[0]}: unknown field")
    try:
        cfg = WindowConfig(**item)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"window: {exc}") from None
    if cfg.learning_len >= n_samples:
        raise ConfigError(
            f"window.learning_len: {cfg.learning_len} steps leaves no data to predict "
            f"in a {n_samples}-sample run"
        )
    if cfg.learning_len + cfg.prediction_len > n_samples:
        raise ConfigError(
            f"window.prediction_len: {cfg.prediction_len} steps exceed the "
            f"{n_samples - cfg.learning_len} samples left after the learning window"
        )
    return cfg


def parse_config(raw, base_dir="."):
    """Validate a parsed scenario mapping; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    duration = _field(raw, "duration", float, 45.0)
    period = _field(raw, "sample_period", float, 0.05)
    if not duration > 0:
        raise ConfigError(f"duration: must be positive, got {duration}")
    if not period > 0:
        raise ConfigError(f"sample_period: must be positive, got {period}")
    try:
        channel = Channel(raw.get("channel", Channel.VOLTAGE_ANGLE.value))
    except ValueError:
        raise ConfigError(f"channel: unknown channel {raw.get('channel')!r}") from None
    noise = raw.get("noise_std") or {}
    if not isinstance(noise, dict):
        raise ConfigError("noise_std: must map channel names to standard deviations")
    noise_std = {}
    for key, value in noise.items():
        try:
            noise_std[Channel(key)] = float(value)
        except ValueError:
            raise ConfigError(f"noise_std.{key}: invalid channel or value") from None
        if noise_std[Channel(key)] < 0:
            raise ConfigError(f"noise_std.{key}: must be non-negative")
    net = _load_network(raw.get("network"), base_dir)
    n_samples = int(round(duration / period))
    events = _parse_events(raw.get("events"), net)
    for n, ev in enumerate(events):
        if ev.start_time > duration:
            raise ConfigError(f"events[{n}].start_time: {ev.start_time} is after the run ends")
    attack = _parse_attack(raw.get("attack"), channel)
    if attack is not None:
        unknown = [s for s in attack.targets if s not in net.bus_ids]
        if unknown:
            raise ConfigError(f"attack.targets: unknown sensor ids {unknown}")
    return ScenarioConfig(
        network=net,
        events=events,
        attack=attack,
        window=_parse_window(raw.get("window"), n_samples),
        duration=duration,
        sample_period=period,
        channel=channel,
        seed=_field(raw, "seed", int, 0),
        noise_std=noise_std,
        closed_loop=bool(raw.get("closed_loop", True)),
        output_dir=str(raw.get("output_dir", "out")),
        name=str(raw.get("name", "scenario")),
        raw=copy.deepcopy(raw),
    )


def load_config(config, overrides=None):
    """Read and validate a scenario file, applying ``overrides`` first.

    ``overrides`` maps dotted keys (``"window.tau"``, ``"seed"``) to values.
    """
    path = resolve_config_path(config)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[leaf] = value
    return parse_config(raw, base_dir=path.parent)


@dataclass
class ScenarioResult:
    clean: dict
    attacked: dict
    ground_truth: dict
    scores: object
    config: ScenarioConfig


def simulate_scenario(cfg):
    """Clean frames, attacked frames and per-sensor attack labels."""
    sim = GridSimulator(cfg.network)
    clean = sim.simulate(cfg.events, cfg.duration, cfg.sample_period, cfg.noise_std,
                         seed=cfg.seed, attack=cfg.attack, closed_loop=cfg.closed_loop)
    attacked = dict(clean)
    truth = {s: False for s in cfg.network.bus_ids}
    if cfg.attack is not None:
        result = inject(clean[cfg.attack.channel], cfg.attack)
        attacked[cfg.attack.channel] = result.frame
        truth = result.ground_truth
    return clean, attacked, truth


def execute(cfg):
    clean, attacked, truth = simulate_scenario(cfg)
    scores = run_stream(attacked, cfg.window, cfg.channel)
    return ScenarioResult(clean, attacked, truth, scores, cfg)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_ground_truth(truth, path):
    with open(path, "w") as fh:
        fh.write("sensor_id,attacked\n")
        for sensor, flag in truth.items():
            fh.write(f"{sensor},{str(bool(flag)).lower()}\n")


def versions():
    return {
        "kmsig": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }


def write_manifest(out_dir, files, cfg, command="run"):
    manifest = {
        "command": command,
        "scenario": cfg.name if cfg is not None else None,
        "config_sha256": cfg.config_hash() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "versions": versions(),
        "files": {name: _sha256(Path(out_dir) / name) for name in sorted(files)},
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_result(result, out_dir):
    """Write every artifact of a run plus the manifest; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for channel, frame in result.clean.items():
        name = f"clean_{channel.value}.csv"
        frame.to_csv(out / name)
        files.append(name)
    if result.config.attack is not None:
        channel = result.config.attack.channel
        name = f"attacked_{channel.value}.csv"
        result.attacked[channel].to_csv(out / name)
        files.append(name)
    write_ground_truth(result.ground_truth, out / "ground_truth.csv")
    result.scores.write_csv(out / "scores.csv", out / "distances.csv")
    result.scores.write_summary(out / "summary.json")
    files += ["ground_truth.csv", "scores.csv", "distances.csv", "summary.json"]
    write_manifest(out, files, result.config)
    return files


def run_scenario(config_path, out_dir=None, overrides=None, stream=None):
    """Run a scenario end to end; returns a process exit status.

    Config problems return :data:`EXIT_CONFIG`; simulation or numerical
    failures return :data:`EXIT_RUNTIME`.
    """
    stream = sys.stderr if stream is None else stream
    try:
        cfg = load_config(config_path, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG
    try:
        result = execute(cfg)
        write_result(result, out_dir or cfg.output_dir)
    except (SimulationDivergence, FloatingPointError, np.linalg.LinAlgError, OSError) as exc:
        print(f"runtime error: {exc}", file=stream)
        return EXIT_RUNTIME
    return EXIT_OK
