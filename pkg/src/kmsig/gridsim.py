"""Desk-scale multi-machine grid simulator with PMU-like outputs.

Generators follow the classical swing model

    M_i theta_i'' = P_m,i - P_e,i - D_i theta_i'

on the Kron-reduced generator network, with ``P_e,i`` the sine-coupled
power flow plus the share of every load bus demand routed to generator
``i``.  Load buses are algebraic: their angles and frequencies follow the
generator states through the (linear) network reduction.  Secondary
control is an integral loop on the mean bus frequency, split across
generators by participation factors.

Buses are numbered 1..n with generators first; sensor ids are ``bus<k>``.
"""

import logging
import math
from importlib import resources
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.optimize import root
from scipy.sparse.csgraph import connected_components

from .attack import ClosedLoopTap
from .frames import Channel, TimeSeriesFrame, sample_times

logger = logging.getLogger(__name__)


def data_path(name):
    """Path of a file shipped in the package data directory."""
    return str(resources.files("kmsig") / "data" / name)


class ConfigError(ValueError):
    """Invalid network or scenario configuration."""


class SimulationDivergence(RuntimeError):
    def __init__(self, time, value):
        super().__init__(f"integration diverged at t={time:.4f} s (|theta'| = {value:.4g} rad/s)")
        self.time = time
        self.value = value


@dataclass(frozen=True)
class NetworkModel:
    n_gen: int
    n_load: int
    susceptance: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    agc_gain: float
    agc_participation: np.ndarray
    base_load: np.ndarray
    dispatch: np.ndarray = None
    f_nominal: float = 60.0
    voltage_droop: float = 0.02
    omega_bound: float = 20.0
    name: str = "network"

    def __post_init__(self):
        n = self.n_gen + self.n_load
        arrays = {
            "susceptance": (np.array(self.susceptance, dtype=float), (n, n)),
            "inertia": (np.array(self.inertia, dtype=float), (self.n_gen,)),
            "damping": (np.array(self.damping, dtype=float), (self.n_gen,)),
            "agc_participation": (np.array(self.agc_participation, dtype=float), (self.n_gen,)),
            "base_load": (np.array(self.base_load, dtype=float), (n,)),
        }
        dispatch = self.dispatch if self.dispatch is not None else self.agc_participation
        arrays["dispatch"] = (np.array(dispatch, dtype=float), (self.n_gen,))
        for name, (arr, shape) in arrays.items():
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name}: non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._validate()

    def _validate(self):
        if self.n_gen < 1:
            raise ConfigError("n_gen: at least one generator is required")
        if self.n_load < 0:
            raise ConfigError("n_load: must be non-negative")
        B = self.susceptance
        if not np.array_equal(B, B.T):
            raise ConfigError("susceptance: matrix must be symmetric")
        if np.any(np.diag(B) != 0):
            raise ConfigError("susceptance: diagonal must be zero")
        if np.any(B < 0):
            raise ConfigError("susceptance: line susceptances must be non-negative")
        if np.any(self.inertia <= 0):
            raise ConfigError("inertia: all entries must be > 0")
        if np.any(self.damping < 0):
            raise ConfigError("damping: all entries must be >= 0")
        for name in ("agc_participation", "dispatch"):
            w = getattr(self, name)
            if np.any(w < 0):
                raise ConfigError(f"{name}: entries must be non-negative")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{name}: entries must sum to 1 (sum = {w.sum()!r})")
        if self.agc_gain < 0:
            raise ConfigError("agc_gain: must be >= 0")
        n_comp, _ = connected_components(B > 0, directed=False)
        if n_comp != 1:
            raise ConfigError(f"susceptance: network has {n_comp} connected components, expected 1")

    @property
    def n_bus(self):
        return self.n_gen + self.n_load

    @property
    def bus_ids(self):
        return tuple(f"bus{k}" for k in range(1, self.n_bus + 1))

    @property
    def generator_buses(self):
        return tuple(range(1, self.n_gen + 1))

    @property
    def load_buses(self):
        return tuple(range(self.n_gen + 1, self.n_bus + 1))


@dataclass(frozen=True)
class GridEvent:
    """Step change ``delta_load`` (p.u.) in the demand at ``bus`` over [start, end)."""

    bus: int
    start_time: float
    delta_load: float
    end_time: float = math.inf

    def __post_init__(self):
        if not self.start_time < self.end_time:
            raise ConfigError(
                f"event at bus {self.bus}: start_time {self.start_time} must precede "
                f"end_time {self.end_time}"
            )

    def active(self, t):
        return self.start_time <= t < self.end_time


def _parse_lines(lines, n):
    B = np.zeros((n, n))
    for entry in lines:
        if len(entry) != 3:
            raise ConfigError(f"lines: entry {entry!r} must be [from_bus, to_bus, susceptance]")
        i, j, b = int(entry[0]), int(entry[1]), float(entry[2])
        if not (1 <= i <= n and 1 <= j <= n) or i == j:
            raise ConfigError(f"lines: invalid bus pair ({i}, {j})")
        B[i - 1, j - 1] += b
        B[j - 1, i - 1] += b
    return B


def network_from_dict(cfg):
    """Build a :class:`NetworkModel` from the parsed network schema.

    Generators occupy buses ``1..n_gen``.  ``base_load`` may be a full
    per-bus list or a ``{bus: load}`` mapping.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("network config must be a mapping")
    try:
        gens = cfg["generators"]
        n_load = int(cfg.get("n_load", 0))
        n_gen = len(gens)
        n = n_gen + n_load
        B = _parse_lines(cfg["lines"], n)
        load_cfg = cfg.get("base_load", {})
        if isinstance(load_cfg, dict):
            base_load = np.zeros(n)
            for bus, value in load_cfg.items():
                bus = int(bus)
                if not 1 <= bus <= n:
                    raise ConfigError(f"base_load: unknown bus {bus}")
                base_load[bus - 1] = float(value)
        else:
            base_load = np.asarray(load_cfg, dtype=float)
        participation = [float(g.get("participation", 1.0 / n_gen)) for g in gens]
        return NetworkModel(
            n_gen=n_gen,
            n_load=n_load,
            susceptance=B,
            inertia=[float(g["inertia"]) for g in gens],
            damping=[float(g["damping"]) for g in gens],
            agc_gain=float(cfg.get("agc_gain", 0.0)),
            agc_participation=participation,
            base_load=base_load,
            dispatch=[float(g.get("dispatch", w)) for g, w in zip(gens, participation)],
            f_nominal=float(cfg.get("f_nominal", 60.0)),
            voltage_droop=float(cfg.get("voltage_droop", 0.02)),
            omega_bound=float(cfg.get("omega_bound", 20.0)),
            name=str(cfg.get("name", "network")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing field {exc.args[0]!r} in network config") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"network config: {exc}") from None


def build_network(config=None):
    """Load a network from a YAML path, a parsed mapping, or the shipped default."""
    if config is None:
        config = data_path("default_network.yaml")
    if isinstance(config, dict):
        return network_from_dict(config)
    try:
        with open(config) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{config}: parse error: {exc}") from None
    if isinstance(cfg, dict) and "network" in cfg:
        cfg = cfg["network"]
    return network_from_dict(cfg)


def network_to_dict(net):
    """Inverse of :func:`network_from_dict` (lines listed once, i < j)."""
    n = net.n_bus
    iu, ju = np.nonzero(np.triu(net.susceptance))
    return {
        "name": net.name,
        "f_nominal": net.f_nominal,
        "agc_gain": net.agc_gain,
        "voltage_droop": net.voltage_droop,
        "omega_bound": net.omega_bound,
        "n_load": net.n_load,
        "generators": [
            {"inertia": float(net.inertia[i]), "damping": float(net.damping[i]),
             "participation": float(net.agc_participation[i]),
             "dispatch": float(net.dispatch[i])}
            for i in range(net.n_gen)
        ],
        "lines": [[int(i) + 1, int(j) + 1, float(net.susceptance[i, j])] for i, j in zip(iu, ju)],
        "base_load": {int(k) + 1: float(net.base_load[k]) for k in range(n) if net.base_load[k]},
    }


def synthetic_network(n_gen=16, n_load=52, seed=68):
    """Random connected meshed network with plausible per-unit parameters.

    Used to generate the shipped default; all values are surrogates.
    """
    rng = np.random.default_rng(seed)
    n = n_gen + n_load
    B = np.zeros((n, n))
    loads = np.arange(n_gen, n)

    def connect(i, j, b):
        B[i, j] = B[j, i] = b

    # meshed transmission ring with chords among load buses
    for k in range(n_load):
        connect(loads[k], loads[(k + 1) % n_load], rng.uniform(15.0, 30.0))
    for _ in range(n_load // 3):
        i, j = rng.choice(n_load, size=2, replace=False)
        if abs(i - j) > 1:
            connect(loads[i], loads[j], rng.uniform(8.0, 20.0))
    # each generator steps up onto one load bus, spread around the ring
    hosts = np.linspace(0, n_load, n_gen, endpoint=False).astype(int)
    for g, h in enumerate(hosts):
        connect(g, loads[h], rng.uniform(25.0, 40.0))

    base_load = np.zeros(n)
    base_load[loads] = rng.uniform(0.3, 1.2, size=n_load)
    inertia = rng.uniform(0.15, 0.4, size=n_gen)
    # light damping (2-4 % modal damping) so load-change transients ring for several seconds
    damping = rng.uniform(0.06, 0.12, size=n_gen)
    capacity = rng.uniform(0.5, 1.5, size=n_gen)
    participation = capacity / capacity.sum()
    return NetworkModel(
        n_gen=n_gen, n_load=n_load, susceptance=B, inertia=inertia, damping=damping,
        agc_gain=0.3, agc_participation=participation, base_load=base_load,
        dispatch=participation, name=f"synthetic-{n_gen}gen-{n}bus",
    )


@dataclass(frozen=True)
class _Reduction:
    """Kron reduction of the network onto the generator buses."""

    reduced: np.ndarray        # generator-to-generator susceptance, zero diagonal
    load_share: np.ndarray     # n_gen x n_load: fraction of each load served by each gen
    angle_map: np.ndarray      # n_load x n_gen: load-bus angles from generator angles
    load_angle: np.ndarray     # n_load x n_load: load-bus angle shift per unit demand

    @classmethod
    def of(cls, net):
        B = net.susceptance
        L = np.diag(B.sum(axis=1)) - B
        g = slice(0, net.n_gen)
        l = slice(net.n_gen, net.n_bus)
        if net.n_load == 0:
            red = L.copy()
            return cls(-red + np.diag(np.diag(red)), np.zeros((net.n_gen, 0)),
                       np.zeros((0, net.n_gen)), np.zeros((0, 0)))
        L_ll_inv = np.linalg.inv(L[l, l])
        red = L[g, g] - L[g, l] @ L_ll_inv @ L[l, g]
        reduced = -red
        np.fill_diagonal(reduced, 0.0)
        reduced = 0.5 * (reduced + reduced.T)
        return cls(reduced, -L[g, l] @ L_ll_inv, -L_ll_inv @ L[l, g], L_ll_inv)


def _electrical_power(theta, reduced):
    diff = theta[:, None] - theta[None, :]
    return np.sum(reduced * np.sin(diff), axis=1)


class GridSimulator:
    """Immutable simulator bound to one network; safe to share across runs."""

    def __init__(self, net):
        self.net = net
        self._red = _Reduction.of(net)
        n_bus = net.n_bus
        # mean bus frequency as a linear functional of generator speeds
        self._freq_weights = (np.ones(net.n_gen) + self._red.angle_map.sum(axis=0)) / n_bus
        self._coi_weights = net.inertia / net.inertia.sum()

    def generator_demand(self, load):
        """Effective demand on each generator for a per-bus load vector."""
        n_gen = self.net.n_gen
        return load[:n_gen] + self._red.load_share @ load[n_gen:]

    def load_at(self, t, events):
        load = self.net.base_load.copy()
        for ev in events:
            if ev.active(t):
                load[ev.bus - 1] += ev.delta_load
        return load

    def equilibrium(self, load=None):
        """Generator angles (first pinned at 0) balancing the scheduled dispatch."""
        net = self.net
        load = net.base_load if load is None else load
        demand = self.generator_demand(load)
        p_m = net.dispatch * load.sum()
        mismatch = p_m - demand
        red = self._red.reduced
        lap = np.diag(red.sum(axis=1)) - red
        guess = np.zeros(net.n_gen)
        if net.n_gen > 1:
            guess[1:] = np.linalg.solve(lap[1:, 1:], mismatch[1:])

        def residual(x):
            theta = np.concatenate([[0.0], x])
            return (_electrical_power(theta, red) - mismatch)[1:]

        if net.n_gen == 1:
            return np.zeros(1), p_m
        sol = root(residual, guess[1:], method="hybr", tol=1e-13)
        if not sol.success or np.max(np.abs(residual(sol.x))) > 1e-9:
            raise ConfigError(f"no steady-state operating point: {sol.message}")
        return np.concatenate([[0.0], sol.x]), p_m

    def bus_angles(self, theta, load):
        n_gen = self.net.n_gen
        theta_l = self._red.angle_map @ theta - self._red.load_angle @ load[n_gen:]
        return np.concatenate([theta, theta_l])

    def bus_frequencies(self, omega):
        return np.concatenate([omega, self._red.angle_map @ omega])

    def _rhs(self, state, p_m0, demand, agc_bias):
        net = self.net
        n = net.n_gen
        theta, omega, z = state[:n], state[n:2 * n], state[2 * n]
        p_m = p_m0 + net.agc_participation * z
        p_e = _electrical_power(theta, self._red.reduced) + demand
        domega = (p_m - p_e - net.damping * omega) / net.inertia
        dz = -net.agc_gain * (self._freq_weights @ omega + agc_bias)
        return np.concatenate([omega, domega, [dz]])

    def measure(self, state, load, channel):
        net = self.net
        n = net.n_gen
        channel = Channel(channel)
        if channel is Channel.VOLTAGE_ANGLE:
            # referenced to the centre-of-inertia angle, as PMU angles need a reference
            theta = state[:n]
            return self.bus_angles(theta, load) - self._coi_weights @ theta
        omega = self.bus_frequencies(state[n:2 * n])
        if channel is Channel.FREQUENCY:
            return net.f_nominal + omega / (2 * np.pi)
        if channel is Channel.FREQUENCY_DEVIATION:
            return omega / (2 * np.pi * net.f_nominal)
        return 1.0 - net.voltage_droop * (load - net.base_load)

    def _agc_error(self, channel, delta, prev_delta, period):
        """Shift of the AGC frequency signal (rad/s) caused by measurement offsets."""
        n_bus = self.net.n_bus
        if channel is Channel.VOLTAGE_ANGLE:
            # PMU frequency is the rate of change of the reported angle
            return (delta - prev_delta).sum() / period / n_bus
        if channel is Channel.FREQUENCY:
            return 2 * np.pi * delta.sum() / n_bus
        if channel is Channel.FREQUENCY_DEVIATION:
            return 2 * np.pi * self.net.f_nominal * delta.sum() / n_bus
        return 0.0

    def simulate(self, events=(), duration=45.0, sample_period=0.05, noise_std=None,
                 seed=0, substeps=5, initial_state=None, attack=None, closed_loop=False):
        """Integrate the network and sample every channel.

        Parameters
        ----------
        events : sequence of GridEvent
        duration, sample_period : float
            Output has ``round(duration / sample_period)`` samples at ``k * T``.
        noise_std : dict, optional
            Additive Gaussian measurement noise per channel.
        seed : int
            Seeds the measurement noise.
        substeps : int
            Fixed RK4 steps per sample period.
        initial_state : ndarray, optional
            ``[theta, omega, agc]``; defaults to the pre-event equilibrium.
        attack : AttackSpec, optional
            With ``closed_loop=True`` the attacked channel feeds the AGC.

        Returns
        -------
        dict mapping Channel to TimeSeriesFrame (clean of any attack).
        """
        net = self.net
        if duration <= 0 or sample_period <= 0:
            raise ConfigError("duration and sample_period must be positive")
        n_samples = int(round(duration / sample_period))
        times = sample_times(n_samples, sample_period)
        for ev in events:
            if not 1 <= ev.bus <= net.n_bus:
                raise ConfigError(f"event bus {ev.bus} is not a bus of the network")
            if not 0 <= ev.start_time <= duration:
                raise ConfigError(f"event at bus {ev.bus} starts outside [0, {duration}]")

        noise_std = {Channel(k): float(v) for k, v in (noise_std or {}).items()}
        rng = np.random.default_rng(seed)
        noise = {c: rng.standard_normal((net.n_bus, n_samples)) * noise_std.get(c, 0.0)
                 for c in Channel}

        theta0, p_m0 = self.equilibrium()
        n = net.n_gen
        if initial_state is None:
            state = np.concatenate([theta0, np.zeros(n), [0.0]])
        else:
            state = np.array(initial_state, dtype=float)
            if state.shape != (2 * n + 1,):
                raise ConfigError(f"initial_state must have length {2 * n + 1}")

        tap = None
        if attack is not None and closed_loop:
            tap = ClosedLoopTap(attack, net.bus_ids, times)

        out = {c: np.empty((net.n_bus, n_samples)) for c in Channel}
        h = sample_period / substeps
        agc_bias = 0.0
        prev_delta = None
        for k in range(n_samples):
            t = times[k]
            load = self.load_at(t, events)
            for c in Channel:
                out[c][:, k] = self.measure(state, load, c) + noise[c][:, k]
            if tap is not None:
                delta = tap.offsets(k, out[tap.channel])
                if prev_delta is None:
                    prev_delta = np.zeros_like(delta)
                agc_bias = self._agc_error(tap.channel, delta, prev_delta, sample_period)
                prev_delta = delta
            if k == n_samples - 1:
                break
            demand = self.generator_demand(load)
            for _ in range(substeps):
                k1 = self._rhs(state, p_m0, demand, agc_bias)
                k2 = self._rhs(state + 0.5 * h * k1, p_m0, demand, agc_bias)
                k3 = self._rhs(state + 0.5 * h * k2, p_m0, demand, agc_bias)
                k4 = self._rhs(state + h * k3, p_m0, demand, agc_bias)
                state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            peak = np.max(np.abs(state[n:2 * n]))
            if not np.isfinite(peak) or peak > net.omega_bound:
                raise SimulationDivergence(times[k + 1], peak)

        return {c: TimeSeriesFrame(net.bus_ids, c, times, out[c], sample_period)
                for c in Channel}


def simulate(net, events=(), duration=45.0, sample_period=0.05, noise_std=None, seed=0,
             **kwargs):
    return GridSimulator(net).simulate(events, duration, sample_period, noise_std, seed,
                                       **kwargs)
