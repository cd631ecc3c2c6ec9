"""False-data-injection attacks on sensor channels.

Every attack rewrites the measurement ``phi`` of the targeted sensors over
``[t1, t2]`` as ``(1 + alpha(t)) * phi(t) + beta(t)``:

============  ====================  ===========================
type          alpha(t)              beta(t)
============  ====================  ===========================
poisoning     0                     ~ N(mu_c, sigma_c**2)
dos           0                     phi(t1) - phi(t)
step          c                     0
ramp          c * (t - t1)          0
rtw           c * (t - t1)          c * phi(t1) * (t - t1)
============  ====================  ===========================
"""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .frames import Channel

ATTACK_TYPES = ("poisoning", "dos", "step", "ramp", "rtw")
DEFAULT_C = {"step": 0.1, "ramp": 0.005, "rtw": 0.005}


class AttackError(ValueError):
    pass


class AttackWindowWarning(UserWarning):
    """The attack interval does not overlap the frame."""


@dataclass(frozen=True)
class AttackSpec:
    """One FDI attack.

    ``c`` defaults per type (step 0.1, ramp/rtw 0.005 per second).  When
    ``sigma_c`` is None the poisoning spread is resolved from data as
    ``sigma_scale`` times the target's pre-attack standard deviation.
    """

    attack_type: str
    targets: tuple
    t1: float
    t2: float
    channel: Channel = Channel.VOLTAGE_ANGLE
    c: float = None
    mu_c: float = 0.0
    sigma_c: float = None
    sigma_scale: float = 5.0
    seed: int = 0
    closed_loop: bool = True

    def __post_init__(self):
        if self.attack_type not in ATTACK_TYPES:
            raise AttackError(f"attack_type must be one of {ATTACK_TYPES}, got {self.attack_type!r}")
        targets = (self.targets,) if isinstance(self.targets, str) else tuple(self.targets)
        if not targets:
            raise AttackError("targets must be non-empty")
        object.__setattr__(self, "targets", tuple(str(t) for t in targets))
        object.__setattr__(self, "channel", Channel(self.channel))
        if not self.t1 < self.t2:
            raise AttackError(f"t1 ({self.t1}) must precede t2 ({self.t2})")
        if self.c is None:
            object.__setattr__(self, "c", DEFAULT_C.get(self.attack_type, 0.0))
        if self.sigma_c is not None and self.sigma_c < 0:
            raise AttackError(f"sigma_c must be >= 0, got {self.sigma_c}")

    def poisoning_draws(self, n_samples):
        """Standard-normal draws, one row per target, for the attacked samples."""
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((len(self.targets), n_samples))

    def resolve_sigma(self, history):
        """Poisoning spread for one target given its clean pre-attack samples."""
        if self.sigma_c is not None:
            return float(self.sigma_c)
        history = np.asarray(history, dtype=float)
        if history.size < 2:
            raise AttackError("cannot size poisoning noise without pre-attack samples")
        return self.sigma_scale * float(np.std(history))


def _terms(spec, dt, phi_t1, phi_t, draws=None, sigma=None):
    """Vectorised (alpha, beta); ``dt`` is t - t1."""
    kind = spec.attack_type
    zero = np.zeros(np.broadcast(dt, phi_t).shape)
    if kind == "poisoning":
        if sigma is None:
            sigma = spec.sigma_c
        if sigma is None:
            raise AttackError("poisoning sigma_c is unresolved; pass sigma or fit on data")
        if draws is None:
            draws = spec.poisoning_draws(zero.size).reshape(-1)[:zero.size].reshape(zero.shape)
        return zero, spec.mu_c + sigma * draws
    if kind == "dos":
        return zero, phi_t1 - phi_t + zero
    if kind == "step":
        return zero + spec.c, zero
    if kind == "ramp":
        return spec.c * dt + zero, zero
    return spec.c * dt + zero, (spec.c * phi_t1) * dt + zero


def attack_variables(spec, t, phi_t1, phi_t, draw=None, sigma=None):
    """Scaling and additive terms ``(alpha, beta)`` at time ``t``.

    ``draw`` is the standard-normal sample used by poisoning attacks
    (drawn from ``spec.seed`` when omitted); ``sigma`` overrides
    ``spec.sigma_c``.
    """
    if not spec.t1 <= t <= spec.t2:
        raise AttackError(f"t={t} lies outside the attack window [{spec.t1}, {spec.t2}]")
    alpha, beta = _terms(spec, np.float64(t) - spec.t1, np.float64(phi_t1), np.float64(phi_t),
                         None if draw is None else np.float64(draw), sigma)
    return float(alpha), float(beta)


def apply_terms(phi, alpha, beta):
    return (1.0 + alpha) * phi + beta


def attacked_values(spec, phi, alpha, beta, phi_t1):
    """``(1 + alpha) * phi + beta``, with DoS rows holding ``phi(t1)`` exactly.

    For DoS the two agree in exact arithmetic, but ``phi + (phi_t1 - phi)``
    can miss ``phi_t1`` by a few ulps in floating point.
    """
    if spec.attack_type == "dos":
        return np.broadcast_to(np.float64(phi_t1), np.shape(phi)).copy()
    return apply_terms(phi, alpha, beta)


@dataclass(frozen=True)
class AttackedFrame:
    frame: object
    ground_truth: dict
    spec: AttackSpec

    def labels(self):
        return np.array([self.ground_truth[s] for s in self.frame.sensor_ids])


def attack_window(spec, times):
    """Boolean mask of samples inside ``[t1, t2]``."""
    return (times >= spec.t1) & (times <= spec.t2)


def _check_targets(frame, spec):
    if spec.channel is not frame.channel:
        raise AttackError(f"attack targets {spec.channel} but the frame holds {frame.channel}")
    missing = [s for s in spec.targets if s not in frame.sensor_ids]
    if missing:
        raise AttackError(f"unknown sensor ids: {missing}")
    return [frame.sensor_ids.index(s) for s in spec.targets]


def resolve_sigmas(spec, frame):
    rows = _check_targets(frame, spec)
    if spec.attack_type != "poisoning":
        return None
    pre = frame.times < spec.t1
    return np.array([spec.resolve_sigma(frame.values[r, pre]) for r in rows])


def inject(frame, spec, sigmas=None):
    """Apply ``spec`` to a clean frame; returns an :class:`AttackedFrame`."""
    rows = _check_targets(frame, spec)
    window = attack_window(spec, frame.times)
    values = np.array(frame.values)
    truth = {s: False for s in frame.sensor_ids}
    idx = np.flatnonzero(window)
    if idx.size == 0:
        warnings.warn(
            f"attack window [{spec.t1}, {spec.t2}] does not overlap frame times "
            f"[{frame.times[0]}, {frame.times[-1]}]; nothing injected",
            AttackWindowWarning, stacklevel=2,
        )
        return AttackedFrame(frame, truth, spec)
    if sigmas is None:
        sigmas = resolve_sigmas(spec, frame)
    dt = frame.times[idx] - spec.t1
    draws = spec.poisoning_draws(idx.size) if spec.attack_type == "poisoning" else None
    for n, r in enumerate(rows):
        phi = frame.values[r, idx]
        phi_t1 = frame.values[r, idx[0]]
        alpha, beta = _terms(spec, dt, phi_t1, phi,
                             None if draws is None else draws[n],
                             None if sigmas is None else sigmas[n])
        values[r, idx] = attacked_values(spec, phi, alpha, beta, phi_t1)
        truth[frame.sensor_ids[r]] = True
    return AttackedFrame(frame.with_values(values), truth, spec)


class ClosedLoopTap:
    """Per-sample attack offsets for a simulator feeding controllers.

    ``offsets(k, measured)`` returns ``attacked - clean`` for the targets at
    sample ``k`` given the measured history (sensors x samples, filled up
    to column ``k``).  The arithmetic matches :func:`inject` exactly.
    """

    def __init__(self, spec, sensor_ids, times):
        self.spec = spec
        self.channel = spec.channel
        self.rows = [list(sensor_ids).index(s) for s in spec.targets]
        self.times = times
        self.idx = np.flatnonzero(attack_window(spec, times))
        self.draws = (spec.poisoning_draws(self.idx.size)
                      if spec.attack_type == "poisoning" else None)
        self.sigmas = None

    def offsets(self, k, measured):
        out = np.zeros(len(self.rows))
        if self.idx.size == 0 or not self.idx[0] <= k <= self.idx[-1]:
            return out
        j = k - self.idx[0]
        k1 = self.idx[0]
        if self.spec.attack_type == "poisoning" and self.sigmas is None:
            pre = self.times < self.spec.t1
            self.sigmas = np.array([self.spec.resolve_sigma(measured[r, :k1][pre[:k1]])
                                    for r in self.rows])
        dt = self.times[k] - self.spec.t1
        for n, r in enumerate(self.rows):
            phi = measured[r, k]
            alpha, beta = _terms(self.spec, dt, measured[r, k1], phi,
                                 None if self.draws is None else self.draws[n, j],
                                 None if self.sigmas is None else self.sigmas[n])
            out[n] = attacked_values(self.spec, phi, alpha, beta, measured[r, k1]) - phi
        return out


class AttackInjector(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`inject` operating on TimeSeriesFrames.

    ``fit`` resolves the poisoning spread from the frame's pre-attack
    samples; ``transform`` returns the attacked frame.
    """

    def __init__(self, attack_type="step", targets=(), t1=20.0, t2=40.0,
                 channel="voltage_angle", c=None, mu_c=0.0, sigma_c=None,
                 sigma_scale=5.0, seed=0):
        self.attack_type = attack_type
        self.targets = targets
        self.t1 = t1
        self.t2 = t2
        self.channel = channel
        self.c = c
        self.mu_c = mu_c
        self.sigma_c = sigma_c
        self.sigma_scale = sigma_scale
        self.seed = seed

    def spec(self):
        return AttackSpec(**self.get_params())

    def fit(self, frame, y=None):
        spec = self.spec()
        self.spec_ = spec
        self.sigmas_ = resolve_sigmas(spec, frame)
        return self

    def transform(self, frame):
        if not hasattr(self, "spec_"):
            raise NotFittedError("AttackInjector is not fitted yet; call fit first")
        return inject(frame, self.spec_, self.sigmas_).frame
