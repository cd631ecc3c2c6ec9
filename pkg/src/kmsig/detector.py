"""Moving-window Koopman-mode Delta-scores.

For each window the pipeline fits a predictor on the learning span,
forecasts the prediction span, decomposes the forecast error into Koopman
modes, turns the per-sensor modal magnitudes into probability mass
functions and scores every sensor by its divergence from the sensor
average.  Low scores flag sensors whose error dynamics stand apart.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import (check_nonnegative, check_pmf, check_positive_float,
                          check_positive_int, check_snapshots)
from .frames import Channel, TimeSeriesFrame, format_number, sample_times
from .koopman import KoopmanDMD, normalize_backend

logger = logging.getLogger(__name__)

DIVERGENCES = ("kl", "js")


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window settings; defaults are 12 s / 2 s / 0.25 s at T = 0.05 s."""

    learning_len: int = 240
    prediction_len: int = 40
    stride: int = 5
    backend: str = "dmd"
    divergence: str = "kl"
    tau: float = 5.0
    epsilon: float = 1e-12
    rank_energy: float = 0.999
    max_rank: int = 30
    delay: int = 10
    zero_rtol: float = 1e-10
    coherent: bool = False

    def __post_init__(self):
        check_positive_int(self.learning_len, "learning_len", minimum=2)
        check_positive_int(self.prediction_len, "prediction_len", minimum=2)
        check_positive_int(self.stride, "stride")
        object.__setattr__(self, "backend", normalize_backend(self.backend))
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        check_positive_float(self.tau, "tau")
        check_positive_float(self.epsilon, "epsilon")
        check_positive_float(self.zero_rtol, "zero_rtol", strict=False)

    def n_windows(self, n_samples):
        span = n_samples - self.learning_len - self.prediction_len
        if span < 0:
            return 0
        return span // self.stride + 1

    def anchors(self, n_samples):
        return [self.learning_len + w * self.stride for w in range(self.n_windows(n_samples))]


@dataclass(frozen=True)
class NormalizedKM:
    rows: np.ndarray
    centroid: np.ndarray


@dataclass
class DeltaScoreSeries:
    window_times: np.ndarray
    scores: np.ndarray
    distances: np.ndarray
    sensor_ids: tuple
    config: WindowConfig = field(default_factory=WindowConfig)

    @property
    def n_windows(self):
        return self.scores.shape[0]

    def argmin_sensors(self):
        """Index of the lowest-scoring sensor per window (-1 for flagged windows)."""
        out = np.full(self.n_windows, -1)
        ok = np.all(np.isfinite(self.scores), axis=1)
        out[ok] = np.argmin(self.scores[ok], axis=1)
        return out

    def margins(self):
        """Gap between the lowest and the second-lowest score per window."""
        ordered = np.sort(self.scores, axis=1)
        return ordered[:, 1] - ordered[:, 0]

    def summary(self):
        argmin = self.argmin_sensors()
        margins = self.margins()
        windows = []
        for w in range(self.n_windows):
            flagged = argmin[w] < 0
            windows.append({
                "window_time": float(self.window_times[w]),
                "argmin_sensor": None if flagged else self.sensor_ids[argmin[w]],
                "min_score": None if flagged else float(self.scores[w, argmin[w]]),
                "margin": None if flagged else float(margins[w]),
                "flagged": bool(flagged),
            })
        return {
            "n_windows": self.n_windows,
            "sensor_ids": list(self.sensor_ids),
            "config": {k: getattr(self.config, k) for k in self.config.__dataclass_fields__},
            "windows": windows,
        }

    def write_csv(self, scores_path, distances_path=None):
        for path, table in ((scores_path, self.scores), (distances_path, self.distances)):
            if path is None:
                continue
            with open(path, "w") as fh:
                fh.write(",".join(["window_time", *self.sensor_ids]) + "\n")
                for t, row in zip(self.window_times, table):
                    fh.write(",".join([format_number(t), *map(format_number, row)]) + "\n")

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def error_sequence(observed, predicted):
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if observed.shape != predicted.shape:
        raise ValueError(f"shape mismatch: observed {observed.shape} vs predicted {predicted.shape}")
    return observed - predicted


def normalize_two_step(V):
    """Column-normalize, then row-normalize a sensors x time magnitude matrix.

    Zero columns become uniform over sensors and zero rows uniform over
    time, so every row of the result is a probability mass function.
    """
    V = check_nonnegative(V)
    p, w = V.shape
    col = V.sum(axis=0)
    zero_col = col == 0
    U = np.empty_like(V)
    U[:, ~zero_col] = V[:, ~zero_col] / col[~zero_col]
    U[:, zero_col] = 1.0 / p
    row = U.sum(axis=1)
    zero_row = row == 0
    U[~zero_row] /= row[~zero_row, None]
    U[zero_row] = 1.0 / w
    return NormalizedKM(rows=U, centroid=U.mean(axis=0))


def _kl(a, b, weight=None):
    """``sum(weight * log(a / b))`` over ``a > 0``; weight defaults to ``a``."""
    weight = a if weight is None else weight
    mask = a > 0
    return float(np.sum(weight[mask] * np.log(a[mask] / b[mask])))


def divergence(pmf_a, pmf_b, kind="kl", epsilon=1e-12):
    """KL(a || b) with an epsilon-smoothed ``b``, or the Jensen-Shannon divergence.

    Natural log; ``0 * log(0 / x)`` counts as 0.
    """
    a = check_pmf(pmf_a, "pmf_a")
    b = check_pmf(pmf_b, "pmf_b")
    if a.shape != b.shape:
        raise ValueError(f"pmfs differ in length: {a.size} vs {b.size}")
    if kind == "kl":
        b_smooth = (b + epsilon) / (1.0 + b.size * epsilon)
        return max(_kl(a, b_smooth), 0.0)
    if kind == "js":
        # ratios against the unhalved sum avoid underflow of (a + b) / 2
        total = a + b
        return max(0.5 * _kl(2 * a, total, a) + 0.5 * _kl(2 * b, total, b), 0.0)
    raise ValueError(f"divergence kind must be one of {DIVERGENCES}, got {kind!r}")


def delta_scores(nkm, kind="kl", tau=5.0, epsilon=1e-12):
    """Distances of every row to the centroid and their ``exp(-tau * d)`` scores."""
    tau = check_positive_float(tau, "tau")
    distances = np.array([divergence(row, nkm.centroid, kind, epsilon) for row in nkm.rows])
    return distances, np.exp(-tau * distances)


def score_window(learn, observed, cfg):
    """Delta-scores for one window; ``learn`` and ``observed`` are sensors x time."""
    params = dict(backend=cfg.backend, rank_energy=cfg.rank_energy,
                  max_rank=cfg.max_rank, delay=cfg.delay)
    predictor = KoopmanDMD(**params).fit(learn.T)
    predicted = predictor.forecast(observed.shape[1]).T
    err = error_sequence(observed, predicted)
    # errors at roundoff level relative to the signal carry no dynamics
    scale = np.linalg.norm(observed, 2)
    err_model = KoopmanDMD(svd_atol=cfg.zero_rtol * scale, **params)
    if cfg.backend == "hankel" and err.shape[1] < cfg.delay + 2:
        err_model.set_params(delay=max(1, err.shape[1] - 2))
    err_model.fit(err.T)
    if err_model.zero_dynamics_:
        p, w = err.shape
        nkm = NormalizedKM(rows=np.full((p, w), 1.0 / w), centroid=np.full(w, 1.0 / w))
    else:
        V = err_model.mode_amplitude_matrix(observed.shape[1], coherent=cfg.coherent).T
        nkm = normalize_two_step(V)
    return delta_scores(nkm, cfg.divergence, cfg.tau, cfg.epsilon)


def _stack(frames, channel):
    if channel is None or isinstance(channel, (list, tuple)):
        channels = [Channel(c) for c in (channel or sorted(frames, key=str))]
        parts = [frames[c] for c in channels]
        values = np.vstack([f.values for f in parts])
        ids = tuple(f"{c.value}:{s}" for c, f in zip(channels, parts) for s in f.sensor_ids)
        return values, ids, parts[0].times, parts[0].sample_period
    frame = frames[Channel(channel)]
    return frame.values, frame.sensor_ids, frame.times, frame.sample_period


def run_stream(frames, cfg=None, channel=Channel.VOLTAGE_ANGLE):
    """Score every window of a frame (or a channel -> frame mapping).

    ``channel`` selects one channel; a list of channels (or None for all)
    stacks them into one sensor set.  Windows whose fit fails are kept as
    NaN rows.
    """
    cfg = cfg or WindowConfig()
    if not isinstance(frames, dict):
        frames = {frames.channel: frames}
    values, sensor_ids, times, period = _stack(frames, channel)
    p, m = values.shape
    if m < cfg.learning_len + cfg.prediction_len:
        raise ValueError(
            f"frame has {m} samples; learning_len + prediction_len = "
            f"{cfg.learning_len + cfg.prediction_len}"
        )
    anchors = cfg.anchors(m)
    scores = np.full((len(anchors), p), np.nan)
    distances = np.full((len(anchors), p), np.nan)
    for w, s in enumerate(anchors):
        learn = values[:, s - cfg.learning_len:s]
        observed = values[:, s:s + cfg.prediction_len]
        try:
            distances[w], scores[w] = score_window(learn, observed, cfg)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            logger.warning("window at t=%.3f s flagged: %s", times[0] + s * period, exc)
    window_times = times[0] + np.asarray(anchors, dtype=np.float64) * period
    return DeltaScoreSeries(window_times, scores, distances, tuple(sensor_ids), cfg)


class KMDeltaScorer(TransformerMixin, BaseEstimator):
    """Transformer mapping a sensor stream to per-window Delta-scores.

    ``transform`` takes ``X`` of shape ``(n_steps, n_sensors)`` and returns
    scores of shape ``(n_windows, n_sensors)``.  The scorer is stateless;
    ``fit`` only validates and records the sensor count.
    """

    def __init__(self, learning_len=240, prediction_len=40, stride=5, backend="dmd",
                 divergence="kl", tau=5.0, epsilon=1e-12, rank_energy=0.999,
                 max_rank=30, delay=10, zero_rtol=1e-10, coherent=False,
                 sample_period=0.05):
        self.learning_len = learning_len
        self.prediction_len = prediction_len
        self.stride = stride
        self.backend = backend
        self.divergence = divergence
        self.tau = tau
        self.epsilon = epsilon
        self.rank_energy = rank_energy
        self.max_rank = max_rank
        self.delay = delay
        self.zero_rtol = zero_rtol
        self.coherent = coherent
        self.sample_period = sample_period

    def window_config(self):
        params = self.get_params()
        params.pop("sample_period")
        return WindowConfig(**params)

    def fit(self, X, y=None):
        cfg = self.window_config()
        X = check_snapshots(X, min_steps=cfg.learning_len + cfg.prediction_len)
        self.n_features_in_ = X.shape[1]
        return self

    def score_series(self, X, sensor_ids=None):
        cfg = self.window_config()
        X = check_snapshots(X, min_steps=cfg.learning_len + cfg.prediction_len)
        if sensor_ids is None:
            sensor_ids = [f"s{i}" for i in range(X.shape[1])]
        frame = TimeSeriesFrame(sensor_ids, Channel.VOLTAGE_ANGLE,
                                sample_times(X.shape[0], self.sample_period), X.T,
                                self.sample_period)
        return run_stream(frame, cfg, frame.channel)

    def transform(self, X):
        return self.score_series(X).scores
