"""Sensor time-series container and its CSV form.

A :class:`TimeSeriesFrame` holds one measurement channel for ``p`` sensors
over ``m`` uniformly spaced samples.  Values are stored sensors x time;
the CSV layout is time-major (one row per sample) with a ``time`` column.
"""

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np


class Channel(str, enum.Enum):
    VOLTAGE_ANGLE = "voltage_angle"
    VOLTAGE_MAGNITUDE = "voltage_magnitude"
    FREQUENCY = "frequency"
    FREQUENCY_DEVIATION = "frequency_deviation"

    def __str__(self):
        return self.value


class FrameFormatError(ValueError):
    """A CSV file or array does not describe a valid frame."""


def sample_times(n_samples, sample_period):
    """Timestamps ``k * T`` for ``k = 0..n_samples-1``."""
    return np.arange(n_samples, dtype=np.float64) * float(sample_period)


@dataclass(frozen=True)
class TimeSeriesFrame:
    sensor_ids: tuple
    channel: Channel
    times: np.ndarray
    values: np.ndarray
    sample_period: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "sensor_ids", tuple(str(s) for s in self.sensor_ids))
        object.__setattr__(self, "channel", Channel(self.channel))
        times = np.array(self.times, dtype=np.float64)
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise FrameFormatError("values must be a 2-d (sensors x time) array")
        if values.shape[0] != len(self.sensor_ids):
            raise FrameFormatError(
                f"{values.shape[0]} value rows for {len(self.sensor_ids)} sensor ids"
            )
        if times.ndim != 1 or values.shape[1] != times.size:
            raise FrameFormatError(
                f"{values.shape[1]} value columns for {times.size} timestamps"
            )
        if len(set(self.sensor_ids)) != len(self.sensor_ids):
            raise FrameFormatError("sensor ids must be unique")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise FrameFormatError("timestamps must be strictly increasing")
        period = self.sample_period
        if period is None:
            if times.size < 2:
                raise FrameFormatError("sample_period is required for a single sample")
            period = float(times[1] - times[0])
        _check_uniform(times, period)
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_period", float(period))

    @property
    def n_sensors(self):
        return self.values.shape[0]

    @property
    def n_samples(self):
        return self.values.shape[1]

    def row(self, sensor_id):
        return self.values[self.sensor_ids.index(sensor_id)]

    def with_values(self, values):
        return TimeSeriesFrame(self.sensor_ids, self.channel, self.times, values,
                               self.sample_period)

    def to_csv(self, path):
        write_frame_csv(self, path)


def _check_uniform(times, period, rtol=1e-6):
    if period <= 0:
        raise FrameFormatError(f"sample period must be positive, got {period}")
    if times.size < 2:
        return
    gaps = np.diff(times)
    bad = np.flatnonzero(np.abs(gaps - period) > rtol * period)
    if bad.size:
        k = int(bad[0])
        raise FrameFormatError(
            f"non-uniform timestamps: gap {gaps[k]!r} between samples {k} and {k + 1}"
            f" (expected {period!r})"
        )


def format_number(x):
    """17 significant digits, enough for an exact float64 round-trip."""
    return "%.17g" % x


def write_frame_csv(frame, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", *frame.sensor_ids])
        for k in range(frame.n_samples):
            writer.writerow([format_number(frame.times[k]),
                             *(format_number(v) for v in frame.values[:, k])])


def ingest_csv(path, sample_period=None, channel=Channel.VOLTAGE_ANGLE):
    """Read a frame from a ``time,<sensor_1>,...`` CSV file.

    Errors name the offending line (1-based, header is line 1) and column.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FrameFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "time":
        raise FrameFormatError(f"{path}: header must be 'time,<sensor_id>,...'")
    sensor_ids = header[1:]
    body = [r for r in rows[1:] if r]
    if not body:
        raise FrameFormatError(f"{path}: no data rows")
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise FrameFormatError(
                f"{path}: line {line} has {len(row)} fields, expected {len(header)}"
            )
        for j, cell in enumerate(row):
            if not cell.strip():
                raise FrameFormatError(
                    f"{path}: missing value at line {line}, column {header[j]!r}"
                )
            try:
                x = float(cell)
            except ValueError:
                raise FrameFormatError(
                    f"{path}: unparseable value {cell!r} at line {line}, column {header[j]!r}"
                ) from None
            if not math.isfinite(x):
                raise FrameFormatError(
                    f"{path}: non-finite value at line {line}, column {header[j]!r}"
                )
            data[i, j] = x
    times = data[:, 0]
    if sample_period is None:
        if times.size < 2:
            raise FrameFormatError(f"{path}: cannot infer sample period from one row")
        sample_period = float(times[1] - times[0])
    try:
        return TimeSeriesFrame(sensor_ids, channel, times, data[:, 1:].T, sample_period)
    except FrameFormatError as exc:
        raise FrameFormatError(f"{path}: {exc}") from None
