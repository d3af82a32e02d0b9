"""Spiral time series and the natural cubic spline control paths built from them."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

__all__ = [
    "TimeSeries",
    "SpiralDataset",
    "SplinePath",
    "PathDomainWarning",
    "generate_spirals",
    "fit_natural_cubic",
    "stack_paths",
    "eval_path",
    "eval_derivative",
    "write_dataset_csv",
    "read_dataset_csv",
]

CSV_HEADER = ["sample_id", "label", "t", "x", "y"]


class PathDomainWarning(UserWarning):
    """A path was evaluated outside its knot range and the time was clamped."""


@dataclass
class TimeSeries:
    """Observations of a q-channel path; channel 0 is time itself."""

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.timestamps.shape[0] < 2:
            raise ValueError("a time series needs at least two timestamps")
        if self.values.shape[0] != self.timestamps.shape[0]:
            raise ValueError("one row of values per timestamp is required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")


@dataclass
class SpiralDataset:
    series: list[TimeSeries]
    labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.series)

    def values(self) -> np.ndarray:
        """All samples as an array of shape (n, T, 3)."""
        return np.stack([s.values for s in self.series])


def generate_spirals(n: int = 128, steps: int = 100, sigma: float = 0.02, seed: int = 0) -> SpiralDataset:
    """Two-class spirals: label 0 turns counterclockwise, label 1 clockwise.

    Angle runs over two full turns while the radius grows from 0.2 to 1.0;
    labels alternate so every even-sized dataset is balanced.
    """
    if n < 2 or n % 2:
        raise ValueError(f"sample count must be even and >= 2, got {n}")
    if steps < 2:
        raise ValueError(f"need at least 2 timesteps, got {steps}")
    if sigma < 0:
        raise ValueError(f"noise std must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    frac = np.arange(steps) / (steps - 1)
    angle = 4.0 * np.pi * frac
    radius = 0.2 + 0.8 * frac
    labels = np.arange(n) % 2
    series = []
    for label in labels:
        x = radius * np.cos(angle)
        y = radius * np.sin(angle) * (1.0 if label == 0 else -1.0)
        if sigma > 0:
            x = x + sigma * rng.standard_normal(steps)
            y = y + sigma * rng.standard_normal(steps)
        series.append(TimeSeries(frac.copy(), np.stack([frac, x, y], axis=1)))
    return SpiralDataset(series, labels.astype(np.int64), seed)


@dataclass
class SplinePath:
    """Piecewise cubic ``a + b u + c u^2 + d u^3`` with ``u = t - knots[i]``.

    The coefficient arrays have shape ``(..., intervals, q)``; leading axes
    index a batch of paths sharing the same knots.
    """

    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @property
    def t0(self) -> float:
        return float(self.knots[0])

    @property
    def t1(self) -> float:
        return float(self.knots[-1])

    def _locate(self, t: float) -> tuple[int, float]:
        if t < self.knots[0] or t > self.knots[-1]:
            warnings.warn(
                f"t={t!r} outside [{self.t0}, {self.t1}]; clamped", PathDomainWarning, stacklevel=3
            )
            t = min(max(t, self.t0), self.t1)
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        i = min(max(i, 0), len(self.knots) - 2)
        return i, t - self.knots[i]

    def evaluate(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        a, b, c, d = (arr[..., i, :] for arr in (self.a, self.b, self.c, self.d))
        return a + u * (b + u * (c + u * d))

    def derivative(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        b, c, d = (arr[..., i, :] for arr in (self.b, self.c, self.d))
        return b + u * (2.0 * c + 3.0 * u * d)

    def second_derivative(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        return 2.0 * self.c[..., i, :] + 6.0 * u * self.d[..., i, :]


def fit_natural_cubic(series: TimeSeries | Sequence[TimeSeries]) -> SplinePath:
    """Natural cubic spline through every observation, one per channel.

    A sequence of series sharing timestamps is fitted in one solve and gives a
    batched path.
    """
    if isinstance(series, TimeSeries):
        ts, Y = series.timestamps, series.values
    else:
        ts = series[0].timestamps
        for s in series[1:]:
            if not np.array_equal(s.timestamps, ts):
                raise ValueError("batched spline fit requires shared timestamps")
        Y = np.stack([s.values for s in series], axis=0)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    h = np.diff(ts)
    T = ts.shape[0]
    # y has shape (T, ...) so the knot axis leads for the banded solve
    y = np.moveaxis(Y, -2, 0)
    M = np.zeros_like(y)
    if T > 2:
        ab = np.zeros((3, T - 2))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        slopes = np.diff(y, axis=0) / h.reshape((-1,) + (1,) * (y.ndim - 1))
        rhs = 6.0 * (slopes[1:] - slopes[:-1])
        flat = rhs.reshape(T - 2, -1)
        M[1:-1] = solve_banded((1, 1), ab, flat).reshape(rhs.shape)
    hh = h.reshape((-1,) + (1,) * (y.ndim - 1))
    a = y[:-1]
    b = (y[1:] - y[:-1]) / hh - hh * (2.0 * M[:-1] + M[1:]) / 6.0
    c = M[:-1] / 2.0
    d = (M[1:] - M[:-1]) / (6.0 * hh)
    coeffs = [np.ascontiguousarray(np.moveaxis(arr, 0, -2)) for arr in (a, b, c, d)]
    return SplinePath(ts.copy(), *coeffs)


def stack_paths(paths: Sequence[SplinePath]) -> SplinePath:
    """Combine single paths with identical knots into one batched path."""
    knots = paths[0].knots
    for p in paths[1:]:
        if not np.array_equal(p.knots, knots):
            raise ValueError("cannot stack paths with different knots")
    return SplinePath(knots, *(np.stack([getattr(p, k) for p in paths]) for k in "abcd"))


def eval_path(path: SplinePath, t: float) -> np.ndarray:
    return path.evaluate(t)


def eval_derivative(path: SplinePath, t: float) -> np.ndarray:
    return path.derivative(t)


def write_dataset_csv(dataset: SpiralDataset, out: str | Path) -> None:
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for sid, (s, label) in enumerate(zip(dataset.series, dataset.labels)):
            for row in s.values:
                w.writerow([sid, int(label)] + ["%.17g" % v for v in row])


def read_dataset_csv(path: str | Path, seed: int = -1) -> SpiralDataset:
    rows: dict[int, list] = {}
    labels: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}, expected {CSV_HEADER}")
        for rec in reader:
            sid = int(rec["sample_id"])
            rows.setdefault(sid, []).append([float(rec["t"]), float(rec["x"]), float(rec["y"])])
            labels[sid] = int(rec["label"])
    ids = sorted(rows)
    series = [TimeSeries(np.array(rows[i])[:, 0], np.array(rows[i])) for i in ids]
    return SpiralDataset(series, np.array([labels[i] for i in ids], dtype=np.int64), seed)
