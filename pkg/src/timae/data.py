"""Everything upstream of the model: ingestion, synthesis, splits, windows."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParameterError, ParseError

AUGMENTATIONS = ("none", "scaling", "shifting", "jittering")


@dataclass
class TimeSeries:
    values: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    timestamps: list[str] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise FormatError(f"time series needs shape [T >= 1, m >= 1], got {v.shape}")
        if np.isnan(v).any():
            raise FormatError("time series contains NaN")
        self.values = v
        if not self.channel_names:
            self.channel_names = [f"c{i}" for i in range(v.shape[1])]
        if len(self.channel_names) != v.shape[1]:
            raise FormatError(f"{len(self.channel_names)} channel names for {v.shape[1]} channels")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> TimeSeries:
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return TimeSeries(self.values[start:stop], list(self.channel_names), ts)


# --------------------------------------------------------------------- CSV
def load_csv(path: str | Path, timestamp_col: bool = False, forward_fill: bool = False) -> TimeSeries:
    """Read a header-first CSV; every non-timestamp column becomes a channel.

    Empty or ``nan`` cells are rejected unless ``forward_fill`` is set, in
    which case they copy the previous row's value.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise FormatError(f"{path}: header row but no data")
    first = 1 if timestamp_col else 0
    names = [h.strip() for h in header[first:]]
    if not names:
        raise FormatError(f"{path}: no value columns")

    values = np.empty((len(body), len(names)))
    stamps = [] if timestamp_col else None
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} (line {r + 1}) has {len(row)} fields, header has {len(header)}")
        if stamps is not None:
            stamps.append(row[0])
        for c, cell in enumerate(row[first:]):
            cell = cell.strip()
            if cell == "" or cell.lower() == "nan":
                values[r - 1, c] = np.nan
                continue
            try:
                values[r - 1, c] = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {r} (line {r + 1}), column {names[c]!r}: cannot parse {cell!r} as a number"
                ) from None

    missing = np.isnan(values)
    if missing.any():
        if not forward_fill:
            r, c = np.argwhere(missing)[0]
            raise ParseError(f"{path}: row {r + 1}, column {names[c]!r} is missing (pass forward_fill to fill)")
        for r in range(values.shape[0]):
            gap = missing[r]
            if gap.any():
                if r == 0:
                    raise ParseError(f"{path}: row 1 has missing values and nothing to forward-fill from")
                values[r, gap] = values[r - 1, gap]
    return TimeSeries(values, names, stamps)


def save_csv(path: str | Path, values: np.ndarray, names: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names))
        for row in np.asarray(values):
            w.writerow([repr(float(v)) for v in np.atleast_1d(row)])


# --------------------------------------------------------------- synthetic
@dataclass
class SyntheticSpec:
    """y(t) = cos(a t) + cos(a t / 2) + cos(a t / 4) + b t + noise, t on [t_start, t_end]."""

    alpha: float = 300.0
    beta: float = 3.0
    noise_sigma: float = 0.1
    length: int = 2000
    t_start: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.length < 1:
            raise ConfigError("length must be >= 1")

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.length)

    def dominant_period_steps(self) -> float:
        """Period of the leading cos(alpha t) term measured in samples."""
        dt = (self.t_end - self.t_start) / max(self.length - 1, 1)
        return 2.0 * math.pi / self.alpha / dt

    def slowest_period_steps(self) -> float:
        """Period of cos(alpha t / 4) measured in samples."""
        dt = (self.t_end - self.t_start) / max(self.length - 1, 1)
        return 8.0 * math.pi / self.alpha / dt


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> TimeSeries:
    t = spec.grid()
    a = spec.alpha
    y = np.cos(a * t) + np.cos(a / 2 * t) + np.cos(a / 4 * t) + spec.beta * t
    if spec.noise_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, spec.noise_sigma, size=t.shape)
    return TimeSeries(y[:, None], ["y"])


# ------------------------------------------------------------------ splits
@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        r = (self.train, self.val, self.test)
        if any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {r}")

    def boundaries(self, length: int) -> tuple[int, int]:
        # epsilon guards cumulative sums like 0.7 + 0.1 = 0.7999999999999999
        b1 = math.floor(self.train * length + 1e-9)
        b2 = math.floor((self.train + self.val) * length + 1e-9)
        return b1, b2


ETT_SPLIT = SplitSpec(0.6, 0.2, 0.2)
DEFAULT_SPLIT = SplitSpec(0.7, 0.1, 0.2)


def split(ts: TimeSeries, spec: SplitSpec = DEFAULT_SPLIT, min_len: int | None = None) -> tuple[TimeSeries | None, ...]:
    """Contiguous chronological train/val/test blocks.

    With ``min_len`` set, every non-empty-ratio block must hold at least
    that many steps. Empty blocks come back as None.
    """
    b1, b2 = spec.boundaries(ts.length)
    bounds = [(0, b1), (b1, b2), (b2, ts.length)]
    out = []
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        n = hi - lo
        if min_len is not None and n < min_len and (n > 0 or name == "train"):
            raise ConfigError(f"{name} split has {n} steps, fewer than the required {min_len}")
        out.append(ts.slice(lo, hi) if n > 0 else None)
    return tuple(out)


# ----------------------------------------------------------------- windows
@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


def count_windows(length: int, window_len: int, stride: int = 1, horizon: int = 0) -> int:
    span = window_len + horizon
    return 0 if span > length else (length - span) // stride + 1


def make_windows(
    values: np.ndarray | TimeSeries,
    window_len: int,
    stride: int = 1,
    horizon: int | None = None,
    target_channels: Sequence[int] | None = None,
) -> WindowBatch:
    """Sliding windows over one split; supervised pairs when ``horizon`` is given."""
    v = values.values if isinstance(values, TimeSeries) else np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if window_len < 1 or stride < 1:
        raise ConfigError("window_len and stride must be >= 1")
    k = horizon or 0
    if horizon is not None and horizon < 1:
        raise ConfigError("horizon must be >= 1")
    n = count_windows(v.shape[0], window_len, stride, k)
    if n == 0:
        raise ConfigError(f"window {window_len} + horizon {k} exceeds split length {v.shape[0]}")
    starts = np.arange(n) * stride
    view = np.lib.stride_tricks.sliding_window_view(v, window_len + k, axis=0)  # [N, m, L+k]
    win = np.ascontiguousarray(np.transpose(view[starts], (0, 2, 1)))
    inputs = win[:, :window_len]
    targets = None
    if horizon is not None:
        targets = win[:, window_len:]
        if target_channels is not None:
            targets = targets[:, :, list(target_channels)]
    return WindowBatch(inputs, targets)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches over ``n`` items, shuffled when an rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


# ----------------------------------------------------------- normalisation
@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: np.ndarray | TimeSeries) -> Normalizer:
        v = train.values if isinstance(train, TimeSeries) else np.asarray(train, dtype=np.float64)
        mean = v.mean(axis=0)
        std = v.std(axis=0)
        flat = std <= 1e-12
        if flat.any():
            warnings.warn(f"channels {np.flatnonzero(flat).tolist()} are constant on the train split; passing them through unscaled", stacklevel=2)
            mean = np.where(flat, 0.0, mean)
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, n_channels: int) -> Normalizer:
        return cls(np.zeros(n_channels), np.ones(n_channels))

    def transform(self, v: np.ndarray, channels: Sequence[int] | None = None) -> np.ndarray:
        mean, std = self._sel(channels)
        return (np.asarray(v) - mean) / std

    def inverse(self, v: np.ndarray, channels: Sequence[int] | None = None) -> np.ndarray:
        mean, std = self._sel(channels)
        return np.asarray(v) * std + mean

    def _sel(self, channels):
        if channels is None:
            return self.mean, self.std
        idx = list(channels)
        return self.mean[idx], self.std[idx]


@dataclass
class PreparedData:
    """Normalised train/val/test arrays plus the fitted transform."""

    train: np.ndarray
    val: np.ndarray | None
    test: np.ndarray | None
    normalizer: Normalizer
    channel_names: list[str]


def prepare(ts: TimeSeries, spec: SplitSpec = DEFAULT_SPLIT, normalize: bool = True, min_len: int | None = None) -> PreparedData:
    train, val, test = split(ts, spec, min_len=min_len)
    norm = Normalizer.fit(train) if normalize else Normalizer.identity(ts.n_channels)

    def t(part):
        return None if part is None else norm.transform(part.values)

    return PreparedData(t(train), t(val), t(test), norm, list(ts.channel_names))


# ------------------------------------------------------------ augmentation
def augment(batch: np.ndarray, kind: str, rng: np.random.Generator, params: dict | None = None) -> np.ndarray:
    """Window-level augmentation of a [B, L, m] batch.

    scaling: multiply each window by s ~ U(scale_low, scale_high).
    shifting: add c * channel_std per window, c ~ U(-shift, shift).
    jittering: add N(0, (jitter * channel_std)^2) per element.
    """
    if kind not in AUGMENTATIONS:
        raise ParameterError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATIONS}")
    p = {"scale_low": 0.8, "scale_high": 1.2, "shift": 0.1, "jitter": 0.05}
    p.update(params or {})
    x = np.asarray(batch)
    if kind == "none":
        return x
    B, _, m = x.shape
    ch_std = x.reshape(-1, m).std(axis=0)
    if kind == "scaling":
        s = rng.uniform(p["scale_low"], p["scale_high"], size=(B, 1, 1))
        return x * s
    if kind == "shifting":
        c = rng.uniform(-p["shift"], p["shift"], size=(B, 1, m))
        return x + c * ch_std
    if p["jitter"] == 0:
        return x.copy()
    return x + rng.normal(0.0, 1.0, size=x.shape) * (p["jitter"] * ch_std)


def equidistant_subsample(ts: TimeSeries | np.ndarray, max_len: int = 1024):
    """Keep ``max_len`` equidistant samples (endpoints included) when the series is longer."""
    values = ts.values if isinstance(ts, TimeSeries) else np.asarray(ts)
    n = values.shape[0]
    if n <= max_len:
        return ts
    idx = np.floor(np.arange(max_len) * (n - 1) / (max_len - 1) + 0.5).astype(int)
    if isinstance(ts, TimeSeries):
        stamps = None if ts.timestamps is None else [ts.timestamps[i] for i in idx]
        return TimeSeries(values[idx], list(ts.channel_names), stamps)
    return values[idx]
