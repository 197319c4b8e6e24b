"""Stock CSV ingestion, windowing and labels.

Input files have the header ``date,open,high,low,close,nav`` with ISO dates.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstantChannelError, IngestionError, InsufficientDataError

log = logging.getLogger(__name__)

#: Channel order used everywhere (windows, targets, metric columns).
CHANNELS = ("close", "open", "high", "low", "nav")
CSV_HEADER = ("date", "open", "high", "low", "close", "nav")


@dataclass
class StockSeries:
    symbol: str
    dates: list[dt.date]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    nav: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.dates)

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def matrix(self) -> np.ndarray:
        """(days, 5) in :data:`CHANNELS` order."""
        return np.stack([self.channel(c) for c in CHANNELS], axis=1)


def ingest_csv(path: str | Path, window: int | None = None, symbol: str | None = None) -> StockSeries:
    """Read and validate one symbol's daily prices.

    Rows with a missing or non-positive field are dropped and counted.
    Malformed rows, bad headers and duplicate dates raise :class:`IngestionError`.
    """
    path = Path(path)
    symbol = symbol or path.stem
    rows: dict[dt.date, tuple[float, ...]] = {}
    dropped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file", line=1) from None
        cols = [h.strip().lower() for h in header]
        missing = [c for c in CSV_HEADER if c not in cols]
        if missing:
            raise IngestionError(f"header lacks columns {missing}", line=1)
        pos = {c: cols.index(c) for c in CSV_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(cols):
                raise IngestionError(f"expected {len(cols)} fields, got {len(row)}", line=lineno)
            try:
                day = dt.date.fromisoformat(row[pos["date"]].strip())
            except ValueError:
                raise IngestionError(f"unparseable date {row[pos['date']]!r}", line=lineno) from None
            if day in rows:
                raise IngestionError(f"duplicate date {day.isoformat()}", line=lineno)
            fields = [row[pos[c]].strip() for c in CSV_HEADER[1:]]
            if any(f == "" or f.lower() == "nan" for f in fields):
                dropped += 1
                log.warning("%s line %d: missing value, row dropped", symbol, lineno)
                rows[day] = None
                continue
            try:
                vals = tuple(float(f) for f in fields)
            except ValueError:
                raise IngestionError(f"non-numeric field in {fields}", line=lineno) from None
            if not all(math.isfinite(v) and v > 0 for v in vals):
                dropped += 1
                log.warning("%s line %d: non-positive value, row dropped", symbol, lineno)
                rows[day] = None
                continue
            rows[day] = vals
    days = sorted(d for d, v in rows.items() if v is not None)
    if dropped:
        log.info("%s: dropped %d rows", symbol, dropped)
    need = (window + 1) if window else 2
    if len(days) < need:
        raise InsufficientDataError(f"{symbol}: {len(days)} valid rows, need at least {need}")
    arr = np.array([rows[d] for d in days], dtype=np.float64)
    o, h, l, c, n = arr.T
    return StockSeries(symbol, days, o.copy(), h.copy(), l.copy(), c.copy(), n.copy(), dropped)


def write_csv(series: StockSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, d in enumerate(series.dates):
            w.writerow([d.isoformat()] + [repr(float(series.channel(c)[i])) for c in CSV_HEADER[1:]])


def make_labels(series_or_closes) -> np.ndarray:
    """1 (buy) where the next close is strictly higher, else 0 (sell); length n-1."""
    closes = series_or_closes.close if isinstance(series_or_closes, StockSeries) else np.asarray(series_or_closes, dtype=np.float64)
    if closes.size < 2:
        raise ValueError("need at least two closes to form labels")
    return (closes[1:] > closes[:-1]).astype(np.int64)


@dataclass
class SampleSet:
    """Sliding windows over one symbol.

    ``windows[c]`` is a ``(K, 1, W)`` tensor of z-scored channel ``c``.
    Window ``k`` covers days ``k .. k+W-1``; its target is day ``k+W``.
    Normalization uses days ``0 .. stats_end`` only, which ends at the last
    training target.
    """

    symbol: str
    windows: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    split: int
    mean: np.ndarray
    std: np.ndarray
    stats_end: int
    end_dates: list[dt.date]
    end_closes: np.ndarray
    window: int

    @property
    def num_windows(self) -> int:
        return self.windows.shape[1]

    @property
    def targets_normalized(self) -> np.ndarray:
        return (self.targets - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.std + self.mean

    def train_windows(self) -> list[np.ndarray]:
        return [w[: self.split] for w in self.windows]

    def test_windows(self) -> list[np.ndarray]:
        return [w[self.split :] for w in self.windows]

    def all_windows(self) -> list[np.ndarray]:
        return list(self.windows)

    @property
    def train_slice(self) -> slice:
        return slice(0, self.split)

    @property
    def test_slice(self) -> slice:
        return slice(self.split, self.num_windows)


def split_index(num_windows: int, split_fraction: float) -> int:
    # tolerance guards against 0.9 * 90 = 81.00000000000001-style rounding
    return int(math.floor(num_windows * split_fraction + 1e-9))


def windowize(series: StockSeries, window: int, split_fraction: float = 0.9) -> SampleSet:
    if window < 2:
        raise ValueError("window must be at least 2")
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie in (0, 1)")
    data = series.matrix()
    n = data.shape[0]
    K = n - window
    if K < 1:
        raise InsufficientDataError(f"{series.symbol}: {n} days cannot fill a window of {window} plus a target")
    split = split_index(K, split_fraction)
    if split < 1 or split >= K:
        raise InsufficientDataError(f"{series.symbol}: split {split_fraction} leaves an empty partition of {K} windows")
    stats_end = split - 1 + window
    train_days = data[: stats_end + 1]
    mean = train_days.mean(axis=0)
    std = train_days.std(axis=0)
    for c, s in zip(CHANNELS, std):
        if s == 0:
            raise ConstantChannelError(f"{series.symbol}: channel {c!r} is constant over the training period")
    z = (data - mean) / std
    idx = np.arange(K)[:, None] + np.arange(window)[None, :]
    windows = np.stack([z[:, c][idx][:, None, :] for c in range(len(CHANNELS))])
    targets = data[window:]
    labels = make_labels(series.close)[window - 1 :]
    end_days = np.arange(K) + window - 1
    return SampleSet(
        symbol=series.symbol,
        windows=windows,
        targets=targets,
        labels=labels,
        split=split,
        mean=mean,
        std=std,
        stats_end=stats_end,
        end_dates=[series.dates[d] for d in end_days],
        end_closes=series.close[end_days],
        window=window,
    )


def synthetic_stock(
    n_days: int = 400,
    seed: int = 0,
    symbol: str = "SYN",
    start: dt.date = dt.date(2014, 1, 1),
) -> StockSeries:
    """Prices driven by a planted stationary AR(2) signal plus small noise.

    The next-day close is (up to noise) a linear function of the last two
    closes, so a linear forecaster on raw windows is near-optimal.
    """
    rng = np.random.default_rng(seed)
    x = np.zeros(n_days + 50)
    for t in range(2, x.size):
        x[t] = 1.2 * x[t - 1] - 0.4 * x[t - 2] + rng.normal()
    x = x[50:]
    close = 100.0 + 4.0 * x
    open_ = np.concatenate([[close[0]], close[:-1]]) + 0.3 * rng.normal(size=n_days)
    spread = np.abs(rng.normal(size=(2, n_days))) * 0.5
    high = np.maximum(open_, close) + spread[0]
    low = np.minimum(open_, close) - spread[1]
    nav = close * (1.0 + 0.002 * rng.normal(size=n_days))
    dates = []
    day = start
    while len(dates) < n_days:
        if day.weekday() < 5:
            dates.append(day)
        day += dt.timedelta(days=1)
    return StockSeries(symbol, dates, open_, high, low, close, nav)


def planted_windows(channels: int = 5, window: int = 20, samples: int = 200, seed: int = 0) -> list[np.ndarray]:
    """Multi-channel windows sharing a latent random-walk factor plus per-channel oscillations."""
    rng = np.random.default_rng(seed)
    n = samples + window
    t = np.arange(n)
    latent = np.cumsum(rng.normal(size=n)) * 0.3
    out = []
    for c in range(channels):
        s = np.sin(2 * np.pi * t / (8 + 3 * c) + rng.uniform(0, 2 * np.pi)) + 0.5 * latent + 0.1 * rng.normal(size=n)
        s = (s - s.mean()) / s.std()
        idx = np.arange(samples)[:, None] + np.arange(window)[None, :]
        out.append(s[idx][:, None, :])
    return out
