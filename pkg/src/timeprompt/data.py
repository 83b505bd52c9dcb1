"""Series ingestion, train-only scaling and chronological windowing.

Input files are delimiter-separated UTF-8 text with a header row; the first
column is an ISO-8601 timestamp and the remaining columns are numeric
variables. The normalization scaler is fitted on the training rows only,
and windows never straddle split boundaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np


class SeriesFormatError(ValueError):
    """Raised for unparseable or invariant-violating input files."""


@dataclass
class RawSeries:
    variable_names: list[str]
    timestamps: list[datetime]
    values: np.ndarray  # (T_total, N) float64
    frequency: str
    provenance: dict = field(default_factory=dict)

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    @property
    def num_variables(self) -> int:
        return self.values.shape[1]


@dataclass
class Scaler:
    """Per-variable mean/std fitted on the training rows (population std)."""

    mean: np.ndarray  # (N,)
    std: np.ndarray   # (N,), constant variables forced to 1.0
    constant: np.ndarray  # (N,) bool flags for std==0 variables

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class TimeWindow:
    lookback: np.ndarray  # (T, N)
    target: np.ndarray    # (H, N)
    split: str            # train / val / test
    origin_index: int     # row index of the first lookback row


def _infer_frequency(timestamps: list[datetime]) -> str:
    if len(timestamps) < 2:
        return "unknown"
    delta = (timestamps[1] - timestamps[0]).total_seconds()
    named = {3600.0: "hourly", 86400.0: "daily", 900.0: "15min", 60.0: "minutely"}
    return named.get(delta, f"{int(delta)}s")


def load_series(path, variable_names: list[str] | None = None,
                delimiter: str = ",", forward_fill: bool = False) -> RawSeries:
    """Parse a timestamped table into a RawSeries.

    `variable_names`, when given, must match the header's non-timestamp
    columns. Rows with empty cells are rejected unless `forward_fill` is
    set, in which case the previous row's value is carried forward and the
    fill count recorded in provenance.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise SeriesFormatError(f"{path}: empty file")

    header = lines[0].split(delimiter)
    names = [h.strip() for h in header[1:]]
    if not names:
        raise SeriesFormatError(f"{path}: header has no variable columns")
    if variable_names is not None and names != list(variable_names):
        raise SeriesFormatError(
            f"{path}: header variables {names} do not match expected {list(variable_names)}")

    timestamps: list[datetime] = []
    rows: list[list[float]] = []
    filled = 0
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(delimiter)
        if len(cells) != len(names) + 1:
            raise SeriesFormatError(
                f"{path}:{lineno}: expected {len(names) + 1} columns, got {len(cells)}")
        try:
            ts = datetime.fromisoformat(cells[0].strip())
        except ValueError as exc:
            raise SeriesFormatError(f"{path}:{lineno}: bad timestamp {cells[0]!r}") from exc
        if timestamps and ts <= timestamps[-1]:
            raise SeriesFormatError(
                f"{path}:{lineno}: timestamps not strictly increasing at {cells[0]!r}")
        row: list[float] = []
        for col, cell in enumerate(cells[1:]):
            cell = cell.strip()
            if cell == "":
                if forward_fill and rows:
                    row.append(rows[-1][col])
                    filled += 1
                    continue
                raise SeriesFormatError(f"{path}:{lineno}: missing value in column {names[col]!r}")
            try:
                row.append(float(cell))
            except ValueError as exc:
                raise SeriesFormatError(
                    f"{path}:{lineno}: non-numeric cell {cell!r} in column {names[col]!r}") from exc
        timestamps.append(ts)
        rows.append(row)

    if not rows:
        raise SeriesFormatError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    provenance = {"path": str(path), "forward_filled": filled}
    return RawSeries(names, timestamps, values, _infer_frequency(timestamps), provenance)


def chronological_split(series: RawSeries, ratios: tuple[float, float, float],
                        min_rows: int | None = None) -> dict[str, tuple[int, int]]:
    """Contiguous, disjoint train/val/test row ranges covering all rows.

    `min_rows`, when given, is the smallest usable split length (lookback +
    horizon); any shorter split is an error.
    """
    if any(r <= 0 for r in ratios):
        raise ValueError(f"split fractions must all be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {ratios}")
    total = series.num_rows
    train_end = int(round(total * ratios[0]))
    val_end = train_end + int(round(total * ratios[1]))
    ranges = {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, total)}
    if min_rows is not None:
        for split, (start, stop) in ranges.items():
            if stop - start < min_rows:
                raise ValueError(
                    f"{split} split of {stop - start} rows is shorter than window "
                    f"(need {min_rows})")
    return ranges


def fit_transform(series: RawSeries,
                  train_range: tuple[int, int]) -> tuple[Scaler, RawSeries]:
    """Fit the scaler on train rows only and normalize every row with it."""
    start, stop = train_range
    if stop <= start:
        raise ValueError("fit_transform: train range is empty")
    train_rows = series.values[start:stop]
    mean = train_rows.mean(axis=0)
    std = train_rows.std(axis=0)  # population (divide by N)
    constant = std == 0.0
    if constant.any():
        flagged = [series.variable_names[i] for i in np.flatnonzero(constant)]
        warnings.warn(f"constant variables {flagged}: scaler std forced to 1.0")
    std = np.where(constant, 1.0, std)
    scaler = Scaler(mean=mean, std=std, constant=constant)
    normalized = RawSeries(
        variable_names=list(series.variable_names),
        timestamps=list(series.timestamps),
        values=scaler.transform(series.values),
        frequency=series.frequency,
        provenance=dict(series.provenance),
    )
    return scaler, normalized


def window_count(rows: int, lookback: int, horizon: int, stride: int = 1) -> int:
    """Closed-form number of windows a split of `rows` rows yields."""
    usable = rows - lookback - horizon
    if usable < 0:
        return 0
    return usable // stride + 1


def make_windows(series: RawSeries, lookback: int, horizon: int,
                 ranges: dict[str, tuple[int, int]], stride: int = 1) -> list[TimeWindow]:
    """Slide a (lookback, horizon) window through each split independently."""
    windows: list[TimeWindow] = []
    for split in ("train", "val", "test"):
        start, stop = ranges[split]
        if stop - start < lookback + horizon:
            raise ValueError(
                f"{split} split has {stop - start} rows; "
                f"need at least lookback+horizon = {lookback + horizon}")
        last_origin = stop - lookback - horizon
        for origin in range(start, last_origin + 1, stride):
            windows.append(TimeWindow(
                lookback=series.values[origin:origin + lookback].copy(),
                target=series.values[origin + lookback:origin + lookback + horizon].copy(),
                split=split,
                origin_index=origin,
            ))
    return windows


def few_shot_subsample(train_windows: list[TimeWindow], fraction: float,
                       seed: int = 0, random_mode: bool = False) -> list[TimeWindow]:
    """Keep ceil(fraction * count) training windows.

    Default is the chronological prefix (deterministic); `random_mode` draws
    a seeded random subset instead, preserving chronological order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"few-shot fraction must be in (0, 1], got {fraction}")
    count = int(np.ceil(fraction * len(train_windows)))
    if count == 0:
        raise ValueError("few-shot subsample is empty")
    if fraction == 1.0:
        return list(train_windows)
    if random_mode:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(train_windows), size=count, replace=False))
        return [train_windows[i] for i in picked]
    return list(train_windows[:count])
