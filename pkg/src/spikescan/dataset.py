"""CSV ingestion, chronological windowing, and synthetic series.

Rows are time steps, columns are variables.  Splits are chronological with
no shuffling across boundaries, and z-score statistics come from the rows
the training windows touch, never from validation or test rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SeriesDataset:
    values: np.ndarray
    columns: list[str] = field(default_factory=list)
    sample_rate: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"series must be 2-d [rows, variables], got shape {self.values.shape}")
        if not self.columns:
            self.columns = [f"v{i}" for i in range(self.values.shape[1])]
        if len(self.columns) != self.values.shape[1]:
            raise ValueError(f"{len(self.columns)} column names for {self.values.shape[1]} variables")


def load_csv(path: str, has_header: bool = False) -> SeriesDataset:
    """Read a numeric CSV; any bad cell is reported with its row and column."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    columns: list[str] = []
    if has_header:
        columns = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path}: header only, no data rows")
    width = len(rows[0])
    data = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell.strip()!r} at row {i}, column {j}") from None
    return SeriesDataset(values=data, columns=columns)


def write_csv(path: str, values: np.ndarray, columns: list[str] | None = None) -> None:
    values = np.asarray(values)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if columns:
            writer.writerow(columns)
        for row in np.atleast_2d(values):
            writer.writerow([format(v, ".10g") for v in row])


@dataclass
class WindowSplits:
    """Stride-1 history/target window pairs, split chronologically."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def counts(self) -> tuple[int, int, int]:
        return self.x_train.shape[0], self.x_val.shape[0], self.x_test.shape[0]


def window_count(rows: int, history: int, horizon: int) -> int:
    return rows - history - horizon + 1


def normalization_stats(values: np.ndarray, train_rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean/std over the first ``train_rows`` rows; std floored."""
    seg = values[:train_rows]
    mean = seg.mean(axis=0)
    std = np.maximum(seg.std(axis=0), 1e-8)
    return mean, std


def make_windows(ds: SeriesDataset, history: int, horizon: int,
                 split: tuple[float, float, float] = (0.7, 0.1, 0.2),
                 stats: tuple[np.ndarray, np.ndarray] | None = None) -> WindowSplits:
    """Slice a series into normalized (history, horizon) window pairs.

    With M = rows - history - horizon + 1 total stride-1 windows, each split
    receives floor(ratio * M) consecutive window start positions in
    chronological order; leftover windows at the end are dropped.  Pass
    ``stats`` to normalize with externally fixed mean/std (model reuse);
    otherwise the statistics come from the rows the training windows cover.
    """
    rows, width = ds.values.shape
    M = window_count(rows, history, horizon)
    if M <= 0:
        raise ValueError(f"series has {rows} rows; need at least history + horizon = {history + horizon}")
    if any(r < 0 for r in split) or sum(split) > 1.0 + 1e-9:
        raise ValueError(f"split ratios must be nonnegative and sum to at most 1, got {split}")
    n_tr = math.floor(split[0] * M)
    n_va = math.floor(split[1] * M)
    n_te = math.floor(split[2] * M)

    if stats is None:
        if n_tr == 0:
            raise ValueError("no training windows to compute normalization statistics from; "
                             "pass explicit stats or enlarge the training ratio")
        # rows touched by training windows: starts 0..n_tr-1, each spanning H+G rows
        mean, std = normalization_stats(ds.values, n_tr + history + horizon - 1)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    z = (ds.values - mean) / std

    win = np.lib.stride_tricks.sliding_window_view(z, history + horizon, axis=0)
    win = win.transpose(0, 2, 1)  # [M, history+horizon, width]

    def take(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        w = win[lo:hi]
        return w[:, :history].copy(), w[:, history:].copy()

    x_tr, y_tr = take(0, n_tr)
    x_va, y_va = take(n_tr, n_tr + n_va)
    x_te, y_te = take(n_tr + n_va, n_tr + n_va + n_te)
    return WindowSplits(x_train=x_tr, y_train=y_tr, x_val=x_va, y_val=y_va,
                        x_test=x_te, y_test=y_te, mean=mean, std=std)


def denormalize(pred: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return pred * std + mean


def make_coupled_sinusoids(n_steps: int = 2000, noise: float = 0.05,
                           period: float = 24.0, seed: int = 0) -> SeriesDataset:
    """Two noisy sinusoids sharing a base oscillation, one phase-shifted.

    The second variable mixes a shifted copy of the oscillation with the
    first variable's clean base, so forecasting either benefits from the
    other; noise is i.i.d. Gaussian per step.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    base = np.sin(2.0 * np.pi * t / period)
    x1 = base + noise * rng.standard_normal(n_steps)
    x2 = 0.7 * np.sin(2.0 * np.pi * t / period + 1.0) + 0.3 * base \
        + noise * rng.standard_normal(n_steps)
    return SeriesDataset(values=np.stack([x1, x2], axis=1),
                         columns=["s1", "s2"], sample_rate="synthetic")
