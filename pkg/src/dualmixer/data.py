"""Turbofan run-to-failure data pipeline.

Handles the standard 26-column whitespace text format (unit id, cycle index,
3 operating settings, 21 sensor channels), sensor selection, train-split
min-max normalization, sliding windows, capped-linear life labels, and
final-window test-set construction. Everything is deterministic and pure;
functions either return new values or raise.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# 1-based positions of the informative sensor channels; the complement
# {1,5,6,10,16,18,19} is near-constant in this benchmark family.
SELECTED_SENSORS = (2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21)

# Remaining-life labels saturate at this many cycles before normalization.
RUL_KNEE = 125

CACHE_MAGIC = b"DMWC"
CACHE_VERSION = 1


class ParseError(ValueError):
    """Malformed input text; the message carries file and line context."""


class DegenerateVariableError(ValueError):
    """A kept variable has max == min on the training split."""


@dataclass
class RawSeries:
    """One unit's full run: cycle indices (1..L, contiguous), operating
    settings (L x 3), and sensor channels (L x n_sensors)."""

    unit_id: int
    cycles: np.ndarray
    settings: np.ndarray
    sensors: np.ndarray

    @property
    def length(self) -> int:
        return int(self.cycles.shape[0])


@dataclass
class WindowSample:
    """One training or evaluation window.

    anchor_index is the window's position in its unit's ordered window
    sequence (the index the negative sampler works over); true_rul_cycles
    is the unnormalized remaining life at the window's last cycle.
    """

    values: np.ndarray  # w x m_vars, normalized
    label: float        # in [0, 1]
    unit_id: int
    anchor_index: int
    true_rul_cycles: int


@dataclass(frozen=True)
class NormStats:
    """Per-variable training-split extrema, 1 x m_vars each."""

    mins: np.ndarray
    maxs: np.ndarray


# --------------------------------------------------------------------------
# parsing and serialization
# --------------------------------------------------------------------------

def parse_cmapss(path: str) -> list[RawSeries]:
    """Parse a 26-column run-to-failure text file into per-unit series.

    Units are returned in first-appearance order with rows sorted by cycle;
    cycle indices must then run 1..L without gaps.
    """
    rows_by_unit: dict[int, list[list[float]]] = {}
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 26:
                raise ParseError(f"{path}:{lineno}: expected 26 columns, got {len(parts)}")
            try:
                row = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
            rows_by_unit.setdefault(int(row[0]), []).append(row)
    series = []
    for unit_id, rows in rows_by_unit.items():
        rows.sort(key=lambda r: r[1])
        arr = np.array(rows)
        cycles = arr[:, 1].astype(int)
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            raise ParseError(f"{path}: unit {unit_id} cycle indices are not contiguous from 1")
        series.append(RawSeries(unit_id=unit_id, cycles=cycles,
                                settings=arr[:, 2:5], sensors=arr[:, 5:26]))
    return series


def parse_rul(path: str) -> list[int]:
    """Parse a one-value-per-line remaining-life file for a test split."""
    out = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1:
                raise ParseError(f"{path}:{lineno}: expected 1 column, got {len(parts)}")
            try:
                out.append(int(float(parts[0])))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
    return out


def write_cmapss(path: str, series_list: Sequence[RawSeries]) -> None:
    """Write series in the 26-column text format, with enough float digits
    that reparsing reproduces the arrays exactly."""
    with open(path, "w") as f:
        for s in series_list:
            if s.sensors.shape[1] != 21:
                raise ValueError(f"unit {s.unit_id}: need 21 sensor columns to "
                                 f"serialize, got {s.sensors.shape[1]}")
            for i in range(s.length):
                fields = [str(s.unit_id), str(int(s.cycles[i]))]
                fields += ["%.17g" % v for v in s.settings[i]]
                fields += ["%.17g" % v for v in s.sensors[i]]
                f.write(" ".join(fields) + "\n")


def write_rul(path: str, ruls: Sequence[int]) -> None:
    with open(path, "w") as f:
        for r in ruls:
            f.write(f"{int(r)}\n")


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def select_variables(series: RawSeries) -> RawSeries:
    """Keep the 14 informative sensor channels, order preserved."""
    if series.sensors.shape[1] != 21:
        raise ValueError(f"unit {series.unit_id}: variable selection needs 21 "
                         f"sensor columns, got {series.sensors.shape[1]}")
    idx = [s - 1 for s in SELECTED_SENSORS]
    return replace(series, sensors=series.sensors[:, idx].copy())


def fit_minmax(values_list: Iterable[np.ndarray]) -> NormStats:
    """Per-variable extrema over every row of every given array."""
    mins = None
    maxs = None
    for values in values_list:
        lo = values.min(axis=0, keepdims=True)
        hi = values.max(axis=0, keepdims=True)
        mins = lo if mins is None else np.minimum(mins, lo)
        maxs = hi if maxs is None else np.maximum(maxs, hi)
    if mins is None:
        raise ValueError("fit_minmax: no data")
    flat = np.flatnonzero(maxs[0] == mins[0])
    if flat.size:
        raise DegenerateVariableError(f"constant variables at columns {flat.tolist()}")
    return NormStats(mins=mins, maxs=maxs)


def apply_minmax(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - min) / (max - min); out-of-range values are NOT clipped."""
    return (values - stats.mins) / (stats.maxs - stats.mins)


def invert_minmax(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * (stats.maxs - stats.mins) + stats.mins


def sliding_window(values: np.ndarray, w: int, sl: int) -> list[np.ndarray]:
    """Windows of w rows at offsets 0, sl, 2 sl, ...; count (L - w) // sl + 1."""
    if w < 1 or sl < 1:
        raise ValueError("window size and stride must be >= 1")
    length = values.shape[0]
    if length < w:
        raise ValueError(f"series of length {length} shorter than window {w}")
    return [values[start:start + w].copy()
            for start in range(0, length - w + 1, sl)]


def piecewise_label(remaining_cycles: int, knee: int = RUL_KNEE) -> float:
    """Capped-linear life fraction: min(R, knee) / knee."""
    if remaining_cycles < 0:
        raise ValueError(f"negative remaining cycles: {remaining_cycles}")
    return min(remaining_cycles, knee) / knee


def build_training_windows(series_list: Sequence[RawSeries], stats: NormStats,
                           w: int, sl: int, knee: int = RUL_KNEE) -> list[WindowSample]:
    """Normalize, window, and label every unit; a window's label is the
    remaining life at its last cycle. Units shorter than w are skipped."""
    samples = []
    for s in series_list:
        if s.length < w:
            logger.warning("unit %d has %d cycles, shorter than window %d; skipped",
                           s.unit_id, s.length, w)
            continue
        values = apply_minmax(s.sensors, stats)
        last_cycle = int(s.cycles[-1])
        for j, window in enumerate(sliding_window(values, w, sl)):
            end_cycle = int(s.cycles[j * sl + w - 1])
            r = last_cycle - end_cycle
            samples.append(WindowSample(values=window, label=piecewise_label(r, knee),
                                        unit_id=s.unit_id, anchor_index=j,
                                        true_rul_cycles=r))
    return samples


def build_test_set(series_list: Sequence[RawSeries], ruls: Sequence[int],
                   stats: NormStats, w: int,
                   knee: int = RUL_KNEE) -> list[WindowSample]:
    """One evaluation sample per unit: the final w cycles (left-padded by
    repeating the first cycle when the unit is shorter), labeled with the
    supplied true remaining life."""
    if len(ruls) != len(series_list):
        raise ValueError(f"remaining-life file has {len(ruls)} entries for "
                         f"{len(series_list)} test units")
    samples = []
    for s, r in zip(series_list, ruls):
        values = apply_minmax(s.sensors, stats)
        if s.length >= w:
            window = values[-w:].copy()
            anchor = (s.length - w)  # final window index at stride 1
        else:
            pad = np.repeat(values[:1], w - s.length, axis=0)
            window = np.vstack([pad, values])
            anchor = 0
        samples.append(WindowSample(values=window, label=piecewise_label(int(r), knee),
                                    unit_id=s.unit_id, anchor_index=int(anchor),
                                    true_rul_cycles=int(r)))
    return samples


def group_by_unit(samples: Sequence[WindowSample]) -> dict[int, list[WindowSample]]:
    """Unit id -> that unit's windows ordered by anchor_index."""
    groups: dict[int, list[WindowSample]] = {}
    for s in samples:
        groups.setdefault(s.unit_id, []).append(s)
    for unit_samples in groups.values():
        unit_samples.sort(key=lambda s: s.anchor_index)
    return groups


# --------------------------------------------------------------------------
# window cache
# --------------------------------------------------------------------------
#
# Byte layout (little-endian): magic b"DMWC", u32 version, u32 sample count,
# u32 w, u32 m_vars; then per sample: i64 unit_id, i64 anchor_index,
# i64 true_rul_cycles, f64 label, then w*m_vars float64 values, row-major.

def save_window_cache(path: str, samples: Sequence[WindowSample]) -> None:
    if not samples:
        raise ValueError("refusing to cache an empty sample list")
    w, m_vars = samples[0].values.shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIII", CACHE_VERSION, len(samples), w, m_vars))
        for s in samples:
            if s.values.shape != (w, m_vars):
                raise ValueError("inconsistent window shapes in cache")
            f.write(struct.pack("<qqqd", s.unit_id, s.anchor_index,
                                s.true_rul_cycles, s.label))
            f.write(np.ascontiguousarray(s.values, dtype="<f8").tobytes())


def load_window_cache(path: str) -> list[WindowSample]:
    with open(path, "rb") as f:
        if f.read(4) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a window cache")
        version, count, w, m_vars = struct.unpack("<IIII", f.read(16))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        samples = []
        for _ in range(count):
            unit_id, anchor, true_rul, label = struct.unpack("<qqqd", f.read(32))
            raw = f.read(w * m_vars * 8)
            if len(raw) != w * m_vars * 8:
                raise ValueError(f"{path}: truncated cache")
            values = np.frombuffer(raw, dtype="<f8").reshape(w, m_vars).copy()
            samples.append(WindowSample(values=values, label=label, unit_id=unit_id,
                                        anchor_index=anchor, true_rul_cycles=true_rul))
    return samples
