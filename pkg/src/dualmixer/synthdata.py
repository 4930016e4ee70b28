"""Synthetic run-to-failure generator with an exact remaining-life oracle.

Each unit's channel v follows a_uv + b_uv * (t/L)^gamma + noise with per-unit
random coefficients, so every channel degrades monotonically in expectation
and the true remaining life at cycle t is L - t by construction. Units are
RawSeries values, so the whole real-data pipeline runs on them unchanged;
with 21 channels they can also be written out in the 26-column text format.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import RawSeries, write_cmapss, write_rul


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs: unit count, inclusive cycle-length range, channel
    count, degradation exponent, observation noise, and the seed."""

    n_units: int = 20
    cycles: tuple[int, int] = (90, 140)
    n_vars: int = 14
    gamma: float = 2.0
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.cycles
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")
        if not (2 <= lo <= hi):
            raise ValueError(f"bad cycle range {self.cycles}")
        if self.n_vars < 2:
            raise ValueError("n_vars must be >= 2")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def generate(spec: SynthSpec) -> list[RawSeries]:
    """Deterministically generate spec.n_units run-to-failure series."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.cycles
    units = []
    for unit_id in range(1, spec.n_units + 1):
        length = int(rng.integers(lo, hi + 1))
        offsets = rng.uniform(-0.5, 0.5, size=spec.n_vars)
        slopes = rng.uniform(0.5, 1.5, size=spec.n_vars)
        t = np.arange(1, length + 1)
        trend = offsets[None, :] + slopes[None, :] * (t[:, None] / length) ** spec.gamma
        noise = rng.normal(0.0, spec.noise_std, size=(length, spec.n_vars))
        units.append(RawSeries(unit_id=unit_id, cycles=t,
                               settings=np.zeros((length, 3)),
                               sensors=trend + noise))
    return units


def oracle_rul(unit: RawSeries, cycle: int) -> int:
    """Ground-truth remaining cycles at a 1-based cycle index."""
    length = unit.length
    if not (1 <= cycle <= length):
        raise ValueError(f"cycle {cycle} outside unit {unit.unit_id} (1..{length})")
    return length - cycle


def make_test_split(units: list[RawSeries], seed: int,
                    min_frac: float = 0.3) -> tuple[list[RawSeries], list[int]]:
    """Truncate each unit at a random cycle before failure, mimicking an
    incomplete test split; returns the cut series and their true RULs."""
    rng = np.random.default_rng(seed)
    truncated = []
    ruls = []
    for u in units:
        first = max(1, int(np.ceil(u.length * min_frac)))
        cut = int(rng.integers(first, u.length))  # strictly before failure
        truncated.append(replace(u, cycles=u.cycles[:cut],
                                 settings=u.settings[:cut],
                                 sensors=u.sensors[:cut]))
        ruls.append(oracle_rul(u, cut))
    return truncated, ruls


def emit_cmapss(out_dir: str, tag: str, train_units: list[RawSeries],
                test_units: list[RawSeries], test_ruls: list[int]) -> dict[str, str]:
    """Write train/test/RUL files in the 26-column format; returns the paths.

    Units must carry 21 sensor channels so the files are structurally
    identical to the real benchmark's.
    """
    import os
    paths = {
        "train": os.path.join(out_dir, f"train_{tag}.txt"),
        "test": os.path.join(out_dir, f"test_{tag}.txt"),
        "rul": os.path.join(out_dir, f"RUL_{tag}.txt"),
    }
    write_cmapss(paths["train"], train_units)
    write_cmapss(paths["test"], test_units)
    write_rul(paths["rul"], test_ruls)
    return paths
