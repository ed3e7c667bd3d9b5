"""Influent forcing: synthetic diurnal/inter-day nitrate profile and CSV series."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

CSV_HEADER = ("t_d", "Q_m3d", "NO3_gNm3", "NO2_gNm3", "SS_gCODm3")

# Daily offsets are drawn once per seed for this many days.
_MAX_DAYS = 4096


@dataclass(frozen=True)
class InfluentState:
    Q: float
    C_NO3: float
    C_NO2: float
    C_SS: float


@dataclass(frozen=True)
class InfluentProfile:
    Q_base: float = 45000.0
    NO3_base: float = 15.0
    NO3_amp: float = 5.0
    phase: float = 0.3
    interday_sigma: float = 1.5
    NO2_in: float = 0.5
    SS_in: float = 5.0
    seed: int = 1

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "phase" and getattr(self, f.name) < 0:
                raise ValueError(f"influent.{f.name} must be >= 0")
        # lowest reachable daily base is NO3_base - 3 sigma
        if self.NO3_base - 3.0 * self.interday_sigma < self.NO3_amp:
            raise ValueError("influent.NO3_base - 3*interday_sigma must be >= NO3_amp")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InfluentProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown influent keys: {sorted(unknown)}")
        kw = {k: (int(v) if k == "seed" else float(v)) for k, v in d.items()}
        return cls(**kw)


@functools.lru_cache(maxsize=64)
def _daily_offsets(seed: int, sigma: float) -> np.ndarray:
    """Seeded random walk of daily base offsets, clipped to +/- 3 sigma."""
    steps = np.random.default_rng(seed).standard_normal(_MAX_DAYS) * sigma
    walk = np.empty(_MAX_DAYS)
    level = 0.0
    lim = 3.0 * sigma
    for i, s in enumerate(steps):
        walk[i] = level
        level = min(max(level + s, -lim), lim)
    walk.setflags(write=False)
    return walk


def daily_base(day: int, profile: InfluentProfile) -> float:
    if profile.interday_sigma == 0.0:
        return profile.NO3_base
    if day >= _MAX_DAYS:
        raise ValueError(f"synthetic influent only covers {_MAX_DAYS} days")
    return profile.NO3_base + float(_daily_offsets(profile.seed, profile.interday_sigma)[day])


def generate(t: float, profile: InfluentProfile) -> InfluentState:
    if t < 0:
        raise ValueError("t must be >= 0")
    base = daily_base(int(math.floor(t)), profile)
    no3 = max(0.0, base + profile.NO3_amp * math.sin(2.0 * math.pi * (t - profile.phase)))
    return InfluentState(Q=profile.Q_base, C_NO3=no3, C_NO2=profile.NO2_in, C_SS=profile.SS_in)


class InfluentSeries:
    """Recorded influent, linearly interpolated, held constant past both ends."""

    def __init__(self, t, Q, NO3, NO2, SS):
        self.t = np.asarray(t, dtype=float)
        self.Q = np.asarray(Q, dtype=float)
        self.NO3 = np.asarray(NO3, dtype=float)
        self.NO2 = np.asarray(NO2, dtype=float)
        self.SS = np.asarray(SS, dtype=float)
        if self.t.size == 0:
            raise ValueError("influent series is empty")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("influent time column must be strictly increasing")

    def __call__(self, t: float) -> InfluentState:
        return InfluentState(
            Q=float(np.interp(t, self.t, self.Q)),
            C_NO3=float(np.interp(t, self.t, self.NO3)),
            C_NO2=float(np.interp(t, self.t, self.NO2)),
            C_SS=float(np.interp(t, self.t, self.SS)),
        )


class InfluentParseError(ValueError):
    pass


def load_timeseries(path) -> InfluentSeries:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InfluentParseError(f"{path}: empty file") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise InfluentParseError(f"{path}: missing columns {missing}")
        idx = [header.index(c) for c in CSV_HEADER]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            try:
                vals = [float(rec[i]) for i in idx]
            except (ValueError, IndexError):
                raise InfluentParseError(f"{path}: row {lineno}: non-numeric or missing cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise InfluentParseError(f"{path}: row {lineno}: non-finite value")
            if rows and vals[0] <= rows[-1][0]:
                raise InfluentParseError(f"{path}: row {lineno}: time not strictly increasing")
            rows.append(vals)
    if not rows:
        raise InfluentParseError(f"{path}: no data rows")
    arr = np.array(rows)
    return InfluentSeries(*arr.T)


def write_timeseries(path, times, source) -> None:
    """Sample ``source`` (profile or series) at ``times`` and write the influent CSV."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in times:
            s = generate(t, source) if isinstance(source, InfluentProfile) else source(t)
            w.writerow([_fmt(t), _fmt(s.Q), _fmt(s.C_NO3), _fmt(s.C_NO2), _fmt(s.C_SS)])


def _fmt(x: float) -> str:
    return repr(float(x))
