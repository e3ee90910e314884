"""Weekly trip aggregation and Laplace-mechanism privatization.

Raw trips are reduced to unique-user counts per (week, origin, destination),
zero-mean Laplace noise of scale 1/epsilon is added to every count, and any
metric whose noisy count falls below the suppression threshold is withheld.
Each published metric independently satisfies (epsilon, delta)-DP; no
composition accounting is performed across releases.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TripRecord:
    user_id: str
    origin_fips: str
    dest_fips: str
    week: int


@dataclass(frozen=True)
class FlowRecord:
    week: int
    origin_fips: str
    dest_fips: str
    count: float
    privatized: bool = False


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float = 0.66
    delta: float = 2.1e-29
    threshold: float = 100.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.delta <= 0 or self.threshold <= 0:
            raise ValueError("privacy parameters must be positive")

    @property
    def noise_scale(self) -> float:
        return 1.0 / self.epsilon


@dataclass(eq=False)
class FlowTable:
    """Flow records plus (week, origin, dest) lookup helpers."""

    records: list[FlowRecord]
    privatized: bool = False
    _index: dict = field(init=False, repr=False)
    _weeks: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {(r.week, r.origin_fips, r.dest_fips): r.count for r in self.records}
        self._weeks = sorted({r.week for r in self.records})

    @property
    def weeks(self) -> list[int]:
        return self._weeks

    def count(self, week: int, origin: str, dest: str) -> float:
        return self._index.get((week, origin, dest), 0.0)

    def intra(self, fips: str, week: int) -> float:
        return self.count(week, fips, fips)

    def inflow(self, fips: str, week: int) -> float:
        """Total published flow into fips for the week, intra-flow excluded."""
        return sum(r.count for r in self.records
                   if r.week == week and r.dest_fips == fips and r.origin_fips != fips)

    def in_edges(self, fips: str, week: int) -> list[FlowRecord]:
        return [r for r in self.records
                if r.week == week and r.dest_fips == fips and r.origin_fips != fips]

    def resolve_week(self, week: int) -> int | None:
        """Nearest week with data at or before `week`, else the earliest after."""
        if not self._weeks:
            return None
        earlier = [w for w in self._weeks if w <= week]
        return earlier[-1] if earlier else self._weeks[0]


def _county(fips: str) -> str:
    # Finer-resolution origin/destination codes roll up by 5-digit prefix.
    return fips[:5]


def aggregate_weekly(trips) -> FlowTable:
    """Count unique users per (week, origin county, destination county)."""
    seen = {(t.user_id, _county(t.origin_fips), _county(t.dest_fips), t.week)
            for t in trips}
    counts: dict[tuple[int, str, str], int] = {}
    for _user, origin, dest, week in seen:
        key = (week, origin, dest)
        counts[key] = counts.get(key, 0) + 1
    records = [FlowRecord(week, origin, dest, float(n))
               for (week, origin, dest), n in sorted(counts.items())]
    return FlowTable(records, privatized=False)


def laplace_noise(rng: np.random.Generator, scale: float, size=None) -> np.ndarray:
    """Zero-mean Laplace draws via inverse CDF of a seeded uniform stream."""
    u = rng.uniform(-0.5, 0.5, size)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def privatize(raw: FlowTable, params: PrivacyParams = PrivacyParams(),
              seed: int = 0) -> FlowTable:
    """Add Laplace noise to every raw count and suppress noisy counts < threshold.

    Records are processed in sorted key order with a single seeded stream,
    so the output is a pure function of (raw table, params, seed).
    """
    if raw.privatized:
        raise ValueError("privatize: input flows are already privatized")
    rng = np.random.default_rng(seed)
    published = []
    for record in sorted(raw.records, key=lambda r: (r.week, r.origin_fips, r.dest_fips)):
        noisy = record.count + float(laplace_noise(rng, params.noise_scale))
        if noisy < params.threshold:
            continue
        published.append(FlowRecord(record.week, record.origin_fips, record.dest_fips,
                                    noisy, privatized=True))
    return FlowTable(published, privatized=True)


def privacy_report(params: PrivacyParams = PrivacyParams(), n_metrics: int = 0) -> dict:
    """Per-metric guarantee summary; metrics are privatized independently."""
    return {
        "mechanism": "laplace",
        "epsilon": params.epsilon,
        "delta": params.delta,
        "noise_scale": params.noise_scale,
        "threshold": params.threshold,
        "n_metrics": n_metrics,
        "composition": "none",
    }


def read_trips_csv(text) -> list[TripRecord]:
    """Parse a user_id,week,origin_fips,dest_fips CSV."""
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        raise ValueError("trips CSV: missing header row")
    trips = []
    for line, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise ValueError(f"trips CSV line {line}: expected 4 fields")
        trips.append(TripRecord(row[0].strip(), row[2].strip(), row[3].strip(),
                                int(row[1])))
    return trips


def read_flows_csv(text, privatized: bool = True) -> FlowTable:
    """Parse a week,origin_fips,dest_fips,count CSV."""
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None:
        raise ValueError("flows CSV: missing header row")
    records = []
    for line, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise ValueError(f"flows CSV line {line}: expected 4 fields")
        records.append(FlowRecord(int(row[0]), row[1].strip().zfill(5),
                                  row[2].strip().zfill(5), float(row[3]),
                                  privatized=privatized))
    return FlowTable(records, privatized=privatized)


def write_flows_csv(flows: FlowTable) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["week", "origin_fips", "dest_fips", "count"])
    for r in sorted(flows.records, key=lambda r: (r.week, r.origin_fips, r.dest_fips)):
        writer.writerow([r.week, r.origin_fips, r.dest_fips, repr(r.count)])
    return out.getvalue()
