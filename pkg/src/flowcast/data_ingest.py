"""Parsing of case and mobility-trend files plus per-node feature assembly.

Day indices count from day zero = 2020-01-01 everywhere, so calendar dates
in the inputs map directly onto array positions.  Weekly quantities use
week = day // 7 relative to the same origin.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dp_mobility import FlowTable

DAY_ZERO = dt.date(2020, 1, 1)

# Canonical ordering of the six place-visit trend categories.
TREND_CATEGORIES = ("grocery", "parks", "transit", "workplaces", "residential", "retail")


class ParseError(ValueError):
    """Malformed input row; message carries the 1-based line number."""


def day_index(date: dt.date) -> int:
    return (date - DAY_ZERO).days


def parse_day(text: str, line: int) -> int:
    try:
        return day_index(dt.date.fromisoformat(text.strip()))
    except ValueError as exc:
        raise ParseError(f"line {line}: bad date {text!r}: {exc}") from None


def _norm_fips(text: str, line: int) -> str:
    code = text.strip()
    if not code or not code.isdigit():
        raise ParseError(f"line {line}: bad fips {text!r}")
    return code.zfill(5)


@dataclass(frozen=True, eq=False)
class CaseRecord:
    date: dt.date
    fips: str
    state_id: int
    county_id: int
    cum_cases: int
    cum_deaths: int


@dataclass(eq=False)
class CountySeries:
    """Gap-filled cumulative series for one county, starting at first_day."""

    fips: str
    state_id: int
    county_id: int
    first_day: int
    cum_cases: np.ndarray
    cum_deaths: np.ndarray
    delta_cases: np.ndarray | None = None
    delta_deaths: np.ndarray | None = None
    negative_delta_days: list[int] = field(default_factory=list)


@dataclass(eq=False)
class CaseTable:
    """Per-county daily cumulative counts keyed by (fips, day index)."""

    counties: dict[str, CountySeries]
    day_zero: dt.date = DAY_ZERO

    @property
    def fips(self) -> list[str]:
        return sorted(self.counties)

    @property
    def last_day(self) -> int:
        return max((s.first_day + len(s.cum_cases) - 1 for s in self.counties.values()),
                   default=-1)

    def record(self, fips: str, day: int) -> CaseRecord:
        s = self.counties[fips]
        offset = day - s.first_day
        if offset < 0 or offset >= len(s.cum_cases):
            raise KeyError(f"county {fips} has no record for day {day}")
        return CaseRecord(self.day_zero + dt.timedelta(days=day), fips, s.state_id,
                          s.county_id, int(s.cum_cases[offset]), int(s.cum_deaths[offset]))

    def cum(self, fips: str, day: int) -> int:
        """Cumulative cases at day; 0 before the first report, held after the last."""
        s = self.counties[fips]
        if day < s.first_day:
            return 0
        return int(s.cum_cases[min(day - s.first_day, len(s.cum_cases) - 1)])

    def delta(self, fips: str, day: int) -> int:
        """Daily new cases at day (may be negative on correction days)."""
        s = self.counties[fips]
        if s.delta_cases is None:
            raise ValueError("deltas not computed; call compute_deltas first")
        offset = day - s.first_day
        if offset < 0 or offset >= len(s.delta_cases):
            return 0
        return int(s.delta_cases[offset])

    def delta_deaths(self, fips: str, day: int) -> int:
        s = self.counties[fips]
        if s.delta_deaths is None:
            raise ValueError("deltas not computed; call compute_deltas first")
        offset = day - s.first_day
        if offset < 0 or offset >= len(s.delta_deaths):
            return 0
        return int(s.delta_deaths[offset])


def _assign_ids(counties: dict[str, CountySeries]) -> None:
    states = sorted({f[:2] for f in counties})
    state_index = {code: i for i, code in enumerate(states)}
    for i, fips in enumerate(sorted(counties)):
        s = counties[fips]
        s.county_id = i
        s.state_id = state_index[fips[:2]]


def parse_cases(text) -> CaseTable:
    """Parse a date,county,state,fips,cases,deaths CSV into a CaseTable.

    Counties missing interior days are forward-filled with the last seen
    cumulative values.  Non-monotone cumulative counts are kept but warned
    about; structurally bad rows raise ParseError with their line number.
    """
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("line 1: missing header row") from None
    if len(header) < 6:
        raise ParseError("line 1: expected 6 columns (date,county,state,fips,cases,deaths)")

    rows: dict[str, dict[int, tuple[int, int]]] = {}
    for line, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise ParseError(f"line {line}: expected 6 fields, got {len(row)}")
        day = parse_day(row[0], line)
        fips = _norm_fips(row[3], line)
        try:
            cases = int(row[4])
            deaths = int(row[5])
        except ValueError:
            raise ParseError(f"line {line}: non-integer count in {row[4]!r}/{row[5]!r}") from None
        if cases < 0 or deaths < 0:
            raise ParseError(f"line {line}: negative cumulative count")
        per_day = rows.setdefault(fips, {})
        if day in per_day:
            raise ParseError(f"line {line}: duplicate (date, fips) entry for {fips}")
        per_day[day] = (cases, deaths)

    counties: dict[str, CountySeries] = {}
    for fips, per_day in rows.items():
        days = sorted(per_day)
        first, last = days[0], days[-1]
        cum_cases = np.zeros(last - first + 1, dtype=np.int64)
        cum_deaths = np.zeros(last - first + 1, dtype=np.int64)
        prev = per_day[first]
        for day in range(first, last + 1):
            if day in per_day:
                cases, deaths = per_day[day]
                if cases < prev[0] or deaths < prev[1]:
                    warnings.warn(
                        f"county {fips} day {day}: cumulative count decreased "
                        f"({prev} -> {(cases, deaths)}); keeping the reported value")
                prev = (cases, deaths)
            cum_cases[day - first] = prev[0]
            cum_deaths[day - first] = prev[1]
        counties[fips] = CountySeries(fips, -1, -1, first, cum_cases, cum_deaths)

    _assign_ids(counties)
    return CaseTable(counties)


def compute_deltas(table: CaseTable) -> CaseTable:
    """Return a new table with delta[t] = cum[t] - cum[t-1] populated.

    The delta at a county's first observed day is its full cumulative count.
    Negative case deltas (reporting corrections) are kept and flagged.
    """
    counties: dict[str, CountySeries] = {}
    for fips, s in table.counties.items():
        delta_cases = np.diff(s.cum_cases, prepend=0)
        delta_deaths = np.diff(s.cum_deaths, prepend=0)
        flagged = [int(s.first_day + i) for i in np.nonzero(delta_cases < 0)[0]]
        counties[fips] = CountySeries(
            s.fips, s.state_id, s.county_id, s.first_day,
            s.cum_cases.copy(), s.cum_deaths.copy(),
            delta_cases, delta_deaths, flagged)
    return CaseTable(counties, table.day_zero)


@dataclass(eq=False)
class MobilityTrends:
    """Relative place-visit changes per (fips, day); 0 is baseline mobility."""

    values: dict[tuple[str, int], np.ndarray]

    def get(self, fips: str, day: int) -> np.ndarray:
        vec = self.values.get((fips, day))
        if vec is None:
            return np.zeros(len(TREND_CATEGORIES))
        return vec


def parse_trends(text) -> MobilityTrends:
    """Parse a date,fips,retail,grocery,parks,transit,workplaces,residential CSV."""
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise ParseError("line 1: missing header row") from None
    try:
        columns = {cat: header.index(cat) for cat in TREND_CATEGORIES}
        date_col = header.index("date")
        fips_col = header.index("fips")
    except ValueError as exc:
        raise ParseError(f"line 1: missing column: {exc}") from None

    values: dict[tuple[str, int], np.ndarray] = {}
    for line, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        day = parse_day(row[date_col], line)
        fips = _norm_fips(row[fips_col], line)
        try:
            vec = np.array([float(row[columns[cat]]) for cat in TREND_CATEGORIES])
        except (ValueError, IndexError):
            raise ParseError(f"line {line}: bad trend values") from None
        if np.any(vec < -1.0):
            raise ParseError(f"line {line}: trend value below -1")
        values[(fips, day)] = vec
    return MobilityTrends(values)


@dataclass(frozen=True, eq=False)
class NodeFeatures:
    """Feature block for one (county, day) node.

    past_cases[i] and past_deaths[i] hold log1p(max(0, delta)) at day t - i,
    so index 0 is the current day and the window reaches back d - 1 days.
    The float vector layout is [day_scalar, past_cases, past_deaths,
    mobility, flow_summary]; categorical ids feed embeddings separately.
    """

    county_id: int
    state_id: int
    day_scalar: float
    past_cases: np.ndarray
    past_deaths: np.ndarray
    mobility: np.ndarray
    flow_summary: np.ndarray

    def vector(self) -> np.ndarray:
        vec = np.concatenate([[self.day_scalar], self.past_cases, self.past_deaths,
                              self.mobility, self.flow_summary])
        if not np.all(np.isfinite(vec)):
            raise ValueError("non-finite feature value")
        return vec


def feature_dim(d: int = 7) -> int:
    return 1 + 2 * d + len(TREND_CATEGORIES) + 2


def build_features(cases: CaseTable, trends: MobilityTrends, flows: FlowTable,
                   fips: str, t: int, d: int = 7,
                   span: tuple[int, int] | None = None) -> NodeFeatures:
    """Assemble the NodeFeatures block for county `fips` at day `t`.

    `span` is the (first, last) day of the graph and fixes the [0, 1]
    normalization of day_scalar; without it day_scalar is 0.  Missing trend
    or flow values default to 0 (baseline / no published flow).
    """
    if t - d < 0:
        raise ValueError(f"window error: day {t} needs {d} days of history")
    if fips not in cases.counties:
        raise KeyError(f"county {fips} not present in the case table")

    deltas = np.array([cases.delta(fips, t - i) for i in range(d)], dtype=np.float64)
    deaths = np.array([cases.delta_deaths(fips, t - i) for i in range(d)], dtype=np.float64)
    past_cases = np.log1p(np.maximum(deltas, 0.0))
    past_deaths = np.log1p(np.maximum(deaths, 0.0))

    if span is not None and span[1] > span[0]:
        day_scalar = (t - span[0]) / (span[1] - span[0])
    else:
        day_scalar = 0.0

    week = flows.resolve_week(t // 7)
    if week is None:
        flow_summary = np.zeros(2)
    else:
        flow_summary = np.array([np.log1p(flows.intra(fips, week)),
                                 np.log1p(flows.inflow(fips, week))])

    series = cases.counties[fips]
    return NodeFeatures(series.county_id, series.state_id, float(day_scalar),
                        past_cases, past_deaths, trends.get(fips, t).astype(np.float64),
                        flow_summary)


def feature_stats(cases: CaseTable, trends: MobilityTrends, flows: FlowTable,
                  fips_list: list[str], days: range, d: int = 7,
                  span: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std over the given (county, day) grid.

    Computed once on the training window and reused unchanged at test time.
    Features with (near-)zero variance keep std 1 so scaling is a no-op.
    """
    rows = [build_features(cases, trends, flows, f, t, d, span).vector()
            for t in days for f in fips_list]
    if not rows:
        raise ValueError("feature_stats: empty (county, day) grid")
    mat = np.stack(rows)
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def cases_to_json(table: CaseTable) -> str:
    """Canonical JSON document for a case table (deltas included if present)."""
    doc = {"day_zero": table.day_zero.isoformat(), "counties": {}}
    for fips in table.fips:
        s = table.counties[fips]
        entry = {
            "state_id": s.state_id,
            "county_id": s.county_id,
            "first_day": s.first_day,
            "cum_cases": s.cum_cases.tolist(),
            "cum_deaths": s.cum_deaths.tolist(),
        }
        if s.delta_cases is not None:
            entry["delta_cases"] = s.delta_cases.tolist()
            entry["delta_deaths"] = s.delta_deaths.tolist()
            entry["negative_delta_days"] = s.negative_delta_days
        doc["counties"][fips] = entry
    return json.dumps(doc, sort_keys=True, indent=1)


def cases_from_json(text: str) -> CaseTable:
    doc = json.loads(text)
    counties = {}
    for fips, entry in doc["counties"].items():
        counties[fips] = CountySeries(
            fips, entry["state_id"], entry["county_id"], entry["first_day"],
            np.array(entry["cum_cases"], dtype=np.int64),
            np.array(entry["cum_deaths"], dtype=np.int64),
            np.array(entry["delta_cases"], dtype=np.int64) if "delta_cases" in entry else None,
            np.array(entry["delta_deaths"], dtype=np.int64) if "delta_deaths" in entry else None,
            list(entry.get("negative_delta_days", [])))
    return CaseTable(counties, dt.date.fromisoformat(doc["day_zero"]))


def trends_to_json(trends: MobilityTrends) -> str:
    doc = {f"{fips},{day}": vec.tolist() for (fips, day), vec in trends.values.items()}
    return json.dumps(doc, sort_keys=True, indent=1)


def trends_from_json(text: str) -> MobilityTrends:
    doc = json.loads(text)
    values = {}
    for key, vec in doc.items():
        fips, day = key.split(",")
        values[(fips, int(day))] = np.array(vec, dtype=np.float64)
    return MobilityTrends(values)
