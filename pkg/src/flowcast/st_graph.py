"""Layered county graph: daily spatial adjacency from flows plus feature windows.

Each day gets one layer whose directed edge j -> i carries the published
flow from origin j into destination i, normalized by i's intra-county flow.
Only the k strongest in-edges per destination survive pruning.  The layer
matrix used by the model is the symmetric normalization
D^{-1/2} (A_sym + I) D^{-1/2} with A_sym = (A + A^T) / 2, which is symmetric
with spectral radius 1.  Temporal structure is carried by the per-node
feature windows rather than by extra edges.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_ingest
from .data_ingest import CaseTable, MobilityTrends, build_features, feature_stats
from .dp_mobility import FlowTable


@dataclass(eq=False)
class DayLayer:
    """Pruned weighted adjacency for one day; edges are (origin, dest, weight)."""

    day: int
    nodes: list[str]
    edges: list[tuple[str, str, float]]
    adjacency_norm: np.ndarray | None = None


def spatial_weight(flow_in: float, intra_flow: float) -> float:
    """Edge weight = incoming flow over the destination's intra-county flow.

    A suppressed (zero) intra-flow falls back to a denominator of 1 so the
    ordering of incoming edges is preserved.
    """
    if flow_in < 0 or intra_flow < 0:
        raise ValueError(f"negative flow: flow_in={flow_in}, intra={intra_flow}")
    return flow_in / max(intra_flow, 1.0)


def build_layer(flows: FlowTable, day: int, nodes: list[str], k: int = 32) -> DayLayer:
    """One day's pruned spatial layer over the given node universe.

    Weekly flows are broadcast to each day of the week (week = day // 7,
    falling back to the nearest earlier week with data).  Each destination
    keeps its k highest-weight in-edges; ties at the cutoff prefer the
    smaller origin fips.
    """
    if day < 0:
        raise ValueError(f"day {day} outside span")
    node_set = set(nodes)
    week = flows.resolve_week(day // 7)
    edges: list[tuple[str, str, float]] = []
    if week is not None:
        for dest in nodes:
            intra = flows.intra(dest, week)
            incoming = []
            for r in flows.in_edges(dest, week):
                if r.origin_fips not in node_set or r.count <= 0:
                    continue
                incoming.append((r.origin_fips, spatial_weight(r.count, intra)))
            incoming.sort(key=lambda e: (-e[1], e[0]))
            edges.extend((origin, dest, w) for origin, w in incoming[:k])
    edges.sort(key=lambda e: (e[1], -e[2], e[0]))
    return DayLayer(day, list(nodes), edges)


def normalize_adjacency(layer: DayLayer) -> np.ndarray:
    """Symmetric normalization of the layer's adjacency, self-loops included.

    Isolated nodes reduce to an identity row/column.
    """
    n = len(layer.nodes)
    index = {f: i for i, f in enumerate(layer.nodes)}
    a = np.zeros((n, n))
    for origin, dest, w in layer.edges:
        a[index[dest], index[origin]] = w
    a_sym = 0.5 * (a + a.T)
    m = a_sym + np.eye(n)
    d_inv_sqrt = 1.0 / np.sqrt(m.sum(axis=1))
    return d_inv_sqrt[:, None] * m * d_inv_sqrt[None, :]


@dataclass(eq=False)
class STGraph:
    """Immutable bundle of day layers, feature windows, and target series.

    raw_features[day] is the (n_nodes, feature_dim) matrix of unscaled
    feature vectors in fips order; feature_matrix applies the stored
    training-window standardization.  deltas/cums index [node, day] over
    the full case-table range so windows and targets can reach outside the
    layer span.
    """

    span: tuple[int, int]
    fips: list[str]
    state_ids: np.ndarray
    layers: dict[int, DayLayer]
    raw_features: dict[int, np.ndarray]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    deltas: np.ndarray
    cums: np.ndarray
    d: int = 7
    k: int = 32
    train_days: tuple[int, int] = (59, 120)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.fips)

    @property
    def n_states(self) -> int:
        return int(self.state_ids.max()) + 1

    def adjacency(self, day: int) -> np.ndarray:
        return self.layers[day].adjacency_norm

    def feature_matrix(self, day: int) -> np.ndarray:
        cached = self._cache.get(day)
        if cached is None:
            cached = (self.raw_features[day] - self.feature_mean) / self.feature_std
            self._cache[day] = cached
        return cached

    def delta_at(self, day: int) -> np.ndarray:
        if day < 0 or day >= self.deltas.shape[1]:
            raise ValueError(f"day {day} outside the case-table range")
        return self.deltas[:, day]

    def cum_at(self, day: int) -> np.ndarray:
        if day < 0 or day >= self.cums.shape[1]:
            raise ValueError(f"day {day} outside the case-table range")
        return self.cums[:, day]


def build_graph(cases: CaseTable, trends: MobilityTrends, flows: FlowTable,
                span: tuple[int, int], d: int = 7, k: int = 32,
                train_days: tuple[int, int] = (59, 120)) -> STGraph:
    """Assemble the full layered graph over span = (first_day, last_day).

    Normalization statistics come from the train_days window only (clipped
    to days whose feature windows exist) and are frozen into the graph.
    """
    start, end = span
    if end < start:
        raise ValueError(f"empty span {span}")
    if start < d:
        raise ValueError(f"span start {start} leaves no {d}-day feature window")

    nodes = cases.fips
    state_ids = np.array([cases.counties[f].state_id for f in nodes], dtype=np.intp)

    available = set(flows.weeks)
    missing = sorted({day // 7 for day in range(start, end + 1)} - available)
    if missing and available:
        warnings.warn(f"no flow data for weeks {missing}; reusing the nearest earlier week")
    elif not available:
        warnings.warn("flow table is empty; all layers will be edge-free")

    layers: dict[int, DayLayer] = {}
    raw_features: dict[int, np.ndarray] = {}
    for day in range(start, end + 1):
        layer = build_layer(flows, day, nodes, k)
        layer.adjacency_norm = normalize_adjacency(layer)
        layers[day] = layer
        raw_features[day] = np.stack([
            build_features(cases, trends, flows, f, day, d, span).vector()
            for f in nodes])

    stat_days = range(max(train_days[0], d), train_days[1])
    if len(stat_days) == 0:
        raise ValueError(f"training window {train_days} has no usable days")
    mean, std = feature_stats(cases, trends, flows, nodes, stat_days, d, span)

    last_day = max(end + 1, cases.last_day)
    deltas = np.zeros((len(nodes), last_day + 1))
    cums = np.zeros((len(nodes), last_day + 1))
    for i, f in enumerate(nodes):
        for day in range(last_day + 1):
            deltas[i, day] = cases.delta(f, day)
            cums[i, day] = cases.cum(f, day)

    return STGraph(span, nodes, state_ids, layers, raw_features, mean, std,
                   deltas, cums, d, k, train_days)


def save_graph(graph: STGraph, out_dir) -> None:
    """Write the graph bundle: JSON index plus per-layer edge lists."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {
        "span": list(graph.span),
        "fips": graph.fips,
        "state_ids": graph.state_ids.tolist(),
        "d": graph.d,
        "k": graph.k,
        "train_days": list(graph.train_days),
        "feature_mean": graph.feature_mean.tolist(),
        "feature_std": graph.feature_std.tolist(),
    }
    (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    layers = {str(day): [[o, dst, w] for o, dst, w in layer.edges]
              for day, layer in graph.layers.items()}
    (out / "layers.json").write_text(json.dumps(layers, sort_keys=True))
    features = {str(day): mat.tolist() for day, mat in graph.raw_features.items()}
    (out / "features.json").write_text(json.dumps(features, sort_keys=True))
    series = {"deltas": graph.deltas.tolist(), "cums": graph.cums.tolist()}
    (out / "series.json").write_text(json.dumps(series, sort_keys=True))


def load_graph(in_dir) -> STGraph:
    src = Path(in_dir)
    index = json.loads((src / "index.json").read_text())
    layer_doc = json.loads((src / "layers.json").read_text())
    features_doc = json.loads((src / "features.json").read_text())
    series = json.loads((src / "series.json").read_text())

    fips = list(index["fips"])
    layers = {}
    for day_str, edges in layer_doc.items():
        day = int(day_str)
        layer = DayLayer(day, fips, [(o, dst, float(w)) for o, dst, w in edges])
        layer.adjacency_norm = normalize_adjacency(layer)
        layers[day] = layer
    raw_features = {int(day): np.array(mat) for day, mat in features_doc.items()}
    return STGraph(tuple(index["span"]), fips, np.array(index["state_ids"], dtype=np.intp),
                   layers, raw_features,
                   np.array(index["feature_mean"]), np.array(index["feature_std"]),
                   np.array(series["deltas"]), np.array(series["cums"]),
                   index["d"], index["k"], tuple(index["train_days"]))


def parse_date_span(start: str, end: str) -> tuple[int, int]:
    """Convert ISO date strings to the inclusive day-index span."""
    import datetime as dt
    s = data_ingest.day_index(dt.date.fromisoformat(start))
    e = data_ingest.day_index(dt.date.fromisoformat(end))
    return (s, e)
