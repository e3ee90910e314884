"""Skip-connection graph convolutional forecaster.

Per day, every county node carries a temporal feature window plus learned
county/state embeddings.  A first MLP embeds those into H0 (width 64); each
of the two spatial hops mixes node states through the normalized layer
matrix and concatenates H0 back on (widths 32 + 64), which keeps the seed
node's own state from washing out; a final MLP (hidden width 32) maps the
second hop to one scalar per node.  The scalar lives in log1p-delta space:
training minimizes squared error against log1p(max(0, next-day delta)),
which is the MSLE of the implied raw delta, and forecasting inverts with
expm1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics
from .numerics import AdamState, Tape, Tensor2, adam_step, msle_loss
from .st_graph import STGraph

EMB_DIM = 8
HIDDEN_WIDTHS = (64, 32, 32, 32)

# Weight matrices get l2 decay; biases and embedding tables do not.
WEIGHT_KEYS = ("w0", "w1", "w2", "w3", "w_out")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    dropout: float = 0.5
    l2: float = 5e-4
    d: int = 7
    k: int = 32
    hops: int = 2
    max_steps: int = 20_000
    train_days: tuple[int, int] = (59, 120)
    test_days: tuple[int, int] = (120, 150)
    seed: int = 0
    eval_county_count: int = 20

    def __post_init__(self):
        if self.hops != 2:
            raise ValueError("the architecture is fixed at 2 spatial hops")
        if self.train_days[1] > self.test_days[0]:
            raise ValueError("training and test windows must be disjoint")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["train_days"] = list(self.train_days)
        doc["test_days"] = list(self.test_days)
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        kwargs = dict(doc)
        for key in ("train_days", "test_days"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor2]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor2:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def to_json(self) -> str:
        doc = {name: {"shape": list(t.shape), "values": t.value.ravel().tolist()}
               for name, t in self.tensors.items()}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        doc = json.loads(text)
        tensors = {}
        for name in sorted(doc):
            entry = doc[name]
            tensors[name] = Tensor2(np.array(entry["values"]).reshape(entry["shape"]))
        return cls(tensors)


def init_params(n_counties: int, n_states: int, feature_dim: int,
                seed: int = 0) -> ModelParams:
    """Seeded uniform initialization in +-sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    w0_in = feature_dim + 2 * EMB_DIM
    h0, h1, h2, h3 = HIDDEN_WIDTHS
    hop_in = h1 + h0  # each hop output is re-concatenated with H0
    shapes = [
        ("county_emb", (n_counties, EMB_DIM)),
        ("state_emb", (n_states, EMB_DIM)),
        ("w0", (w0_in, h0)), ("b0", (1, h0)),
        ("w1", (h0, h1)), ("b1", (1, h1)),
        ("w2", (hop_in, h2)), ("b2", (1, h2)),
        ("w3", (hop_in, h3)), ("b3", (1, h3)),
        ("w_out", (h3, 1)), ("b_out", (1, 1)),
    ]
    tensors = {}
    for name, shape in shapes:
        if name.startswith("b"):
            tensors[name] = Tensor2(np.zeros(shape))
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = Tensor2(rng.uniform(-limit, limit, shape))
    return ModelParams(tensors)


def _forward(graph: STGraph, day: int, params: ModelParams, tape: Tape,
             rng: np.random.Generator | None, dropout_rate: float,
             training: bool) -> Tensor2:
    a_hat = graph.adjacency(day)
    x = Tensor2(graph.feature_matrix(day))
    n = x.shape[0]

    def drop(t: Tensor2) -> Tensor2:
        return numerics.dropout(tape, t, dropout_rate, rng, training)

    county = numerics.gather_rows(tape, params["county_emb"], np.arange(n))
    state = numerics.gather_rows(tape, params["state_emb"], graph.state_ids)
    h = numerics.concat(tape, numerics.concat(tape, x, county), state)

    h0 = drop(relu_affine(tape, h, params, "0"))
    s1 = relu_affine(tape, numerics.left_matmul(tape, a_hat, h0), params, "1")
    h1 = drop(numerics.concat(tape, s1, h0))
    s2 = relu_affine(tape, numerics.left_matmul(tape, a_hat, h1), params, "2")
    h2 = drop(numerics.concat(tape, s2, h0))
    h3 = drop(relu_affine(tape, h2, params, "3"))
    return numerics.affine(tape, h3, params["w_out"], params["b_out"])


def relu_affine(tape: Tape, x: Tensor2, params: ModelParams, idx: str) -> Tensor2:
    return numerics.relu(tape, numerics.affine(tape, x, params[f"w{idx}"], params[f"b{idx}"]))


def forward(graph: STGraph, day: int, params: ModelParams, mode: str = "eval",
            seed: int = 0, dropout_rate: float = 0.5) -> np.ndarray:
    """Per-node prediction in log1p-delta space for one day.

    Requires a complete feature window at `day` (guaranteed inside the
    graph span).  In train mode, dropout masks come from `seed`.
    """
    if day not in graph.layers:
        raise ValueError(f"day {day} outside the graph span {graph.span}")
    training = mode == "train"
    rng = np.random.default_rng(seed) if training else None
    tape = Tape()
    out = _forward(graph, day, params, tape, rng, dropout_rate, training)
    return out.value[:, 0].copy()


def l2_penalty(params: ModelParams, l2: float) -> float:
    return l2 * sum(float(np.sum(params[k].value ** 2)) for k in WEIGHT_KEYS)


def train(graph: STGraph, config: TrainConfig) -> tuple[ModelParams, list[tuple[int, float]]]:
    """Train on uniformly sampled training days; returns params and loss history.

    Each step runs one full-graph forward pass at a sampled day t, scores
    the predictions against the day t+1 deltas, and applies one ADAM
    update.  The recorded loss includes the l2 penalty.  Fully
    deterministic for a fixed config.seed.
    """
    lo, hi = config.train_days
    first = lo + config.d
    if hi <= first:
        raise ValueError(f"training window {config.train_days} leaves no sampled days")
    for day in (first, hi - 1):
        if day not in graph.layers:
            raise ValueError(f"graph span {graph.span} does not cover training day {day}")
    if hi >= graph.deltas.shape[1]:
        raise ValueError("case table does not cover the training targets")

    rng = np.random.default_rng(config.seed)
    params = init_params(graph.n_nodes, graph.n_states,
                         graph.feature_matrix(graph.span[0]).shape[1],
                         seed=int(rng.integers(2**32)))
    state = AdamState(lr=config.lr)
    days = np.arange(first, hi)
    history: list[tuple[int, float]] = []

    for step in range(config.max_steps):
        day = int(days[rng.integers(days.size)])
        params.zero_grads()
        tape = Tape()
        pred = _forward(graph, day, params, tape, rng, config.dropout, training=True)
        loss = msle_loss(tape, pred, graph.delta_at(day + 1))
        total = loss + l2_penalty(params, config.l2)
        if not np.isfinite(total):
            raise RuntimeError(f"non-finite loss {total} at step {step} (day {day})")
        if step % 100 == 0:
            history.append((step, total))
        tape.backward()
        adam_step(params.tensors, state, l2=config.l2, decay_keys=WEIGHT_KEYS)
    return params, history


def forecast(params: ModelParams, graph: STGraph, day: int,
             dropout_rate: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Next-day (caseload, delta) per county from the day-`day` node states.

    The raw prediction is clamped through expm1 to a non-negative delta, so
    the predicted caseload never falls below the current day's count.
    """
    if day + 1 >= graph.cums.shape[1]:
        raise ValueError(f"day {day}+1 outside the case-table range")
    p = forward(graph, day, params, mode="eval", dropout_rate=dropout_rate)
    delta = np.maximum(np.expm1(p), 0.0)
    caseload = graph.cum_at(day) + delta
    return caseload, delta
