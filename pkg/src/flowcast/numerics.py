"""Dense float64 primitives with reverse-mode gradients on a flat tape.

Only the operations the forecasting model actually composes are provided:
affine maps, relu, feature concatenation, inverted dropout, an
embedding-row gather, multiplication by a constant matrix, the squared
log-space loss, and an ADAM update.  Each primitive appends one closure to
a Tape; Tape.backward() replays the closures in exact reverse order,
accumulating into the .grad buffer of every Tensor2 involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class Tensor2:
    """A rows x cols float64 array paired with a same-shape gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"Tensor2 requires a non-empty 2-D array, got shape {arr.shape}")
        self.value = arr
        self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def record(self, backward: Callable[[], None]) -> None:
        self._steps.append(backward)

    def backward(self) -> None:
        """Run every recorded backward step in reverse order."""
        for step in reversed(self._steps):
            step()


def affine(tape: Tape, x: Tensor2, w: Tensor2, b: Tensor2) -> Tensor2:
    """y = x @ w + b, with b a single broadcast row."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine: inner dimensions disagree, {x.shape} @ {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise ValueError(f"affine: bias must have shape (1, {w.shape[1]}), got {b.shape}")
    out = Tensor2(x.value @ w.value + b.value)

    def backward():
        x.grad += out.grad @ w.value.T
        w.grad += x.value.T @ out.grad
        b.grad += out.grad.sum(axis=0, keepdims=True)

    tape.record(backward)
    return out


def relu(tape: Tape, x: Tensor2) -> Tensor2:
    out = Tensor2(np.maximum(x.value, 0.0))

    def backward():
        x.grad += out.grad * (x.value > 0.0)

    tape.record(backward)
    return out


def concat(tape: Tape, a: Tensor2, b: Tensor2) -> Tensor2:
    """Concatenate along the feature axis (columns)."""
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat: row counts disagree, {a.shape} vs {b.shape}")
    out = Tensor2(np.hstack([a.value, b.value]))
    split = a.shape[1]

    def backward():
        a.grad += out.grad[:, :split]
        b.grad += out.grad[:, split:]

    tape.record(backward)
    return out


def dropout(tape: Tape, x: Tensor2, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor2:
    """Inverted dropout: survivors are scaled by 1/(1-rate), eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    out = Tensor2(x.value * mask)

    def backward():
        x.grad += out.grad * mask

    tape.record(backward)
    return out


def gather_rows(tape: Tape, table: Tensor2, indices: np.ndarray) -> Tensor2:
    """Select rows of an embedding table; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor2(table.value[idx])

    def backward():
        np.add.at(table.grad, idx, out.grad)

    tape.record(backward)
    return out


def left_matmul(tape: Tape, matrix: np.ndarray, x: Tensor2) -> Tensor2:
    """y = M @ x for a constant matrix M; gradients flow to x only."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"left_matmul: dimensions disagree, {m.shape} @ {x.shape}")
    out = Tensor2(m @ x.value)

    def backward():
        x.grad += m.T @ out.grad

    tape.record(backward)
    return out


def msle_loss(tape: Tape, pred_log: Tensor2, target_delta: np.ndarray) -> float:
    """Mean squared error between pred_log and log1p(max(0, target)).

    pred_log is interpreted directly in log1p-delta space, so this equals
    the MSLE of the implied raw delta.  Negative targets (reporting
    corrections) are clamped to zero before the log transform.
    """
    target = np.asarray(target_delta, dtype=np.float64).reshape(pred_log.shape)
    t = np.log1p(np.maximum(target, 0.0))
    diff = pred_log.value - t
    loss = float(np.mean(diff * diff))

    def backward():
        pred_log.grad += (2.0 / diff.size) * diff

    tape.record(backward)
    return loss


@dataclass
class AdamState:
    """ADAM accumulators; moments are created lazily per parameter name."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor2], state: AdamState, l2: float = 0.0,
              decay_keys: Iterable[str] = ()) -> None:
    """One ADAM update over named parameters, in place.

    l2 augments the gradient with 2*l2*value, but only for names in
    decay_keys (weight matrices; biases and embeddings are exempt).
    """
    decay = frozenset(decay_keys)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if l2 != 0.0 and name in decay:
            g = g + 2.0 * l2 * p.value
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter '{name}' at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
