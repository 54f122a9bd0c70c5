"""Reverse-mode automatic differentiation on an explicit tape.

Provides exactly the operations the encoder and its losses need: matmul,
same-shape elementwise arithmetic, relu, scalar scaling, row-broadcast bias
addition, transpose, sum, column standardization and cross-entropy. All math
is float64 numpy; there is no implicit broadcasting beyond scalar * tensor,
so every shape alignment is an explicit, auditable operation.

A finite-difference gradient checker (`grad_check`) doubles as the
verification harness for every backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    LabelError,
    ShapeError,
    TapeReuseError,
)

# Single switch for the working precision. float64 keeps finite-difference
# checks tight; flipping to float32 is allowed but untested.
DTYPE = np.float64


class Tensor:
    """Dense n-dimensional float array with optional gradient accumulation.

    `data` is always C-contiguous (row-major) float64. `grad`, once populated
    by a backward pass, has the same shape as `data`. Gradients accumulate
    across backward passes until explicitly zeroed by the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C", not ascontiguousarray: the latter would
        # promote 0-d (scalar) values to shape (1,).
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation: kind, input tensors, output, saved values."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


def _check_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


class Tape:
    """Ordered record of operations; consumed exactly once by backward().

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    # -- recording ---------------------------------------------------------

    def _emit(self, kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
              **ctx) -> Tensor:
        out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(Node(kind, inputs, out, ctx))
        self._produced.add(id(out))
        return out

    # -- operations --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix product of a 2-d pair; inner dimensions must match."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
        return self._emit("matmul", (a, b), a.data @ b.data)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same_shape("add", a, b)
        return self._emit("add", (a, b), a.data + b.data)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _check_same_shape("sub", a, b)
        return self._emit("sub", (a, b), a.data - b.data)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise (Hadamard) product."""
        _check_same_shape("mul", a, b)
        return self._emit("mul", (a, b), a.data * b.data)

    def relu(self, a: Tensor) -> Tensor:
        """max(x, 0); the subgradient at 0 is taken as 0."""
        return self._emit("relu", (a,), np.maximum(a.data, 0.0))

    def scale(self, a: Tensor, c: float) -> Tensor:
        """Scalar times tensor, the only sanctioned broadcast."""
        c = float(c)
        return self._emit("scale", (a,), a.data * c, c=c)

    def add_row(self, a: Tensor, b: Tensor) -> Tensor:
        """Add a length-m row vector to every row of an n x m matrix.

        This is the explicit stand-in for bias broadcasting; backward sums
        the upstream gradient over rows.
        """
        if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"add_row: incompatible shapes {a.shape} + {b.shape}")
        return self._emit("add_row", (a, b), a.data + b.data[None, :])

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")
        return self._emit("transpose", (a,), np.ascontiguousarray(a.data.T))

    def sum(self, a: Tensor) -> Tensor:
        """Sum of all entries, as a 0-d scalar tensor."""
        return self._emit("sum", (a,), np.asarray(a.data.sum()))

    def standardize_columns(self, z: Tensor, eps: float) -> Tensor:
        """Center and scale each column: (z - mean) / (population std + eps).

        Needs at least two rows; a zero-variance column maps to zeros (eps
        keeps the division finite).
        """
        if z.data.ndim != 2:
            raise ShapeError(f"standardize_columns: expected 2-d input, got {z.shape}")
        n = z.shape[0]
        if n < 2:
            raise DegenerateBatchError(
                f"standardize_columns: need at least 2 rows, got {n}")
        mu = z.data.mean(axis=0)
        centered = z.data - mu[None, :]
        sigma = np.sqrt(np.mean(centered * centered, axis=0))
        denom = sigma + float(eps)
        out = centered / denom[None, :]
        return self._emit("standardize", (z,), out,
                          centered=centered, sigma=sigma, denom=denom)

    def cross_entropy(self, logits: Tensor, labels: Sequence[int]) -> Tensor:
        """Mean negative log-softmax of the labelled class, max-stabilized."""
        if logits.data.ndim != 2:
            raise ShapeError(f"cross_entropy: expected 2-d logits, got {logits.shape}")
        n, k = logits.shape
        labels = [int(y) for y in labels]
        if len(labels) != n:
            raise ShapeError(
                f"cross_entropy: {n} logit rows but {len(labels)} labels")
        for y in labels:
            if not 0 <= y < k:
                raise LabelError(f"cross_entropy: label {y} outside [0, {k})")
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsumexp
        rows = np.arange(n)
        loss = -logp[rows, labels].mean()
        return self._emit("cross_entropy", (logits,), np.asarray(loss),
                          probs=np.exp(logp), labels=labels)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every requires_grad tensor reachable from loss.

        The tape is single-use: a second call raises TapeReuseError.
        """
        if self._consumed:
            raise TapeReuseError("backward() already consumed this tape")
        if id(loss) not in self._produced:
            raise ContractError("backward: loss was not produced on this tape")
        if loss.data.shape != ():
            raise ContractError(
                f"backward: loss must be a scalar, got shape {loss.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None or not node.output.requires_grad:
                continue
            _BACKWARD[node.kind](node, g, grads)

        # Flush accumulated gradients into the tensors themselves; any
        # requires_grad tensor on the tape that the loss never touched gets
        # an all-zero gradient.
        flushed: set[int] = set()
        for node in self.nodes:
            for t in (*node.inputs, node.output):
                if not t.requires_grad or id(t) in flushed:
                    continue
                flushed.add(id(t))
                delta = grads.get(id(t))
                if delta is None:
                    contrib = np.zeros_like(t.data)
                else:
                    contrib = np.array(np.broadcast_to(delta, t.data.shape),
                                       dtype=DTYPE)
                t.grad = contrib if t.grad is None else t.grad + contrib


def _acc(grads: dict[int, np.ndarray], t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    prev = grads.get(id(t))
    grads[id(t)] = delta if prev is None else prev + delta


def _bw_matmul(node: Node, g, grads):
    a, b = node.inputs
    _acc(grads, a, g @ b.data.T)
    _acc(grads, b, a.data.T @ g)


def _bw_add(node: Node, g, grads):
    a, b = node.inputs
    _acc(grads, a, g)
    _acc(grads, b, g)


def _bw_sub(node: Node, g, grads):
    a, b = node.inputs
    _acc(grads, a, g)
    _acc(grads, b, -g)


def _bw_mul(node: Node, g, grads):
    a, b = node.inputs
    _acc(grads, a, g * b.data)
    _acc(grads, b, g * a.data)


def _bw_relu(node: Node, g, grads):
    (a,) = node.inputs
    _acc(grads, a, g * (a.data > 0.0))


def _bw_scale(node: Node, g, grads):
    (a,) = node.inputs
    _acc(grads, a, g * node.ctx["c"])


def _bw_add_row(node: Node, g, grads):
    a, b = node.inputs
    _acc(grads, a, g)
    _acc(grads, b, g.sum(axis=0))


def _bw_transpose(node: Node, g, grads):
    (a,) = node.inputs
    _acc(grads, a, np.ascontiguousarray(g.T))


def _bw_sum(node: Node, g, grads):
    (a,) = node.inputs
    _acc(grads, a, np.broadcast_to(g, a.data.shape).copy())


def _bw_standardize(node: Node, g, grads):
    # out = c / d with c = z - mean(z), d = sigma + eps. Per column:
    #   dL/dz = (g - mean(g)) / d  -  c * sum(g * c) / (n * sigma * d^2)
    # The second term vanishes for constant columns (c == 0 there).
    (z,) = node.inputs
    c = node.ctx["centered"]
    sigma = node.ctx["sigma"]
    d = node.ctx["denom"]
    n = z.shape[0]
    term1 = (g - g.mean(axis=0)[None, :]) / d[None, :]
    dot = (g * c).sum(axis=0)
    scale = np.divide(dot, n * sigma * d * d,
                      out=np.zeros_like(dot), where=sigma > 0.0)
    _acc(grads, z, term1 - c * scale[None, :])


def _bw_cross_entropy(node: Node, g, grads):
    (logits,) = node.inputs
    probs = node.ctx["probs"]
    labels = node.ctx["labels"]
    n = probs.shape[0]
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    _acc(grads, logits, (float(g) / n) * delta)


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "relu": _bw_relu,
    "scale": _bw_scale,
    "add_row": _bw_add_row,
    "transpose": _bw_transpose,
    "sum": _bw_sum,
    "standardize": _bw_standardize,
    "cross_entropy": _bw_cross_entropy,
}


def grad_check(fn: Callable[[Tape, Tensor], Tensor], point: Tensor,
               step: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    `fn` builds a scalar loss from a single tensor on the tape it is given.
    Returns the maximum over coordinates of
        |analytic - numeric| / max(1e-12, |analytic| + |numeric|);
    any NaN anywhere is reported as +inf.
    """
    if step <= 0:
        raise ContractError(f"grad_check: step must be positive, got {step}")

    tape = Tape()
    x = Tensor(point.data.copy(), requires_grad=True)
    loss = fn(tape, x)
    if loss.data.shape != ():
        raise ContractError("grad_check: fn must return a scalar")
    tape.backward(loss)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel()

    flat = point.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = float(fn(Tape(), Tensor(bumped.reshape(point.shape))).data)
        bumped[i] = flat[i] - step
        f_minus = float(fn(Tape(), Tensor(bumped.reshape(point.shape))).data)
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return math.inf
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
