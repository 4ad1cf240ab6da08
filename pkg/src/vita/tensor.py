"""Dense tensor math with reverse-mode gradient capture.

Tensors wrap row-major float64 numpy arrays and are immutable by convention.
A :class:`Tape` records the subgraph between one watched activation and a
scalar score; :func:`backward` then walks that subgraph in reverse to produce
the gradient of the score with respect to the watched tensor.  Anything not
reachable from a watched tensor is computed eagerly with zero recording
overhead, so callers pay for gradients only where they asked for them.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ShapeError, TapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TapeNode:
    """One recorded operation: op kind, taped inputs, and a backward rule.

    The backward rule is a closure over the saved forward values; it maps the
    gradient at this node's output to per-input gradient contributions.
    """

    __slots__ = ("op", "inputs", "backward_rule")

    def __init__(self, op: str, inputs: Sequence["TapeNode"],
                 backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_rule = backward_rule


class Tape:
    """Single-use record of operations downstream of watched tensors."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def watch(self, t: "Tensor") -> "Tensor":
        """Return a copy of ``t`` whose downstream operations are recorded."""
        node = TapeNode("watch", (), lambda g: ())
        self.nodes.append(node)
        return Tensor(t.data, tape=self, node=node)

    def _record(self, op: str, inputs: Sequence["Tensor"], backward_rule) -> TapeNode:
        node = TapeNode(op, [i.node for i in inputs if i.node is not None], backward_rule)
        self.nodes.append(node)
        return node


class Tensor:
    """Immutable dense array: a shape plus row-major float64 data.

    Weights may be stored as float32 on disk; promotion to float64 happens
    here at construction so every differentiated path runs in 64-bit.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[TapeNode] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, taped={self.node is not None})"


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_rule) -> Tensor:
    """Wrap an op result, recording it when any input is on a tape."""
    tape = None
    for t in inputs:
        if t.tape is not None:
            tape = t.tape
            break
    if tape is None:
        return Tensor(data)
    # backward_rule receives the output gradient and must return one entry per
    # *taped* input, aligned with the node's input list.
    taped = [t for t in inputs if t.node is not None]
    node = tape._record(op, taped, backward_rule)
    return Tensor(data, tape=tape, node=node)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data
    a_d, b_d = a.data, b.data
    a_taped, b_taped = a.node is not None, b.node is not None

    def rule(g: np.ndarray):
        grads = []
        if a_taped:
            grads.append(g @ b_d.T)
        if b_taped:
            grads.append(a_d.T @ g)
        return grads

    return _result("matmul", out, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a vector broadcast over the rows of a."""
    if a.shape == b.shape:
        out = a.data + b.data
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = a.data + b.data[None, :]
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    a_taped, b_taped = a.node is not None, b.node is not None
    b_shape = b.shape

    def rule(g: np.ndarray):
        grads = []
        if a_taped:
            grads.append(g)
        if b_taped:
            grads.append(g if g.shape == b_shape else g.sum(axis=0))
        return grads

    return _result("add", out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    a_d, b_d = a.data, b.data
    a_taped, b_taped = a.node is not None, b.node is not None

    def rule(g: np.ndarray):
        grads = []
        if a_taped:
            grads.append(g * b_d)
        if b_taped:
            grads.append(g * a_d)
        return grads

    return _result("mul", a_d * b_d, (a, b), rule)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every entry, as a scalar tensor."""
    shape = a.shape
    return _result("sum_all", np.float64(a.data.sum()), (a,),
                   lambda g: (np.full(shape, g),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _result("softmax_rows", p, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    g_d = gamma.data

    def rule(g: np.ndarray):
        dxhat = g * g_d
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (inv * (dxhat - m1 - xhat * m2),)

    return _result("layer_norm", out, (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf
    x_d = x.data

    def rule(g: np.ndarray):
        pdf = np.exp(-0.5 * x_d * x_d) * _INV_SQRT_2PI
        return (g * (phi_cdf + x_d * pdf),)

    return _result("gelu", out, (x,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop].copy()
    full_shape = a.shape

    def rule(g: np.ndarray):
        buf = np.zeros(full_shape)
        buf[:, start:stop] = g
        return (buf,)

    return _result("slice_cols", out, (a,), rule)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop, :].copy()
    full_shape = a.shape

    def rule(g: np.ndarray):
        buf = np.zeros(full_shape)
        buf[start:stop, :] = g
        return (buf,)

    return _result("slice_rows", out, (a,), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]
    taped = [p.node is not None for p in parts]

    def rule(g: np.ndarray):
        grads = []
        offset = 0
        for w, is_taped in zip(widths, taped):
            if is_taped:
                grads.append(g[:, offset:offset + w])
            offset += w
        return grads

    return _result("concat_cols", out, parts, rule)


def select(a: Tensor, i: int, j: int) -> Tensor:
    """Pick a single scalar entry; the usual seed for backward()."""
    out = np.float64(a.data[i, j])
    full_shape = a.shape

    def rule(g: np.ndarray):
        buf = np.zeros(full_shape)
        buf[i, j] = g
        return (buf,)

    return _result("select", out, (a,), rule)


def backward(score: Tensor, target: Tensor) -> Tensor:
    """Gradient of a scalar score with respect to a watched activation.

    Walks the recorded tape in reverse creation order (which is a reverse
    topological order, since the graph was built forward) accumulating
    gradients.  Both tensors must live on the same tape.
    """
    if score.node is None or score.tape is None:
        raise TapeError("backward: score was not recorded on a tape")
    if target.node is None or target.tape is not score.tape:
        raise TapeError("backward: target is not on the score's tape")
    if score.data.ndim != 0:
        raise TapeError(f"backward: score must be scalar, got shape {score.shape}")

    grads: dict[TapeNode, np.ndarray] = {score.node: np.float64(1.0)}
    for node in reversed(score.tape.nodes):
        g = grads.pop(node, None)
        if g is None:
            continue
        if node is target.node:
            grads[node] = g  # keep the answer; watch nodes have no inputs
            continue
        for inp, contrib in zip(node.inputs, node.backward_rule(g)):
            if contrib is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + contrib
            else:
                grads[inp] = contrib

    result = grads.get(target.node)
    if result is None:
        result = np.zeros(target.shape)
    result = np.asarray(result, dtype=np.float64)
    if result.shape != target.data.shape:
        result = np.broadcast_to(result, target.data.shape).copy()
    return Tensor(result)
