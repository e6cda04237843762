"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is a static graph: nodes are appended symbolically, then
:meth:`Tape.forward` evaluates them in append order for a set of input
bindings and :meth:`Tape.backward` walks the same list in reverse.  The same
tape can be re-run for every minibatch.

Example
-------
>>> tape = Tape()
>>> x = tape.input("x")
>>> y = tape.mul(x, x)
>>> float(tape.forward({"x": np.array([[3.0]])})[0, 0])
9.0
>>> float(tape.backward()["x"][0, 0])
6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, FloatingPointError):
    pass


class UsageError(AutodiffError, RuntimeError):
    pass


@dataclass
class Node:
    index: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label}>"


def _as2d(value, name) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"input {name!r} must be 2-D, got shape {arr.shape}")
    return arr


# Each op: forward(values, attrs, ctx) -> out ; backward(g, values, out, attrs, ctx) -> grads
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def register(pair_factory):
        _OPS[name] = pair_factory()
        return pair_factory

    return register


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


@_op("matmul")
def _matmul():
    def fwd(v, attrs, ctx):
        a, b = v
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return a @ b

    def bwd(g, v, out, attrs, ctx):
        a, b = v
        return g @ b.T, a.T @ g

    return fwd, bwd


@_op("add")
def _add():
    def fwd(v, attrs, ctx):
        _same_shape(v[0], v[1], "add")
        return v[0] + v[1]

    def bwd(g, v, out, attrs, ctx):
        return g, g

    return fwd, bwd


@_op("sub")
def _sub():
    def fwd(v, attrs, ctx):
        _same_shape(v[0], v[1], "sub")
        return v[0] - v[1]

    def bwd(g, v, out, attrs, ctx):
        return g, -g

    return fwd, bwd


@_op("mul")
def _mul():
    def fwd(v, attrs, ctx):
        _same_shape(v[0], v[1], "mul")
        return v[0] * v[1]

    def bwd(g, v, out, attrs, ctx):
        return g * v[1], g * v[0]

    return fwd, bwd


@_op("add_bias")
def _add_bias():
    # the only broadcasting op: (n, k) + (1, k)
    def fwd(v, attrs, ctx):
        a, b = v
        if b.shape != (1, a.shape[1]):
            raise ShapeError(f"add_bias: bias {b.shape} does not fit rows {a.shape}")
        return a + b

    def bwd(g, v, out, attrs, ctx):
        return g, g.sum(axis=0, keepdims=True)

    return fwd, bwd


@_op("scale")
def _scale():
    def fwd(v, attrs, ctx):
        return v[0] * attrs["c"]

    def bwd(g, v, out, attrs, ctx):
        return (g * attrs["c"],)

    return fwd, bwd


@_op("leaky_relu")
def _leaky_relu():
    def fwd(v, attrs, ctx):
        x = v[0]
        return np.where(x > 0, x, attrs["slope"] * x)

    def bwd(g, v, out, attrs, ctx):
        return (np.where(v[0] > 0, g, attrs["slope"] * g),)

    return fwd, bwd


@_op("tanh")
def _tanh():
    def fwd(v, attrs, ctx):
        return np.tanh(v[0])

    def bwd(g, v, out, attrs, ctx):
        return (g * (1.0 - out * out),)

    return fwd, bwd


@_op("exp")
def _exp():
    def fwd(v, attrs, ctx):
        return np.exp(v[0])

    def bwd(g, v, out, attrs, ctx):
        return (g * out,)

    return fwd, bwd


@_op("log")
def _log():
    def fwd(v, attrs, ctx):
        if np.any(v[0] <= 0):
            raise NumericError("log of non-positive value")
        return np.log(v[0])

    def bwd(g, v, out, attrs, ctx):
        return (g / v[0],)

    return fwd, bwd


@_op("square")
def _square():
    def fwd(v, attrs, ctx):
        return v[0] * v[0]

    def bwd(g, v, out, attrs, ctx):
        return (2.0 * g * v[0],)

    return fwd, bwd


@_op("abs")
def _abs():
    def fwd(v, attrs, ctx):
        return np.abs(v[0])

    def bwd(g, v, out, attrs, ctx):
        return (g * np.sign(v[0]),)

    return fwd, bwd


@_op("sin")
def _sin():
    def fwd(v, attrs, ctx):
        return np.sin(v[0])

    def bwd(g, v, out, attrs, ctx):
        return (g * np.cos(v[0]),)

    return fwd, bwd


@_op("sum")
def _sum():
    def fwd(v, attrs, ctx):
        return np.array([[v[0].sum()]])

    def bwd(g, v, out, attrs, ctx):
        return (np.full_like(v[0], g[0, 0]),)

    return fwd, bwd


@_op("mean")
def _mean():
    def fwd(v, attrs, ctx):
        if v[0].size == 0:
            raise ShapeError("mean of empty array")
        return np.array([[v[0].mean()]])

    def bwd(g, v, out, attrs, ctx):
        return (np.full_like(v[0], g[0, 0] / v[0].size),)

    return fwd, bwd


@_op("sum_cols")
def _sum_cols():
    def fwd(v, attrs, ctx):
        return v[0].sum(axis=1, keepdims=True)

    def bwd(g, v, out, attrs, ctx):
        return (np.broadcast_to(g, v[0].shape).copy(),)

    return fwd, bwd


@_op("softmax_rows")
def _softmax_rows():
    def fwd(v, attrs, ctx):
        z = v[0] - v[0].max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def bwd(g, v, out, attrs, ctx):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return fwd, bwd


@_op("dropout")
def _dropout():
    def fwd(v, attrs, ctx):
        rate = attrs["rate"]
        if not ctx["train"] or rate == 0.0:
            ctx["mask"] = None
            return v[0]
        rng = ctx["rng"]
        if rng is None:
            raise UsageError("dropout in train mode needs an rng")
        keep = rng.random(v[0].shape) >= rate
        mask = keep / (1.0 - rate)
        ctx["mask"] = mask
        return v[0] * mask

    def bwd(g, v, out, attrs, ctx):
        mask = ctx.get("mask")
        return (g if mask is None else g * mask,)

    return fwd, bwd


@_op("gather_rows")
def _gather_rows():
    # inputs: (table, index); the index is an integer input and gets no gradient
    def fwd(v, attrs, ctx):
        table, idx = v
        return table[idx]

    def bwd(g, v, out, attrs, ctx):
        table, idx = v
        grad = np.zeros_like(table)
        np.add.at(grad, idx, g)
        return grad, None

    return fwd, bwd


@_op("slice_cols")
def _slice_cols():
    def fwd(v, attrs, ctx):
        a = v[0]
        start, stop = attrs["start"], attrs["stop"]
        if stop > a.shape[1]:
            raise ShapeError(f"slice_cols [{start}:{stop}] beyond {a.shape[1]} columns")
        return a[:, start:stop]

    def bwd(g, v, out, attrs, ctx):
        grad = np.zeros_like(v[0])
        grad[:, attrs["start"]:attrs["stop"]] = g
        return (grad,)

    return fwd, bwd


@_op("segment_matmul")
def _segment_matmul():
    """Row-dependent weights: out[i] = h[i] @ W[seg[i]].reshape(n_in, n_out).

    ``W`` holds one flattened (row-major) weight matrix per segment.  Rows are
    scattered into a zero-padded (segments, rows, n_in) block so the product
    is a single batched matmul.
    """

    def fwd(v, attrs, ctx):
        h, w, seg = v
        n_in, n_out = attrs["n_in"], attrs["n_out"]
        if h.shape[1] != n_in or w.shape[1] != n_in * n_out:
            raise ShapeError(
                f"segment_matmul: rows {h.shape}, weights {w.shape}, expected {n_in}->{n_out}"
            )
        seg = seg.astype(np.int64)
        n_seg = w.shape[0]
        counts = np.bincount(seg, minlength=n_seg)
        order = np.argsort(seg, kind="stable")
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        pos = np.empty(len(seg), dtype=np.int64)
        pos[order] = np.arange(len(seg)) - np.repeat(starts, counts)
        width = int(counts.max()) if len(seg) else 0
        block = np.zeros((n_seg, width, n_in))
        block[seg, pos] = h
        wm = w.reshape(n_seg, n_in, n_out)
        outb = block @ wm
        ctx["layout"] = (seg, pos, block)
        return outb[seg, pos]

    def bwd(g, v, out, attrs, ctx):
        h, w, _ = v
        n_in, n_out = attrs["n_in"], attrs["n_out"]
        seg, pos, block = ctx["layout"]
        n_seg = w.shape[0]
        gb = np.zeros((n_seg, block.shape[1], n_out))
        gb[seg, pos] = g
        wm = w.reshape(n_seg, n_in, n_out)
        dw = np.swapaxes(block, 1, 2) @ gb
        dh = (gb @ np.swapaxes(wm, 1, 2))[seg, pos]
        return dh, dw.reshape(n_seg, n_in * n_out), None

    return fwd, bwd


class Tape:
    """Append-only graph of primitive ops over 2-D float64 arrays.

    Inputs are named leaves.  Float inputs receive gradients; inputs declared
    with ``index=True`` carry integer row indices and receive none.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self._index_inputs: set[str] = set()
        self.check_finite = check_finite
        self._values: list | None = None
        self._ctx: list | None = None
        self._output: int | None = None
        self._backward_done = False

    # graph construction -------------------------------------------------
    def _append(self, op, inputs=(), name=None, **attrs) -> Node:
        ids = tuple(n.index for n in inputs)
        node = Node(len(self.nodes), op, ids, attrs, name)
        self.nodes.append(node)
        return node

    def input(self, name: str, index: bool = False) -> Node:
        if name in self.inputs:
            raise UsageError(f"duplicate input name {name!r}")
        node = self._append("input", name=name)
        self.inputs[name] = node.index
        if index:
            self._index_inputs.add(name)
        return node

    def matmul(self, a, b):
        return self._append("matmul", (a, b))

    def add(self, a, b):
        return self._append("add", (a, b))

    def sub(self, a, b):
        return self._append("sub", (a, b))

    def mul(self, a, b):
        return self._append("mul", (a, b))

    def add_bias(self, a, bias):
        return self._append("add_bias", (a, bias))

    def scale(self, a, c: float):
        return self._append("scale", (a,), c=float(c))

    def leaky_relu(self, a, slope: float = 0.01):
        return self._append("leaky_relu", (a,), slope=float(slope))

    def relu(self, a):
        return self._append("leaky_relu", (a,), slope=0.0)

    def tanh(self, a):
        return self._append("tanh", (a,))

    def exp(self, a):
        return self._append("exp", (a,))

    def log(self, a):
        return self._append("log", (a,))

    def square(self, a):
        return self._append("square", (a,))

    def abs(self, a):
        return self._append("abs", (a,))

    def sin(self, a):
        return self._append("sin", (a,))

    def sum(self, a):
        return self._append("sum", (a,))

    def mean(self, a):
        return self._append("mean", (a,))

    def sum_cols(self, a):
        return self._append("sum_cols", (a,))

    def softmax_rows(self, a):
        return self._append("softmax_rows", (a,))

    def dropout(self, a, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        return self._append("dropout", (a,), rate=float(rate))

    def gather_rows(self, table, index):
        return self._append("gather_rows", (table, index))

    def slice_cols(self, a, start: int, stop: int):
        return self._append("slice_cols", (a,), start=int(start), stop=int(stop))

    def segment_matmul(self, h, w, seg, n_in: int, n_out: int):
        return self._append("segment_matmul", (h, w, seg), n_in=int(n_in), n_out=int(n_out))

    # execution ----------------------------------------------------------
    def forward(self, bindings: dict[str, Any], output: Node | None = None,
                train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Evaluate every node up to ``output`` (default: last appended)."""
        out_idx = len(self.nodes) - 1 if output is None else output.index
        missing = [n for n in self.inputs if n not in bindings and self.inputs[n] <= out_idx]
        if missing:
            raise UsageError(f"missing input bindings: {missing}")
        values: list = [None] * (out_idx + 1)
        ctx: list = [None] * (out_idx + 1)
        for node in self.nodes[: out_idx + 1]:
            if node.op == "input":
                if node.name in self._index_inputs:
                    values[node.index] = np.asarray(bindings[node.name], dtype=np.int64)
                else:
                    values[node.index] = _as2d(bindings[node.name], node.name)
                continue
            fwd, _ = _OPS[node.op]
            c = {"train": train, "rng": rng}
            try:
                val = fwd([values[i] for i in node.inputs], node.attrs, c)
            except ShapeError as exc:
                raise ShapeError(f"{node!r}: {exc}") from None
            except NumericError as exc:
                raise NumericError(f"{node!r}: {exc}") from None
            if self.check_finite and not np.all(np.isfinite(val)):
                raise NumericError(f"{node!r} produced non-finite values")
            values[node.index] = val
            ctx[node.index] = c
        self._values, self._ctx, self._output = values, ctx, out_idx
        self._backward_done = False
        return values[out_idx]

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        """Gradients of the last forward output w.r.t. every float input.

        ``seed`` defaults to ones shaped like the output.  Calling twice
        without an intervening forward is an error.
        """
        if self._values is None:
            raise UsageError("backward called before forward")
        if self._backward_done:
            raise UsageError("backward already ran for this forward pass")
        values, ctx, out_idx = self._values, self._ctx, self._output
        out = values[out_idx]
        seed = np.ones_like(out) if seed is None else _as2d(seed, "seed")
        if seed.shape != out.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {out.shape}")
        grads: list = [None] * (out_idx + 1)
        grads[out_idx] = seed
        for node in reversed(self.nodes[: out_idx + 1]):
            g = grads[node.index]
            if g is None or node.op == "input":
                continue
            _, bwd = _OPS[node.op]
            in_grads = bwd(g, [values[i] for i in node.inputs], values[node.index],
                           node.attrs, ctx[node.index])
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        self._backward_done = True
        result = {}
        for name, idx in self.inputs.items():
            if name in self._index_inputs or idx > out_idx:
                continue
            g = grads[idx]
            result[name] = np.zeros_like(values[idx]) if g is None else g
        return result

    def value(self, node: Node) -> np.ndarray:
        if self._values is None or node.index > self._output:
            raise UsageError(f"{node!r} has not been evaluated")
        return self._values[node.index]


def forward(tape: Tape, inputs: dict[str, Any], **kwargs) -> np.ndarray:
    return tape.forward(inputs, **kwargs)


def backward(tape: Tape, seed=None) -> dict[str, np.ndarray]:
    return tape.backward(seed)


def dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Standalone inverted dropout on an array (same mask law as the tape op)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train or rate == 0.0:
        return x.copy()
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def gradient_check(tape: Tape, bindings: dict[str, Any], h: float = 1e-5,
                   rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backward and central differences.

    The output is contracted with a random seed so non-scalar graphs are
    covered.  The error per input is ``|analytic - numeric| / (|analytic| +
    |numeric|)`` in the 2-norm, and the maximum over float inputs is
    returned (0 when both gradients vanish).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    bindings = {k: (np.array(v, dtype=np.int64) if k in tape._index_inputs
                    else np.array(_as2d(v, k), dtype=np.float64)) for k, v in bindings.items()}
    out = tape.forward(bindings)
    seed = rng.standard_normal(out.shape)
    analytic = tape.backward(seed)
    worst = 0.0
    for name, grad in analytic.items():
        x = bindings[name]
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            up = float(np.sum(tape.forward(bindings) * seed))
            x[idx] = old - h
            down = float(np.sum(tape.forward(bindings) * seed))
            x[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        denom = np.linalg.norm(grad) + np.linalg.norm(numeric)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
    return worst
