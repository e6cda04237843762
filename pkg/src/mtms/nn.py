"""Dense feed-forward networks on top of the autodiff tape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mtms.autodiff import Node, Tape

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "none")
OUTPUT_TRANSFORMS = ("none", "softmax")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "leaky_relu"
    output_transform: str = "none"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if any(s < 0 for s in self.layer_sizes) or self.layer_sizes[-1] < 1:
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output_transform!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> "Layout":
        entries = []
        for l in range(self.n_layers):
            a, b = self.layer_sizes[l], self.layer_sizes[l + 1]
            entries.append((f"W{l}", (a, b)))
            entries.append((f"b{l}", (1, b)))
        return Layout(tuple(entries))

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_transform": self.output_transform,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d["activation"], d["output_transform"],
                   float(d["dropout_rate"]))


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) slots packed row-major into one flat vector."""

    entries: tuple[tuple[str, tuple[int, int]], ...]

    @property
    def size(self) -> int:
        return sum(r * c for _, (r, c) in self.entries)

    def offsets(self) -> dict[str, tuple[int, int, tuple[int, int]]]:
        out, pos = {}, 0
        for name, (r, c) in self.entries:
            out[name] = (pos, pos + r * c, (r, c))
            pos += r * c
        return out


@dataclass
class ParamVector:
    flat: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ValueError(f"flat vector length {self.flat.shape} != layout size {self.layout.size}")

    def views(self) -> dict[str, np.ndarray]:
        """Named 2-D views sharing memory with ``flat``."""
        return {name: self.flat[a:b].reshape(shape)
                for name, (a, b, shape) in self.layout.offsets().items()}

    def unflatten(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.views().items()}

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout: Layout) -> "ParamVector":
        parts = []
        for name, shape in layout.entries:
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"slot {name}: shape {a.shape} != {shape}")
            parts.append(a.ravel())
        flat = np.concatenate(parts) if parts else np.zeros(0)
        return cls(flat, layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.layout)


def init_params(spec: MlpSpec, scheme="xavier_uniform", rng: np.random.Generator | None = None,
                bounds: tuple[float, float] = (-1.0, 1.0)) -> ParamVector:
    """Initialise weights; biases always start at zero except under ``uniform``.

    ``scheme`` is one of ``xavier_uniform``, ``uniform`` (on ``bounds``) or
    ``zeros``.
    """
    layout = spec.layout()
    flat = np.zeros(layout.size)
    pv = ParamVector(flat, layout)
    if scheme == "zeros":
        return pv
    if rng is None:
        raise ValueError(f"scheme {scheme!r} needs an rng")
    views = pv.views()
    for name, (r, c) in layout.entries:
        if scheme == "xavier_uniform":
            if name.startswith("W"):
                lim = np.sqrt(6.0 / (r + c)) if r + c > 0 else 0.0
                views[name][...] = rng.uniform(-lim, lim, size=(r, c))
        elif scheme == "uniform":
            views[name][...] = rng.uniform(bounds[0], bounds[1], size=(r, c))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return pv


def activate(tape: Tape, h: Node, activation: str) -> Node:
    if activation == "leaky_relu":
        return tape.leaky_relu(h, LEAKY_SLOPE)
    if activation == "relu":
        return tape.relu(h)
    if activation == "tanh":
        return tape.tanh(h)
    return h


def build_mlp(tape: Tape, spec: MlpSpec, x: Node, params: dict[str, Node]) -> Node:
    """Append the MLP to ``tape``; ``params`` maps slot names to input nodes."""
    h = x
    for l in range(spec.n_layers):
        h = tape.add_bias(tape.matmul(h, params[f"W{l}"]), params[f"b{l}"])
        if l < spec.n_layers - 1:
            h = activate(tape, h, spec.activation)
            if spec.dropout_rate > 0:
                h = tape.dropout(h, spec.dropout_rate)
    if spec.output_transform == "softmax":
        h = tape.softmax_rows(h)
    return h


class MlpGraph:
    """A reusable tape computing ``spec`` on input ``x``.

    Parameter slots are tape inputs named after the layout, so
    ``backward()`` returns gradients keyed the same way.
    """

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.tape = Tape()
        self.x = self.tape.input("x")
        self.params = {name: self.tape.input(name) for name, _ in spec.layout().entries}
        self.out = build_mlp(self.tape, spec, self.x, self.params)

    def forward(self, params: ParamVector, x, train=False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.n_in:
            raise ValueError(f"expected input with {self.spec.n_in} columns, got shape {x.shape}")
        bindings = dict(params.views())
        bindings["x"] = x
        return self.tape.forward(bindings, output=self.out, train=train, rng=rng)


def mlp_forward(spec: MlpSpec, params: ParamVector, x, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
    return MlpGraph(spec).forward(params, x, train=train, rng=rng)


def stack_layouts(parts: Sequence[tuple[str, Layout]]) -> Layout:
    """Concatenate layouts, prefixing each slot with ``prefix/``."""
    entries = []
    for prefix, layout in parts:
        entries.extend((f"{prefix}/{name}", shape) for name, shape in layout.entries)
    return Layout(tuple(entries))
