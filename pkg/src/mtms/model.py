"""The meta/mesa hypernetwork model.

A task ``m`` owns a low-dimensional mesa vector ``theta[m]``.  The meta
module ``g(theta; omega)`` maps it to the "connected" parameter blocks of a
base network ``f(x; beta)``; the remaining blocks of ``beta`` are shared
("orphaned") constants.  Training minimises the task-averaged training loss
jointly over ``omega``, the orphaned constants and every ``theta[m]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mtms.autodiff import Tape
from mtms.losses import cum_matrix
from mtms.nn import Layout, MlpGraph, MlpSpec, ParamVector, activate, build_mlp, init_params, stack_layouts
from mtms.optim import DECAY_LADDER, AdamState, TrainResult, make_optimizer, minibatches, train_ladder, train_loop

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSSES = ("mse", "mae", "rps")


@dataclass
class Task:
    """Rows ``[:n_train]`` are the training set, the rest validation."""

    x: np.ndarray
    y: np.ndarray
    n_train: int | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        self.y = y.reshape(-1, 1) if y.ndim == 1 else y
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if self.n_train is None:
            self.n_train = self.x.shape[0]
        if not 0 <= self.n_train <= self.x.shape[0]:
            raise ValueError(f"n_train={self.n_train} outside [0, {self.x.shape[0]}]")

    @property
    def x_train(self):
        return self.x[: self.n_train]

    @property
    def y_train(self):
        return self.y[: self.n_train]

    @property
    def x_val(self):
        return self.x[self.n_train:]

    @property
    def y_val(self):
        return self.y[self.n_train:]


@dataclass
class TaskBundle:
    tasks: list[Task]

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a task bundle needs at least one task")
        dx, dy = self.tasks[0].x.shape[1], self.tasks[0].y.shape[1]
        for i, t in enumerate(self.tasks):
            if t.x.shape[1] != dx or t.y.shape[1] != dy:
                raise ValueError(f"task {i} has dims ({t.x.shape[1]}, {t.y.shape[1]}), expected ({dx}, {dy})")

    def __len__(self):
        return len(self.tasks)

    @property
    def d_x(self) -> int:
        return self.tasks[0].x.shape[1]

    @property
    def d_y(self) -> int:
        return self.tasks[0].y.shape[1]

    def pooled(self, part: str = "train") -> tuple[np.ndarray, np.ndarray]:
        xs = [getattr(t, f"x_{part}") for t in self.tasks]
        ys = [getattr(t, f"y_{part}") for t in self.tasks]
        return np.concatenate(xs), np.concatenate(ys)


@dataclass(frozen=True)
class Connection:
    """Which parameter blocks of ``f`` (e.g. ``("W2", "b2")``) are outputs of ``g``."""

    blocks: tuple[str, ...]

    @classmethod
    def last_layer(cls, base_spec: MlpSpec) -> "Connection":
        l = base_spec.n_layers - 1
        return cls((f"W{l}", f"b{l}"))

    @classmethod
    def all_layers(cls, base_spec: MlpSpec) -> "Connection":
        return cls(tuple(name for name, _ in base_spec.layout().entries))

    def split(self, base_spec: MlpSpec) -> tuple[Layout, Layout]:
        """(connected, orphaned) sub-layouts, both in base-layout order."""
        entries = base_spec.layout().entries
        names = {n for n, _ in entries}
        unknown = set(self.blocks) - names
        if unknown:
            raise ValueError(f"unknown parameter blocks {sorted(unknown)}")
        conn = tuple(e for e in entries if e[0] in self.blocks)
        orph = tuple(e for e in entries if e[0] not in self.blocks)
        return Layout(conn), Layout(orph)


@dataclass
class MtMsModel:
    base_spec: MlpSpec
    meta_spec: MlpSpec
    connection: Connection
    omega: ParamVector
    orphaned: ParamVector
    mesa: np.ndarray
    norm_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mesa = np.asarray(self.mesa, dtype=np.float64)
        if self.mesa.ndim != 2 or self.mesa.shape[1] != self.meta_spec.n_in:
            raise ValueError(f"mesa must be (n_tasks, {self.meta_spec.n_in}), got {self.mesa.shape}")
        conn, orph = self.connection.split(self.base_spec)
        if self.meta_spec.n_out != conn.size:
            raise ValueError(f"g outputs {self.meta_spec.n_out} values but {conn.size} are connected")
        if self.orphaned.layout != orph:
            raise ValueError("orphaned parameter layout does not match the connection")
        if self.omega.layout != self.meta_spec.layout():
            raise ValueError("omega layout does not match the meta spec")

    @property
    def n_tasks(self) -> int:
        return self.mesa.shape[0]

    @property
    def d_theta(self) -> int:
        return self.meta_spec.n_in

    def copy(self) -> "MtMsModel":
        return MtMsModel(self.base_spec, self.meta_spec, self.connection, self.omega.copy(),
                         self.orphaned.copy(), self.mesa.copy(), json.loads(json.dumps(self.norm_stats)))


# parameter assembly ------------------------------------------------------

def beta_from_theta(model: MtMsModel, theta) -> ParamVector:
    """Base-network parameters for mesa vector ``theta``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(1, model.d_theta)
    out = MlpGraph(model.meta_spec).forward(model.omega, theta)[0]
    conn, _ = model.connection.split(model.base_spec)
    conn_views = ParamVector(out, conn).views()
    parts = dict(model.orphaned.views())
    parts.update(conn_views)
    return ParamVector.flatten(parts, model.base_spec.layout())


def lookup_beta(model: MtMsModel, m: int) -> ParamVector:
    if not 0 <= m < model.n_tasks:
        raise IndexError(f"task index {m} outside [0, {model.n_tasks})")
    return beta_from_theta(model, model.mesa[m])


def lookup_beta_onehot(model: MtMsModel, m: int) -> ParamVector:
    """Same as :func:`lookup_beta` but through the explicit one-hot product."""
    q = np.zeros(model.n_tasks)
    q[m] = 1.0
    return beta_from_theta(model, model.mesa.T @ q)


# batched graph -----------------------------------------------------------

class MtMsGraph:
    """Tape for ``f(x; g(theta[task]; omega))`` over a batch of tasks.

    Bindings: ``x`` rows, ``seg`` (row -> position in ``tasks``), ``tasks``
    (rows of ``mesa``), ``mesa``, ``g/*`` and ``f/*`` parameter slots.
    With ``loss`` set, also ``y`` and per-element weights ``w``; the output
    is ``sum(w * elementwise_loss)`` plus the optional mesa penalty.
    """

    def __init__(self, base_spec: MlpSpec, meta_spec: MlpSpec, connection: Connection,
                 loss: str | None = None, mesa_l2: float = 0.0):
        self.base_spec, self.meta_spec, self.connection = base_spec, meta_spec, connection
        self.loss = loss
        conn_layout, orph_layout = connection.split(base_spec)
        t = self.tape = Tape()
        x = t.input("x")
        seg = t.input("seg", index=True)
        tasks = t.input("tasks", index=True)
        mesa = t.input("mesa")
        gp = {n: t.input(f"g/{n}") for n, _ in meta_spec.layout().entries}
        fp = {n: t.input(f"f/{n}") for n, _ in orph_layout.entries}
        theta = t.gather_rows(mesa, tasks)
        c = build_mlp(t, meta_spec, theta, gp)
        offs = conn_layout.offsets()
        h = x
        for l in range(base_spec.n_layers):
            a, b = base_spec.layer_sizes[l], base_spec.layer_sizes[l + 1]
            if f"W{l}" in offs:
                s, e, _ = offs[f"W{l}"]
                h = t.segment_matmul(h, t.slice_cols(c, s, e), seg, a, b)
            else:
                h = t.matmul(h, fp[f"W{l}"])
            if f"b{l}" in offs:
                s, e, _ = offs[f"b{l}"]
                h = t.add(h, t.gather_rows(t.slice_cols(c, s, e), seg))
            else:
                h = t.add_bias(h, fp[f"b{l}"])
            if l < base_spec.n_layers - 1:
                h = activate(t, h, base_spec.activation)
                if base_spec.dropout_rate > 0:
                    h = t.dropout(h, base_spec.dropout_rate)
        if base_spec.output_transform == "softmax":
            h = t.softmax_rows(h)
        self.pred = h
        self.theta = theta
        self.out = h
        if loss is not None:
            if loss not in LOSSES:
                raise ValueError(f"unknown loss {loss!r}")
            y = t.input("y")
            w = t.input("w")
            diff = t.sub(h, y)
            if loss == "mse":
                elem = t.square(diff)
            elif loss == "mae":
                elem = t.abs(diff)
            else:
                elem = t.square(t.matmul(diff, t.input("cum")))
            self.elem = elem
            obj = t.sum(t.mul(elem, w))
            if mesa_l2 > 0:
                obj = t.add(obj, t.scale(t.sum(t.square(theta)), mesa_l2))
            self.out = obj

    def bindings(self, omega: ParamVector, orphaned: ParamVector, mesa: np.ndarray,
                 x, seg, tasks, y=None, w=None) -> dict:
        b = {f"g/{k}": v for k, v in omega.views().items()}
        b.update({f"f/{k}": v for k, v in orphaned.views().items()})
        b.update(x=x, seg=seg, tasks=tasks, mesa=mesa)
        if self.loss is not None:
            b["y"], b["w"] = y, w
            if self.loss == "rps":
                b["cum"] = cum_matrix(y.shape[1])
        return b


def _stack_rows(tasks: Sequence[Task], part: str):
    xs = [getattr(t, f"x_{part}") for t in tasks]
    ys = [getattr(t, f"y_{part}") for t in tasks]
    counts = np.array([len(v) for v in xs])
    seg = np.repeat(np.arange(len(tasks)), counts)
    return np.concatenate(xs), np.concatenate(ys), seg, counts


def task_weights(counts: np.ndarray, d_y: int) -> np.ndarray:
    """Row weights giving ``mean over tasks of (mean over rows of the loss)``.

    Tasks with no rows are skipped; the element loss is averaged over the
    ``d_y`` output columns (matching RPS's 1/5 normalisation).
    """
    live = counts > 0
    if not live.any():
        raise ValueError("no rows in any task")
    per_row = np.where(live, 1.0 / np.maximum(counts, 1), 0.0) / live.sum() / d_y
    return np.repeat(per_row, counts)[:, None] * np.ones((1, d_y))


# prediction ----------------------------------------------------------------

def predict(model: MtMsModel, m: int, x) -> np.ndarray:
    """Eval-mode predictions for task ``m``."""
    if not 0 <= m < model.n_tasks:
        raise IndexError(f"task index {m} outside [0, {model.n_tasks})")
    return predict_many(model, [m], [x])[0]


def predict_many(model: MtMsModel, task_ids: Sequence[int], xs: Sequence[np.ndarray],
                 mesa: np.ndarray | None = None) -> list[np.ndarray]:
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in xs]
    for x in xs:
        if x.shape[1] != model.base_spec.n_in:
            raise ValueError(f"expected {model.base_spec.n_in} feature columns, got {x.shape[1]}")
    graph = MtMsGraph(model.base_spec, model.meta_spec, model.connection)
    counts = np.array([len(x) for x in xs])
    seg = np.repeat(np.arange(len(xs)), counts)
    x = np.concatenate(xs) if xs else np.zeros((0, model.base_spec.n_in))
    b = graph.bindings(model.omega, model.orphaned, model.mesa if mesa is None else mesa,
                       x, seg, np.asarray(task_ids, dtype=np.int64))
    out = graph.tape.forward(b, output=graph.pred)
    return np.split(out, np.cumsum(counts)[:-1])


# training --------------------------------------------------------------------

@dataclass
class Phase1Config:
    lr: float = 0.01
    batch_size: int = 200
    patience: int = 10
    max_epochs: int = 500
    init: str = "xavier_uniform"


@dataclass
class Phase2Config:
    ladder: tuple[float, ...] = DECAY_LADDER
    batch_tasks: int = 100
    patience: int = 10
    max_epochs: int = 500
    mesa_l2: float = 0.0
    meta_init_bound: float = 1.0


def _pooled_loss_graph(spec: MlpSpec, loss: str):
    g = MlpGraph(spec)
    t = g.tape
    y = t.input("y")
    diff = t.sub(g.out, y)
    if loss == "mse":
        elem = t.square(diff)
    elif loss == "mae":
        elem = t.abs(diff)
    elif loss == "rps":
        elem = t.square(t.matmul(diff, t.input("cum")))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    obj = t.mean(elem)
    return g, obj


def train_phase1(bundle: TaskBundle, base_spec: MlpSpec, loss: str = "mse",
                 config: Phase1Config | None = None, rng: np.random.Generator | None = None,
                 init: ParamVector | None = None) -> tuple[ParamVector, TrainResult]:
    """Fit ``f`` on all training rows pooled, ignoring task identity."""
    config = config or Phase1Config()
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = bundle.pooled("train")
    if len(x) == 0:
        raise ValueError("empty training data")
    xv, yv = bundle.pooled("val")
    params = init.copy() if init is not None else init_params(base_spec, config.init, rng)
    layout = params.layout
    graph, obj = _pooled_loss_graph(base_spec, loss)
    extra = {"cum": cum_matrix(y.shape[1])} if loss == "rps" else {}

    def run(flat, xb, yb, train, r):
        b = ParamVector(flat, layout).views()
        b.update(x=xb, y=yb, **extra)
        return float(graph.tape.forward(b, output=obj, train=train, rng=r)[0, 0])

    def objective(flat, idx, r):
        val = run(flat, x[idx], y[idx], True, r)
        g = graph.tape.backward()
        return val, ParamVector.flatten(g, layout).flat

    val_fn = (lambda flat: run(flat, xv, yv, False, None)) if len(xv) else None
    res = train_loop(objective, params.flat, lambda r: minibatches(len(x), config.batch_size, r),
                     AdamState(lr=config.lr), rng, val_fn=val_fn, patience=config.patience,
                     max_epochs=config.max_epochs)
    return ParamVector(res.params, layout), res


def init_phase2(base_spec: MlpSpec, beta_pooled: ParamVector, n_tasks: int, d_theta: int,
                connection: Connection | None = None, meta_hidden: Sequence[int] = (),
                rng: np.random.Generator | None = None, bound: float = 1.0) -> MtMsModel:
    """Model whose predictions at ``theta = 0`` equal the pooled network's.

    Output bias of ``g`` <- pooled connected blocks, other ``g`` weights
    uniform on ``[-bound, bound]``, hidden biases of ``g`` zero, mesa zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    connection = connection or Connection.last_layer(base_spec)
    conn, orph = connection.split(base_spec)
    meta_spec = MlpSpec((d_theta, *meta_hidden, conn.size), activation="leaky_relu")
    omega = init_params(meta_spec, "uniform", rng, bounds=(-bound, bound))
    views = omega.views()
    last = meta_spec.n_layers - 1
    for l in range(last):
        views[f"b{l}"][...] = 0.0
    beta_views = beta_pooled.views()
    views[f"b{last}"][...] = np.concatenate([beta_views[n].ravel() for n, _ in conn.entries])[None, :]
    orphaned = ParamVector.flatten({n: beta_views[n] for n, _ in orph.entries}, orph)
    return MtMsModel(base_spec, meta_spec, connection, omega, orphaned, np.zeros((n_tasks, d_theta)))


class _Packed:
    """Flat trainable vector [omega | orphaned | mesa] with slot views."""

    def __init__(self, model: MtMsModel):
        self.model = model
        self.layout = stack_layouts([("g", model.omega.layout), ("f", model.orphaned.layout),
                                     ("mesa", Layout((("theta", model.mesa.shape),)))])

    def pack(self) -> np.ndarray:
        m = self.model
        return np.concatenate([m.omega.flat, m.orphaned.flat, m.mesa.ravel()])

    def unpack(self, flat: np.ndarray):
        m = self.model
        a = m.omega.layout.size
        b = a + m.orphaned.layout.size
        return (ParamVector(flat[:a], m.omega.layout), ParamVector(flat[a:b], m.orphaned.layout),
                flat[b:].reshape(m.mesa.shape))

    def grad_flat(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[f"g/{n}"].ravel() for n, _ in self.model.omega.layout.entries]
                              + [grads[f"f/{n}"].ravel() for n, _ in self.model.orphaned.layout.entries]
                              + [grads["mesa"].ravel()])


def mtms_loss(model: MtMsModel, bundle: TaskBundle, loss: str, part: str = "train",
              task_ids: Sequence[int] | None = None) -> float:
    """Task-averaged loss of the model on ``part`` rows (eval mode)."""
    ids = np.arange(len(bundle)) if task_ids is None else np.asarray(task_ids)
    tasks = [bundle.tasks[i] for i in ids]
    x, y, seg, counts = _stack_rows(tasks, part)
    graph = MtMsGraph(model.base_spec, model.meta_spec, model.connection, loss=loss)
    b = graph.bindings(model.omega, model.orphaned, model.mesa, x, seg, ids, y,
                       task_weights(counts, y.shape[1]))
    return float(graph.tape.forward(b)[0, 0])


def train_phase2(bundle: TaskBundle, model: MtMsModel, loss: str = "mse",
                 config: Phase2Config | None = None, rng: np.random.Generator | None = None,
                 ) -> tuple[MtMsModel, TrainResult]:
    """Joint single-level training of omega, orphaned constants and all mesa rows.

    Minibatches are sets of whole tasks; each learning rate of the ladder
    runs to early stopping on the validation rows (training rows when no
    task has validation data).
    """
    config = config or Phase2Config()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(bundle) != model.n_tasks:
        raise ValueError(f"bundle has {len(bundle)} tasks, model has {model.n_tasks}")
    model = model.copy()
    packed = _Packed(model)
    graph = MtMsGraph(model.base_spec, model.meta_spec, model.connection, loss=loss,
                      mesa_l2=config.mesa_l2)
    d_y = bundle.d_y
    cache = {}

    def rows(ids: np.ndarray, part: str):
        key = (part, ids.tobytes()) if len(ids) == len(bundle) else None
        if key is not None and key in cache:
            return cache[key]
        x, y, seg, counts = _stack_rows([bundle.tasks[i] for i in ids], part)
        out = (x, y, seg, task_weights(counts, d_y))
        if key is not None:
            cache[key] = out
        return out

    def run(flat, ids, part, train, r):
        omega, orph, mesa = packed.unpack(flat)
        x, y, seg, w = rows(ids, part)
        b = graph.bindings(omega, orph, mesa, x, seg, ids, y, w)
        return float(graph.tape.forward(b, train=train, rng=r)[0, 0])

    def objective(flat, ids, r):
        val = run(flat, ids, "train", True, r)
        return val, packed.grad_flat(graph.tape.backward())

    all_ids = np.arange(len(bundle))
    has_val = any(t.x_val.shape[0] for t in bundle.tasks)
    val_ids = np.array([i for i, t in enumerate(bundle.tasks) if t.x_val.shape[0] > 0])
    val_fn = (lambda flat: run(flat, val_ids, "val", False, None)) if has_val else \
        (lambda flat: run(flat, all_ids, "train", False, None))
    train_ids = np.array([i for i, t in enumerate(bundle.tasks) if t.n_train > 0])
    batches = lambda r: [train_ids[i] for i in minibatches(len(train_ids), config.batch_tasks, r)]
    res = train_ladder(objective, packed.pack(), batches, rng, ladder=config.ladder,
                       val_fn=val_fn, patience=config.patience, max_epochs=config.max_epochs)
    omega, orph, mesa = packed.unpack(res.params)
    model.omega, model.orphaned, model.mesa = omega.copy(), orph.copy(), mesa.copy()
    return model, res


# adaptation to unseen tasks ------------------------------------------------

@dataclass
class AdaptConfig:
    optimizer: str = "adadelta"
    # Adadelta sets its own step size; lr scales it and 1.0 is the unscaled rule
    lr: float = 1.0
    steps: int = 2000
    restarts: int = 3
    plateau_steps: int = 200
    plateau_tol: float = 1e-10


def adapt_tasks(model: MtMsModel, tasks: Sequence[Task], loss: str = "mse",
                config: AdaptConfig | None = None, rng: np.random.Generator | None = None
                ) -> np.ndarray:
    """Fit one mesa vector per new task on its training rows, ``omega`` frozen.

    Every task gets ``1 + restarts`` starting points (zero plus random draws
    scaled like the trained mesa rows); all are optimised together and the
    iterate with the lowest training loss is kept per task.  Returns a
    ``(len(tasks), d_theta)`` array.
    """
    config = config or AdaptConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if model.d_theta < 1:
        raise ValueError("adaptation needs d_theta >= 1")
    for i, t in enumerate(tasks):
        if t.n_train == 0:
            raise ValueError(f"task {i} has no training rows to adapt on")
    n_starts = 1 + config.restarts
    n = len(tasks)
    scale = model.mesa.std(axis=0) if model.n_tasks > 1 else np.ones(model.d_theta)
    scale = np.where(scale > 0, scale, 1.0)
    starts = [np.zeros((n, model.d_theta))]
    starts += [rng.standard_normal((n, model.d_theta)) * scale for _ in range(config.restarts)]
    theta = np.concatenate(starts)  # start-major: row s*n + i
    rep = [tasks[i] for _ in range(n_starts) for i in range(n)]
    x, y, seg, counts = _stack_rows(rep, "train")
    d_y = y.shape[1]
    # each (task, start) pair gets the weight of a full objective on its own
    w = np.repeat(1.0 / counts, counts)[:, None] * np.ones((1, d_y)) / d_y
    graph = MtMsGraph(model.base_spec, model.meta_spec, model.connection, loss=loss)
    ids = np.arange(len(rep))
    opt = make_optimizer(config.optimizer, config.lr)
    best = np.full(len(rep), np.inf)
    best_theta = theta.copy()
    last_improve, best_total = 0, np.inf
    for step in range(config.steps + 1):
        b = graph.bindings(model.omega, model.orphaned, theta, x, seg, ids, y, w)
        total = float(graph.tape.forward(b)[0, 0])
        per = np.bincount(seg, weights=(graph.tape.value(graph.elem) * w).sum(axis=1),
                          minlength=len(rep))
        better = per < best
        best[better] = per[better]
        best_theta[better] = theta[better]
        if step == 0 or total < best_total - config.plateau_tol * max(abs(best_total), 1.0):
            best_total, last_improve = total, step
        if step == config.steps or step - last_improve >= config.plateau_steps:
            break
        grads = graph.tape.backward()
        opt.update(theta, grads["mesa"])
    per_start = best.reshape(n_starts, n)
    pick = per_start.argmin(axis=0)
    return best_theta.reshape(n_starts, n, -1)[pick, np.arange(n)]


def adapt_new_task(model: MtMsModel, task: Task, loss: str = "mse",
                   config: AdaptConfig | None = None, rng: np.random.Generator | None = None
                   ) -> np.ndarray:
    return adapt_tasks(model, [task], loss, config, rng)[0]


# checkpoints -------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


REQUIRED_FIELDS = ("version", "base_spec", "meta_spec", "connection", "omega", "orphaned", "mesa", "norm_stats")


def save_checkpoint(model: MtMsModel, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "base_spec": model.base_spec.to_dict(),
        "meta_spec": model.meta_spec.to_dict(),
        "connection": list(model.connection.blocks),
        "omega": model.omega.flat.tolist(),
        "orphaned": model.orphaned.flat.tolist(),
        "mesa": model.mesa.tolist(),
        "norm_stats": model.norm_stats,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> MtMsModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    for key in REQUIRED_FIELDS:
        if key not in doc:
            raise CheckpointError(f"checkpoint is missing field {key!r}")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc['version']} != supported {CHECKPOINT_VERSION}")
    try:
        base = MlpSpec.from_dict(doc["base_spec"])
        meta = MlpSpec.from_dict(doc["meta_spec"])
        conn = Connection(tuple(doc["connection"]))
        _, orph = conn.split(base)
        mesa = np.array(doc["mesa"], dtype=np.float64)
        return MtMsModel(base, meta, conn, ParamVector(np.array(doc["omega"], dtype=np.float64), meta.layout()),
                         ParamVector(np.array(doc["orphaned"], dtype=np.float64), orph), mesa,
                         doc["norm_stats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint contents: {exc}") from None
