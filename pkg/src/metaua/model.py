"""CTR prediction model: field embeddings, optional cross layer, ReLU MLP, sigmoid.

Forward and backward passes are written by hand over batches of feature ids.
The parameter layout is, in order::

    embed:<field>      (cardinality, embed_dim)   one table per field
    cross.weight       (D, D)                     only if cross_layers == 1
    cross.bias         (D,)
    hidden<i>.weight   (fan_in, width)
    hidden<i>.bias     (width,)
    out.weight         (fan_in, 1)
    out.bias           (1,)

with ``D = n_fields * embed_dim``.  The cross layer computes
``e1 = e0 * (e0 @ W.T + b) + e0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .params import Block, ParamVector, make_layout

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    fields: tuple[tuple[str, int], ...]
    embed_dim: int = 4
    cross_layers: int = 1
    hidden: tuple[int, ...] = (16, 8)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((str(n), int(c)) for n, c in self.fields))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.fields:
            raise ValueError("a model needs at least one field")
        for name, card in self.fields:
            if card < 1:
                raise ValueError(f"field {name!r} has cardinality {card} < 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.cross_layers not in (0, 1):
            raise ValueError("cross_layers must be 0 or 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.fields)

    @property
    def input_dim(self) -> int:
        return self.n_fields * self.embed_dim

    def dense_layers(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer after the embeddings."""
        layers = []
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden):
            layers.append((f"hidden{i}", fan_in, width))
            fan_in = width
        layers.append(("out", fan_in, 1))
        return layers

    @cached_property
    def _layout(self) -> tuple[Block, ...]:
        shapes = [(f"embed:{name}", (card, self.embed_dim)) for name, card in self.fields]
        if self.cross_layers:
            shapes += [("cross.weight", (self.input_dim, self.input_dim)), ("cross.bias", (self.input_dim,))]
        for name, fan_in, fan_out in self.dense_layers():
            shapes += [(f"{name}.weight", (fan_in, fan_out)), (f"{name}.bias", (fan_out,))]
        return make_layout(shapes)

    def layout(self) -> tuple[Block, ...]:
        return self._layout

    @property
    def n_params(self) -> int:
        return self._layout[-1].stop


@dataclass(frozen=True)
class Example:
    feature_ids: tuple[int, ...]
    label: int
    timestamp: int = 0


@dataclass
class Examples:
    """Column-oriented batch of examples: ids (n, n_fields), labels, timestamps."""

    ids: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim == 1:
            self.ids = self.ids.reshape(len(self.ids), -1) if self.ids.size else self.ids.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.labels), dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        if not (len(self.ids) == len(self.labels) == len(self.timestamps)):
            raise ValueError("ids, labels and timestamps must have equal length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx) -> "Examples":
        return Examples(self.ids[idx], self.labels[idx], self.timestamps[idx])

    @classmethod
    def from_list(cls, examples: Sequence[Example], n_fields: int | None = None) -> "Examples":
        if not examples:
            return cls.empty(n_fields or 0)
        return cls(
            np.array([e.feature_ids for e in examples], dtype=np.int64),
            np.array([e.label for e in examples], dtype=np.float64),
            np.array([e.timestamp for e in examples], dtype=np.int64),
        )

    @classmethod
    def empty(cls, n_fields: int) -> "Examples":
        return cls(np.zeros((0, n_fields), dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts: Sequence["Examples"]) -> "Examples":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.timestamps for p in parts]),
        )

    def to_list(self) -> list[Example]:
        return [
            Example(tuple(int(i) for i in row), int(y), int(t))
            for row, y, t in zip(self.ids, self.labels, self.timestamps)
        ]


ExampleLike = Union[Examples, Sequence[Example], Example]


def as_examples(batch: ExampleLike, spec: ModelSpec | None = None) -> Examples:
    if isinstance(batch, Examples):
        return batch
    if isinstance(batch, Example):
        batch = [batch]
    return Examples.from_list(list(batch), spec.n_fields if spec else None)


def check_example_ids(batch: Examples, spec: ModelSpec) -> None:
    if len(batch) == 0:
        return
    if batch.ids.shape[1] != spec.n_fields:
        raise ValueError(f"expected {spec.n_fields} feature ids per example, got {batch.ids.shape[1]}")
    card = np.asarray(spec.cardinalities)
    if (batch.ids < 0).any() or (batch.ids >= card).any():
        raise ValueError("feature id outside its field cardinality")


def init_params(spec: ModelSpec, seed) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases.

    Embedding tables use ``embed_dim`` as their fan-in.  Blocks are drawn in
    layout order from a single generator, so the result depends only on
    ``(spec, seed)``.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for b in spec.layout():
        if b.name.endswith(".bias"):
            parts.append(np.zeros(b.length))
            continue
        fan_in = b.shape[1] if b.name.startswith("embed:") or b.name == "cross.weight" else b.shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=b.length))
    return ParamVector(np.concatenate(parts), spec.layout(), copy=False)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _check_w(w: ParamVector, spec: ModelSpec) -> None:
    if w.blocks != spec.layout():
        raise ValueError("parameter vector does not match the model spec")


def _forward(w: ParamVector, ids: np.ndarray, spec: ModelSpec):
    d = spec.embed_dim
    e0 = np.empty((len(ids), spec.input_dim))
    for f, (name, _) in enumerate(spec.fields):
        e0[:, f * d:(f + 1) * d] = w.block(f"embed:{name}")[ids[:, f]]
    cache = {"e0": e0}
    h = e0
    if spec.cross_layers:
        u = e0 @ w.block("cross.weight").T + w.block("cross.bias")
        h = e0 * u + e0
        cache["u"] = u
    acts = [h]
    pre = []
    for name, _, _ in spec.dense_layers()[:-1]:
        a = h @ w.block(f"{name}.weight") + w.block(f"{name}.bias")
        h = np.maximum(a, 0.0)
        pre.append(a)
        acts.append(h)
    logit = (h @ w.block("out.weight")).reshape(-1) + w.block("out.bias")[0]
    cache["acts"] = acts
    cache["pre"] = pre
    return _sigmoid(logit), cache


def _backward(w: ParamVector, ids: np.ndarray, spec: ModelSpec, cache, dlogit: np.ndarray) -> np.ndarray:
    grad = np.zeros(w.size)

    def put(name, value):
        b = w.block_info(name)
        grad[b.slice] = value.reshape(-1)

    acts, pre = cache["acts"], cache["pre"]
    layers = spec.dense_layers()
    dz = dlogit.reshape(-1, 1)
    put("out.weight", acts[-1].T @ dz)
    put("out.bias", dz.sum(axis=0))
    dh = dz @ w.block("out.weight").T
    for i in range(len(layers) - 2, -1, -1):
        name = layers[i][0]
        da = dh * (pre[i] > 0.0)
        put(f"{name}.weight", acts[i].T @ da)
        put(f"{name}.bias", da.sum(axis=0))
        dh = da @ w.block(f"{name}.weight").T
    e0 = cache["e0"]
    if spec.cross_layers:
        u = cache["u"]
        du = dh * e0
        put("cross.weight", du.T @ e0)
        put("cross.bias", du.sum(axis=0))
        de0 = dh * u + dh + du @ w.block("cross.weight")
    else:
        de0 = dh
    d = spec.embed_dim
    for f, (name, card) in enumerate(spec.fields):
        table = np.zeros((card, d))
        np.add.at(table, ids[:, f], de0[:, f * d:(f + 1) * d])
        put(f"embed:{name}", table)
    return grad


def bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example binary cross-entropy with p clamped inside the logs."""
    q = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))


def forward(w: ParamVector, x: Example, spec: ModelSpec) -> float:
    """Click probability for a single example."""
    batch = as_examples(x, spec)
    _check_w(w, spec)
    check_example_ids(batch, spec)
    p, _ = _forward(w, batch.ids, spec)
    return float(p[0])


def predict_batch(w: ParamVector, examples: ExampleLike, spec: ModelSpec) -> np.ndarray:
    batch = as_examples(examples, spec)
    if len(batch) == 0:
        return np.zeros(0)
    _check_w(w, spec)
    check_example_ids(batch, spec)
    p, _ = _forward(w, batch.ids, spec)
    return p


def loss_and_grad(w: ParamVector, batch: ExampleLike, spec: ModelSpec, *, reduction: str = "mean"):
    """Mean (or summed) BCE over ``batch`` and its exact gradient in ``w``.

    Returns ``(loss, grad)`` with ``grad`` a ParamVector congruent with ``w``.
    """
    batch = as_examples(batch, spec)
    if len(batch) == 0:
        raise ValueError("loss_and_grad needs a non-empty batch")
    _check_w(w, spec)
    check_example_ids(batch, spec)
    p, cache = _forward(w, batch.ids, spec)
    y = batch.labels
    losses = bce(p, y)
    dlogit = p - y
    if reduction == "mean":
        loss = float(losses.mean())
        dlogit = dlogit / len(y)
    elif reduction == "sum":
        loss = float(losses.sum())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = _backward(w, batch.ids, spec, cache, dlogit)
    return loss, w.with_values(grad)


def mean_loss(w: ParamVector, batch: ExampleLike, spec: ModelSpec) -> float:
    batch = as_examples(batch, spec)
    p, _ = _forward(w, batch.ids, spec)
    return float(bce(p, batch.labels).mean())
