"""Federated round orchestration: sampling, local SGD, query gradients, attributes.

A round follows the usual protocol: sample a cohort, let every sampled client
train from the current global weights on its support split, collect the
update, the query-set gradient at the distributed weights, and the client
attributes, then hand everything to an aggregation strategy which produces
the next global weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .metrics import RoundMetrics, auc, logloss
from .model import Examples, ModelSpec
from .params import ParamVector, Partition, weighted_sum

log = logging.getLogger(__name__)

ATTRIBUTES = ("z1", "z2", "z3", "z4", "z5", "z6")
PER_CELL_ATTRIBUTES = frozenset({"z3"})


class EmptySupportError(ValueError):
    """The client has no support examples to train on."""


@dataclass
class ClientDataset:
    client_id: int
    support: Examples
    query: Examples
    validation: Examples

    @property
    def train(self) -> Examples:
        """Support and query together, the client's local training data."""
        if len(self.query) == 0:
            return self.support
        return Examples.concat([self.support, self.query])


def split_client(client_id: int, examples: Examples) -> ClientDataset:
    """Temporal split: last ceil(10%) -> validation, rest -> 80% support / 20% query.

    Sorting is stable, so equal timestamps keep their input order.
    """
    order = np.argsort(examples.timestamps, kind="stable")
    ex = examples[order]
    n = len(ex)
    n_val = (n + 9) // 10
    n_train = n - n_val
    n_support = (8 * n_train + 9) // 10
    return ClientDataset(
        client_id=int(client_id),
        support=ex[:n_support],
        query=ex[n_support:n_train],
        validation=ex[n_train:],
    )


@dataclass(frozen=True)
class LocalTrainConfig:
    lr: float = 0.01
    batch_size: int = 15
    epochs: int = 3

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("local training needs lr >= 0, batch_size >= 1, epochs >= 1")


@dataclass
class ClientRoundOutput:
    client_id: int
    delta: ParamVector
    query_grad: Optional[ParamVector]
    attrs: np.ndarray
    n_samples: int
    local_steps: int


def sample_clients(universe: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, round(fraction * N)) ids, ascending."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if len(universe) == 0:
        raise ValueError("cannot sample from an empty client universe")
    k = max(1, int(round(fraction * len(universe))))
    ids = np.asarray(universe)
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(int(ids[i]) for i in picked)


def _grad_values(w: ParamVector, batch: Examples, spec: ModelSpec) -> np.ndarray:
    p, cache = M._forward(w, batch.ids, spec)
    return M._backward(w, batch.ids, spec, cache, (p - batch.labels) / len(batch))


def local_train(w: ParamVector, ds: ClientDataset, cfg: LocalTrainConfig, spec: ModelSpec,
                rng: np.random.Generator):
    """Minibatch SGD on the support split; returns ``(delta, local_steps)``.

    The support set is reshuffled by ``rng`` at the start of every epoch.
    ``w`` itself is never modified.
    """
    support = ds.support
    n = len(support)
    if n == 0:
        raise EmptySupportError(f"client {ds.client_id} has an empty support set")
    M.check_example_ids(support, spec)
    current = w
    steps = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = support[perm[start:start + cfg.batch_size]]
            grad = _grad_values(current, batch, spec)
            current = current.with_values(current.values - cfg.lr * grad)
            steps += 1
    return current - w, steps


def query_gradient(w: ParamVector, ds: ClientDataset, spec: ModelSpec) -> ParamVector:
    """Summed (not averaged) loss gradient over the query split, at ``w``.

    An empty query split yields the zero vector.
    """
    if len(ds.query) == 0:
        return w.zeros_like()
    _, grad = M.loss_and_grad(w, ds.query, spec, reduction="sum")
    return grad


def compute_attributes(selected: Sequence[str], w: ParamVector, ds: ClientDataset, delta: ParamVector,
                       local_steps: int, pre_loss: Optional[float], post_loss: Optional[float],
                       spec: ModelSpec, *, query_grad: Optional[ParamVector] = None,
                       partition: Optional[Partition] = None) -> np.ndarray:
    """Client attributes as an array of shape (n_cells, len(selected)).

    z1 sample count, z2 mean loss of ``w`` on support+query, z3 per-cell L2
    norm of the query gradient, z4 post/pre training loss ratio on support,
    z5 positive-label rate, z6 number of distinct (field, id) pairs.  Only z3
    varies across cells; the others are broadcast.
    """
    n_cells = len(partition) if partition is not None else 1
    out = np.zeros((n_cells, len(selected)))
    if not selected:
        return out
    local = ds.train
    for j, name in enumerate(selected):
        if name == "z1":
            out[:, j] = len(ds.support)
        elif name == "z2":
            out[:, j] = M.mean_loss(w, local, spec)
        elif name == "z3":
            if query_grad is None or partition is None:
                raise ValueError("z3 needs the query gradient and the partition")
            for c in range(n_cells):
                cell = partition.gather(query_grad, c)
                out[c, j] = np.sqrt(np.dot(cell, cell))
        elif name == "z4":
            if pre_loss is None or post_loss is None:
                raise ValueError("z4 needs pre- and post-training support losses")
            out[:, j] = 1.0 if pre_loss == 0 else post_loss / pre_loss
        elif name == "z5":
            out[:, j] = float(local.labels.mean())
        elif name == "z6":
            out[:, j] = sum(len(np.unique(local.ids[:, f])) for f in range(local.ids.shape[1]))
        else:
            raise ValueError(f"unknown attribute {name!r}")
    return out


@dataclass
class RoundConfig:
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    fraction: float = 0.1
    seed: int = 0
    eval_mode: str = "pooled"


@dataclass
class FLState:
    w: ParamVector
    spec: ModelSpec
    partition: Partition
    clients: dict[int, ClientDataset]
    round: int = 0
    validation: Optional[Examples] = None

    def __post_init__(self):
        self.universe = sorted(cid for cid, ds in self.clients.items() if len(ds.support) > 0)
        if self.validation is None:
            parts = [ds.validation for _, ds in sorted(self.clients.items()) if len(ds.validation)]
            self.validation = Examples.concat(parts) if parts else None


def client_update(w: ParamVector, ds: ClientDataset, strategy, cfg: RoundConfig, spec: ModelSpec,
                  partition: Partition, rng: np.random.Generator) -> ClientRoundOutput:
    attrs = tuple(getattr(strategy, "attributes", ()))
    # query gradient is taken before local training, at the distributed weights
    qgrad = query_gradient(w, ds, spec) if strategy.needs_query_grad else None
    pre_loss = M.mean_loss(w, ds.support, spec) if "z4" in attrs else None
    delta, steps = local_train(w, ds, cfg.local, spec, rng)
    post_loss = M.mean_loss(w + delta, ds.support, spec) if "z4" in attrs else None
    z = compute_attributes(attrs, w, ds, delta, steps, pre_loss, post_loss, spec,
                           query_grad=qgrad, partition=partition)
    return ClientRoundOutput(ds.client_id, delta, qgrad, z, len(ds.support), steps)


def evaluate(w: ParamVector, state: FLState, mode: str = "pooled"):
    """(auc, logloss) on held-out validation data, pooled or client-averaged."""
    if mode == "pooled":
        val = state.validation
        if val is None:
            return None, float("nan")
        p = M.predict_batch(w, val, state.spec)
        return auc(p, val.labels), logloss(p, val.labels)
    if mode != "macro":
        raise ValueError(f"unknown eval mode {mode!r}")
    aucs, losses = [], []
    for cid in sorted(state.clients):
        val = state.clients[cid].validation
        if len(val) == 0:
            continue
        p = M.predict_batch(w, val, state.spec)
        a = auc(p, val.labels)
        if a is not None:
            aucs.append(a)
        losses.append(logloss(p, val.labels))
    return (float(np.mean(aucs)) if aucs else None), float(np.mean(losses))


def run_round(state: FLState, strategy, cfg: RoundConfig):
    """Run one communication round; returns ``(new_state, RoundMetrics)``."""
    t = state.round + 1
    w = state.w
    outputs: list[ClientRoundOutput] = []
    if state.universe:
        cohort = sample_clients(state.universe, cfg.fraction, np.random.default_rng([cfg.seed, t, 0]))
        for cid in cohort:
            # one shuffling stream per round: identical clients produce identical updates
            rng = np.random.default_rng([cfg.seed, t, 1])
            outputs.append(client_update(w, state.clients[cid], strategy, cfg, state.spec,
                                         state.partition, rng))
    if outputs:
        w = strategy.aggregate_and_step(outputs, w, t)
    else:
        log.warning("round %d has no trainable clients; skipping", t)
    new_state = FLState(w, state.spec, state.partition, state.clients, t, state.validation)
    a, ll = evaluate(w, new_state, cfg.eval_mode)
    diag = strategy.diagnostics() if hasattr(strategy, "diagnostics") else {}
    metrics = RoundMetrics(
        round=t,
        auc=a,
        logloss=ll,
        n_clients=len(outputs),
        uplink_floats=strategy.uplink_factor * w.size * len(outputs),
        theta_s=diag.get("theta_s", {}),
        attr_weights=diag.get("attr_weights", {}),
    )
    return new_state, metrics


def sum_query_grads(outputs: Sequence[ClientRoundOutput]) -> ParamVector:
    """g = sum_k g_k over the cohort, ascending client id."""
    grads = [o.query_grad for o in sorted(outputs, key=lambda o: o.client_id)]
    return weighted_sum(grads, [1.0] * len(grads))
