"""Online meta-learned update aggregation (MetaUA).

Per partition cell ``A`` the aggregated update is

    dw[A] = sigmoid(rho[A]) * sum_k alpha_k[A] * dw_k[A]
    alpha[A] = softmax_k( [zhat_k[A], 1] . theta_alpha[A] )

where ``zhat`` are cohort-normalised client attributes.  The meta loss for
round t-1's parameters is the summed query loss of the round-t cohort at
``w_t``; since ``w_t`` depends on the parameters only through the round t-1
server step, its gradient is the vector-Jacobian product

    dL/dtheta = g_t . d w_t / d theta = (g_t * J_server) . d dw / d theta

with ``J_server`` the (diagonal) Jacobian of the server step with respect to
the aggregated update.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .aggregation import ServerOptState, server_step, server_step_jacobian
from .params import ParamVector, Partition, weighted_sum

STD_FLOOR = 1e-8


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class MetaParams:
    """Scaling logits ``rho`` (n_cells,) and weighting params (n_cells, n_attrs + 1).

    ``frozen=True`` bypasses the sigmoid and softmax entirely: scaling is 1 and
    client weights are exactly uniform.  It exists for equivalence testing.
    """

    rho: np.ndarray
    theta_alpha: np.ndarray
    frozen: bool = False

    @classmethod
    def init(cls, n_cells: int, n_attrs: int, frozen: bool = False) -> "MetaParams":
        return cls(np.zeros(n_cells), np.zeros((n_cells, n_attrs + 1)), frozen)

    @property
    def theta_s(self) -> np.ndarray:
        if self.frozen:
            return np.ones_like(self.rho)
        return _sigmoid(self.rho)

    @property
    def n_cells(self) -> int:
        return len(self.rho)

    @property
    def n_attrs(self) -> int:
        return self.theta_alpha.shape[1] - 1


@dataclass(frozen=True)
class MetaGrad:
    rho: np.ndarray
    theta_alpha: np.ndarray


@dataclass(frozen=True)
class RoundSnapshot:
    """What the server keeps from round t-1 to differentiate through it at round t."""

    client_ids: tuple[int, ...]
    deltas: tuple[ParamVector, ...]
    attrs: tuple[np.ndarray, ...]
    opt_state_pre: ServerOptState
    w_pre: ParamVector


class AttrNormalizer:
    """Per-cell, per-attribute z-score over the current cohort."""

    def __init__(self, floor: float = STD_FLOOR):
        self.floor = floor

    def fit(self, attrs: np.ndarray) -> "AttrNormalizer":
        # attrs: (n_clients, n_cells, n_attrs)
        self.mean_ = attrs.mean(axis=0)
        self.std_ = np.maximum(attrs.std(axis=0), self.floor)
        return self

    def transform(self, attrs: np.ndarray) -> np.ndarray:
        return (attrs - self.mean_) / self.std_

    def fit_transform(self, attrs: np.ndarray) -> np.ndarray:
        return self.fit(attrs).transform(attrs)


@dataclass
class ForwardCache:
    deltas: np.ndarray       # (K, P) stacked client updates
    features: np.ndarray     # (K, C, n_attrs + 1) normalised attributes plus bias column
    scores: np.ndarray       # (C, K)
    alpha: np.ndarray        # (C, K)
    theta_s: np.ndarray      # (C,)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _stack_attrs(attrs: Sequence[np.ndarray], n_cells: int, n_attrs: int) -> np.ndarray:
    rows = []
    for a in attrs:
        a = np.asarray(a, dtype=np.float64)
        if n_attrs == 0:
            a = np.zeros((n_cells, 0))
        elif a.shape[-1] != n_attrs:
            raise ValueError(f"expected {n_attrs} attributes per client, got {a.shape[-1]}")
        rows.append(np.broadcast_to(a, (n_cells, n_attrs)))
    return np.stack(rows)


def _features(attrs: Sequence[np.ndarray], n_cells: int, n_attrs: int) -> np.ndarray:
    z = _stack_attrs(attrs, n_cells, n_attrs)
    zhat = AttrNormalizer().fit_transform(z) if n_attrs else z
    bias = np.ones(zhat.shape[:2] + (1,))
    return np.concatenate([zhat, bias], axis=2)


def meta_forward(outputs, theta: MetaParams, partition: Partition, *, deltas=None, attrs=None):
    """Aggregate client updates with the learned per-cell weights and scaling.

    ``outputs`` are ClientRoundOutput-like objects with ``delta`` and
    ``attrs``; ``deltas``/``attrs`` may be passed directly instead.  Returns
    ``(delta, cache)``.
    """
    if deltas is None:
        deltas = [o.delta for o in outputs]
        attrs = [o.attrs for o in outputs]
    if not deltas:
        raise ValueError("meta_forward needs at least one client update")
    K = len(deltas)
    C = theta.n_cells
    if len(partition) != C:
        raise ValueError("meta-parameters and partition have different cell counts")
    if theta.frozen:
        delta = weighted_sum(deltas, [1.0 / K] * K)
        alpha = np.full((C, K), 1.0 / K)
        cache = ForwardCache(np.stack([d.values for d in deltas]), np.ones((K, C, 1)),
                             np.zeros((C, K)), alpha, np.ones(C))
        return delta, cache
    first = deltas[0]
    for d in deltas:
        first.check_congruent(d)
    D = np.stack([d.values for d in deltas])
    X = _features(attrs, C, theta.n_attrs)
    scores = np.einsum("kca,ca->ck", X, theta.theta_alpha)
    alpha = softmax(scores, axis=1)
    ts = theta.theta_s
    out = np.empty(first.size)
    for c, slices in enumerate(partition.slices(first.blocks)):
        for s in slices:
            out[s] = ts[c] * (alpha[c] @ D[:, s])
    return first.with_values(out), ForwardCache(D, X, scores, alpha, ts)


def meta_backward(g_total: ParamVector, snapshot: Optional[RoundSnapshot], theta_prev: MetaParams,
                  partition: Partition) -> MetaGrad:
    """Gradient of ``g_total . w_t`` with respect to round t-1's meta-parameters.

    ``w_t`` is replayed from the snapshot as
    ``server_step(opt_state_pre, w_pre, meta_forward(snapshot, theta_prev))``.
    The step's moments m_{t-2}, M_{t-2} are constants.
    """
    if snapshot is None:
        raise ValueError("meta_backward needs the previous round's snapshot")
    delta, cache = meta_forward(None, theta_prev, partition, deltas=list(snapshot.deltas),
                                attrs=list(snapshot.attrs))
    g_total.check_congruent(delta)
    v = g_total.values * server_step_jacobian(snapshot.opt_state_pre, delta)
    C = theta_prev.n_cells
    d_rho = np.zeros(C)
    d_alpha = np.zeros_like(theta_prev.theta_alpha)
    if theta_prev.frozen:
        return MetaGrad(d_rho, d_alpha)
    D = cache.deltas
    for c, slices in enumerate(partition.slices(delta.blocks)):
        # contrib[k] = v[A] . dw_k[A]
        contrib = np.zeros(D.shape[0])
        for s in slices:
            contrib += D[:, s] @ v[s]
        a = cache.alpha[c]
        ts = cache.theta_s[c]
        mixed = float(a @ contrib)
        d_rho[c] = ts * (1.0 - ts) * mixed
        d_scores = ts * a * (contrib - mixed)
        d_alpha[c] = d_scores @ cache.features[:, c, :]
    return MetaGrad(d_rho, d_alpha)


def meta_step(theta: MetaParams, grad: MetaGrad, gamma_meta: float, *, learn_scaling: bool = True,
              learn_weighting: bool = True) -> MetaParams:
    """One gradient-descent step on (rho, theta_alpha); disabled parts stay put."""
    rho = theta.rho - gamma_meta * grad.rho if learn_scaling else theta.rho
    ta = theta.theta_alpha - gamma_meta * grad.theta_alpha if learn_weighting else theta.theta_alpha
    return replace(theta, rho=rho, theta_alpha=ta)


def delayed_meta_loss(theta: MetaParams, g_total: ParamVector, snapshot: RoundSnapshot,
                      partition: Partition) -> float:
    """g_total . w_t(theta), replaying round t-1 with ``theta``."""
    delta, _ = meta_forward(None, theta, partition, deltas=list(snapshot.deltas), attrs=list(snapshot.attrs))
    w_t, _ = server_step(snapshot.opt_state_pre, snapshot.w_pre, delta)
    return float(np.dot(g_total.values, w_t.values))


@dataclass(frozen=True)
class MetaUAConfig:
    gamma_meta: float = 0.1
    learn_scaling: bool = True
    learn_weighting: bool = True
    frozen: bool = False


def metaua_round(outputs, theta: MetaParams, snapshot: Optional[RoundSnapshot], opt_state: ServerOptState,
                 w: ParamVector, g_total: Optional[ParamVector], cfg: MetaUAConfig, partition: Partition):
    """Backward pass for round t-1 (if any), then forward aggregation and server step.

    Returns ``(w_new, theta_new, snapshot_new, opt_state_new)``.
    """
    if snapshot is not None and not cfg.frozen:
        if g_total is None:
            raise ValueError("a meta update needs the cohort's summed query gradient")
        grad = meta_backward(g_total, snapshot, theta, partition)
        theta = meta_step(theta, grad, cfg.gamma_meta, learn_scaling=cfg.learn_scaling,
                          learn_weighting=cfg.learn_weighting)
    delta, _ = meta_forward(outputs, theta, partition)
    w_new, opt_new = server_step(opt_state, w, delta)
    snap = RoundSnapshot(
        client_ids=tuple(o.client_id for o in outputs),
        deltas=tuple(o.delta for o in outputs),
        attrs=tuple(np.asarray(o.attrs) for o in outputs),
        opt_state_pre=opt_state,
        w_pre=w,
    )
    return w_new, theta, snap, opt_new
