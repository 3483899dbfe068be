"""Baseline update aggregation (FedAvg, FedNova) and server optimizers.

Server optimizers treat the aggregated update as an ascent-ready direction
(client updates are ``w_k - w``), so every rule *adds* its step:

    sgd:      w' = w + lr * delta
    adagrad:  m' = b1*m + (1-b1)*delta;  M' = M + delta**2
    adam:     m' = b1*m + (1-b1)*delta;  M' = b2*M + (1-b2)*delta**2
    both:     w' = w + lr * m' / (sqrt(M') + eps)

No bias correction is applied to the adam moments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .params import ParamVector, weighted_sum

SERVER_KINDS = ("sgd", "adagrad", "adam")


@dataclass(frozen=True)
class ServerOptState:
    kind: str
    m: ParamVector
    M: ParamVector
    gamma_s: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in SERVER_KINDS:
            raise ValueError(f"unknown server optimizer {self.kind!r}")
        self.m.check_congruent(self.M)

    @classmethod
    def create(cls, kind: str, like: ParamVector, **hparams) -> "ServerOptState":
        zeros = like.zeros_like()
        return cls(kind, zeros, zeros, **hparams)


def fedavg_aggregate(outputs: Sequence, weighting: str = "samples") -> ParamVector:
    """Sample-weighted mean of client deltas: sum(n_k * dw_k) / sum(n_k).

    ``weighting="uniform"`` gives the plain mean regardless of sample counts.
    """
    if not outputs:
        raise ValueError("fedavg_aggregate needs at least one client output")
    if weighting == "uniform":
        k = len(outputs)
        return weighted_sum([o.delta for o in outputs], [1.0 / k] * k)
    if weighting != "samples":
        raise ValueError(f"unknown weighting {weighting!r}")
    n = float(sum(o.n_samples for o in outputs))
    if n <= 0:
        raise ValueError("total sample count is zero")
    return weighted_sum([o.delta for o in outputs], [o.n_samples / n for o in outputs])


def fednova_aggregate(outputs: Sequence) -> ParamVector:
    """FedNova: (sum_k tau_k n_k/n) * sum_k (n_k/n) (1/tau_k) dw_k."""
    if not outputs:
        raise ValueError("fednova_aggregate needs at least one client output")
    if any(o.local_steps < 1 for o in outputs):
        raise ValueError("every client needs local_steps >= 1 for FedNova")
    n = float(sum(o.n_samples for o in outputs))
    if n <= 0:
        raise ValueError("total sample count is zero")
    tau_eff = sum(o.local_steps * o.n_samples / n for o in outputs)
    weights = [tau_eff * (o.n_samples / n) / o.local_steps for o in outputs]
    return weighted_sum([o.delta for o in outputs], weights)


def _moments(state: ServerOptState, d: np.ndarray):
    m = state.beta1 * state.m.values + (1.0 - state.beta1) * d
    if state.kind == "adagrad":
        M = state.M.values + d * d
    else:
        M = state.beta2 * state.M.values + (1.0 - state.beta2) * (d * d)
    return m, M


def server_step(state: ServerOptState, w: ParamVector, delta: ParamVector):
    """One server update; returns ``(w_new, state_new)`` without mutating inputs."""
    w.check_congruent(delta)
    state.m.check_congruent(w)
    d = delta.values
    if state.kind == "sgd":
        w_new = w.with_values(w.values + state.gamma_s * d)
        return w_new, replace(state, step_count=state.step_count + 1)
    m, M = _moments(state, d)
    w_new = w.with_values(w.values + state.gamma_s * m / (np.sqrt(M) + state.epsilon))
    return w_new, replace(state, m=w.with_values(m), M=w.with_values(M), step_count=state.step_count + 1)


def server_step_jacobian(state_pre: ServerOptState, delta: ParamVector) -> np.ndarray:
    """Diagonal of d w_new / d delta for ``server_step(state_pre, w, delta)``.

    The step is elementwise, so its Jacobian is diagonal.  For the adaptive
    rules it is evaluated with the post-update moments m', M'; where M' is
    exactly zero the delta/sqrt(M') factor is taken as its limit, 0.
    """
    d = delta.values
    if state_pre.kind == "sgd":
        return np.full(d.shape, state_pre.gamma_s)
    m, M = _moments(state_pre, d)
    root = np.sqrt(M)
    d_root = np.divide(d, root, out=np.zeros_like(d), where=root > 0)
    if state_pre.kind == "adam":
        d_root = (1.0 - state_pre.beta2) * d_root
    denom = root + state_pre.epsilon
    return state_pre.gamma_s * ((1.0 - state_pre.beta1) * denom - m * d_root) / (denom * denom)
