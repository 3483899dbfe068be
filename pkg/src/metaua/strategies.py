"""Aggregation strategies driven by :func:`metaua.fl.run_round`.

A strategy owns its server-side state (optimizer moments, meta-parameters,
snapshots) and exposes ``aggregate_and_step(outputs, w, t) -> w_new``.
"""

from __future__ import annotations

from typing import Sequence

from .aggregation import ServerOptState, fedavg_aggregate, fednova_aggregate, server_step
from .fl import ATTRIBUTES, sum_query_grads
from .meta import MetaParams, MetaUAConfig, metaua_round
from .params import ParamVector, Partition


class Strategy:
    name = "base"
    needs_query_grad = False
    uplink_factor = 1
    attributes: tuple[str, ...] = ()

    def __init__(self, server: str = "sgd", gamma_s: float = 1.0, beta1: float = 0.9, beta2: float = 0.99,
                 epsilon: float = 1e-8):
        self.server = server
        self.hparams = dict(gamma_s=gamma_s, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.opt_state = None

    def init(self, w: ParamVector, partition: Partition) -> None:
        self.partition = partition
        self.opt_state = ServerOptState.create(self.server, w, **self.hparams)

    def aggregate(self, outputs) -> ParamVector:
        raise NotImplementedError

    def aggregate_and_step(self, outputs, w: ParamVector, t: int) -> ParamVector:
        if self.opt_state is None:
            raise RuntimeError("strategy.init() was not called")
        w_new, self.opt_state = server_step(self.opt_state, w, self.aggregate(outputs))
        return w_new

    def diagnostics(self) -> dict:
        return {}


class FedAvg(Strategy):
    name = "fedavg"

    def __init__(self, server: str = "sgd", gamma_s: float = 1.0, weighting: str = "samples", **kw):
        super().__init__(server, gamma_s, **kw)
        self.weighting = weighting

    def aggregate(self, outputs):
        return fedavg_aggregate(outputs, self.weighting)


class FedNova(Strategy):
    name = "fednova"

    def aggregate(self, outputs):
        return fednova_aggregate(outputs)


class FedAdagrad(FedAvg):
    name = "fedadagrad"

    def __init__(self, gamma_s: float = 0.1, weighting: str = "samples", **kw):
        super().__init__("adagrad", gamma_s, weighting, **kw)


class FedAdam(FedAvg):
    name = "fedadam"

    def __init__(self, gamma_s: float = 0.1, weighting: str = "samples", **kw):
        super().__init__("adam", gamma_s, weighting, **kw)


class MetaUA(Strategy):
    """Learned per-cell client weighting and step scaling on top of a server optimizer."""

    name = "metaua"
    needs_query_grad = True
    uplink_factor = 2

    def __init__(self, server: str = "adagrad", gamma_s: float = 0.1, attributes: Sequence[str] = ("z2",),
                 gamma_meta: float = 0.1, learn_scaling: bool = True, learn_weighting: bool = True,
                 frozen: bool = False, **kw):
        super().__init__(server, gamma_s, **kw)
        unknown = set(attributes) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown attributes {sorted(unknown)}")
        self.attributes = tuple(attributes)
        self.cfg = MetaUAConfig(gamma_meta, learn_scaling, learn_weighting, frozen)
        self.theta = None
        self.snapshot = None

    def init(self, w, partition):
        super().init(w, partition)
        self.theta = MetaParams.init(len(partition), len(self.attributes), frozen=self.cfg.frozen)
        self.snapshot = None

    def aggregate_and_step(self, outputs, w, t):
        g_total = sum_query_grads(outputs) if self.snapshot is not None else None
        w_new, self.theta, self.snapshot, self.opt_state = metaua_round(
            outputs, self.theta, self.snapshot, self.opt_state, w, g_total, self.cfg, self.partition)
        return w_new

    def diagnostics(self):
        names = self.partition.names
        ts = self.theta.theta_s
        cols = list(self.attributes) + ["bias"]
        return {
            "theta_s": {n: float(v) for n, v in zip(names, ts)},
            "attr_weights": {n: dict(zip(cols, map(float, row))) for n, row in zip(names, self.theta.theta_alpha)},
        }


STRATEGIES = {
    "fedavg": FedAvg,
    "fednova": FedNova,
    "fedadagrad": FedAdagrad,
    "fedadam": FedAdam,
    "metaua": MetaUA,
}
