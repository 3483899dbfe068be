"""Experiment configuration, runs, strategy comparisons and sweeps.

Config files are TOML.  Every key has a default, so an empty file is a valid
(synthetic, MetaUA, 200-round) experiment::

    name = "metaua"
    strategy = "metaua"          # fedavg | fednova | fedadagrad | fedadam | metaua
    rounds = 200
    fraction = 0.1
    seed = 0
    output_dir = "runs/metaua"
    eval_mode = "pooled"        # or "macro"
    attributes = ["z2"]          # any of z1..z6, or [] / "none"
    gamma_meta = 0.1
    frozen = false               # MetaUA with scaling 1 and uniform weights

    [ablation]
    weighting = true
    scaling = true

    [server]                     # defaults depend on the strategy
    kind = "adagrad"
    gamma_s = 0.1
    beta1 = 0.9
    beta2 = 0.99
    epsilon = 1e-8
    weighting = "samples"        # or "uniform" (fedavg/fedadagrad/fedadam)

    [local]
    lr = 0.01
    batch_size = 15
    epochs = 3

    [model]
    embed_dim = 4
    cross_layers = 1
    hidden = [16, 8]

    [data]
    source = "synthetic"         # or "csv", with path = "file.csv"
    n_clients = 200
    label_shift_std = 1.0
    # ... any SyntheticConfig field; seed defaults to the experiment seed

``metrics.csv`` columns: ``round, auc, logloss, n_clients, uplink_bytes,
theta_s_mean``, followed for MetaUA runs by ``theta_s[<cell>]`` and
``theta_alpha[<cell>][<attr>]`` for every partition cell.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .data import Federation, SyntheticConfig, generate_synthetic, load_csv
from .fl import ATTRIBUTES, FLState, LocalTrainConfig, RoundConfig, run_round
from .metrics import RoundMetrics
from .model import ModelSpec, init_params
from .params import ParamVector, layerwise_partition
from .strategies import STRATEGIES

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CHECKPOINTS = (20, 50, 100, 150, 200)
BASE_COLUMNS = ("round", "auc", "logloss", "n_clients", "uplink_bytes", "theta_s_mean")

_SERVER_DEFAULTS = {
    "fedavg": dict(kind="sgd", gamma_s=1.0),
    "fednova": dict(kind="sgd", gamma_s=1.0),
    "fedadagrad": dict(kind="adagrad", gamma_s=0.1),
    "fedadam": dict(kind="adam", gamma_s=0.1),
    "metaua": dict(kind="adagrad", gamma_s=0.1),
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ServerConfig:
    kind: Optional[str] = None
    gamma_s: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weighting: str = "samples"


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    synthetic: dict = field(default_factory=dict)

    def key(self, seed: int):
        if self.source == "csv":
            return ("csv", str(Path(self.path).resolve()))
        return ("synthetic", tuple(sorted(self.synthetic_config(seed).__dict__.items())))

    def synthetic_config(self, seed: int) -> SyntheticConfig:
        params = {"seed": seed, **self.synthetic}
        return SyntheticConfig(**params)


@dataclass
class ExperimentConfig:
    name: Optional[str] = None
    strategy: str = "metaua"
    rounds: int = 200
    fraction: float = 0.1
    seed: int = 0
    output_dir: Optional[str] = None
    eval_mode: str = "pooled"
    attributes: tuple = ("z2",)
    gamma_meta: float = 0.1
    frozen: bool = False
    ablation_weighting: bool = True
    ablation_scaling: bool = True
    server: ServerConfig = field(default_factory=ServerConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate()

    @property
    def label(self) -> str:
        return self.name or self.strategy

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not isinstance(self.rounds, int) or self.rounds < 1:
            raise ConfigError("rounds must be an integer >= 1")
        if not 0.0 < float(self.fraction) <= 1.0:
            raise ConfigError("fraction must be in (0, 1]")
        if self.eval_mode not in ("pooled", "macro"):
            raise ConfigError("eval_mode must be 'pooled' or 'macro'")
        if isinstance(self.attributes, str):
            if self.attributes != "none":
                raise ConfigError("attributes must be a list or 'none'")
            self.attributes = ()
        self.attributes = tuple(self.attributes)
        bad = set(self.attributes) - set(ATTRIBUTES)
        if bad:
            raise ConfigError(f"unknown attributes {sorted(bad)}")
        if self.gamma_meta < 0:
            raise ConfigError("gamma_meta must be >= 0")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if self.data.source == "csv" and not self.data.path:
            raise ConfigError("data.path is required for csv data")
        if self.data.source == "synthetic":
            try:
                self.data.synthetic_config(self.seed)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad synthetic data config: {exc}") from None
        kind = self.server_kind
        if kind not in ("sgd", "adagrad", "adam"):
            raise ConfigError(f"unknown server optimizer {kind!r}")
        if self.server.weighting not in ("samples", "uniform"):
            raise ConfigError("server.weighting must be 'samples' or 'uniform'")

    @property
    def server_kind(self) -> str:
        return self.server.kind or _SERVER_DEFAULTS[self.strategy]["kind"]

    @property
    def gamma_s(self) -> float:
        if self.server.gamma_s is not None:
            return float(self.server.gamma_s)
        return _SERVER_DEFAULTS[self.strategy]["gamma_s"]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attributes"] = list(self.attributes)
        d["server"]["kind"] = self.server_kind
        d["server"]["gamma_s"] = self.gamma_s
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        try:
            server = ServerConfig(**raw.pop("server", {}))
            local = LocalTrainConfig(**raw.pop("local", {}))
            data_raw = dict(raw.pop("data", {}))
            source = data_raw.pop("source", None)
            path = data_raw.pop("path", None)
            data = DataConfig(source=source or ("csv" if path else "synthetic"), path=path, synthetic=data_raw)
            ablation = raw.pop("ablation", {})
            unknown_ab = set(ablation) - {"weighting", "scaling"}
            if unknown_ab:
                raise ConfigError(f"unknown ablation keys {sorted(unknown_ab)}")
            model = raw.pop("model", {})
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown config keys {sorted(unknown)}")
            return cls(server=server, local=local, data=data, model=model,
                       ablation_weighting=bool(ablation.get("weighting", True)),
                       ablation_scaling=bool(ablation.get("scaling", True)), **raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def load_federation(cfg: ExperimentConfig) -> Federation:
    if cfg.data.source == "csv":
        return load_csv(cfg.data.path)
    return generate_synthetic(cfg.data.synthetic_config(cfg.seed))


def build_spec(cfg: ExperimentConfig, federation: Federation) -> ModelSpec:
    try:
        return ModelSpec(tuple(federation.fields), **cfg.model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from None


def build_strategy(cfg: ExperimentConfig):
    s = cfg.server
    common = dict(gamma_s=cfg.gamma_s, beta1=s.beta1, beta2=s.beta2, epsilon=s.epsilon)
    if cfg.strategy == "metaua":
        return STRATEGIES["metaua"](server=cfg.server_kind, attributes=cfg.attributes, gamma_meta=cfg.gamma_meta,
                                    learn_scaling=cfg.ablation_scaling, learn_weighting=cfg.ablation_weighting,
                                    frozen=cfg.frozen, **common)
    if cfg.strategy == "fednova":
        return STRATEGIES["fednova"](server=cfg.server_kind, **common)
    if cfg.strategy == "fedavg":
        return STRATEGIES["fedavg"](server=cfg.server_kind, weighting=s.weighting, **common)
    strat = STRATEGIES[cfg.strategy](weighting=s.weighting, **common)
    strat.server = cfg.server_kind
    return strat


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    summary: dict
    weights: ParamVector
    weight_trace: Optional[list[ParamVector]] = None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_columns(metrics: Sequence[RoundMetrics]) -> list[str]:
    cols = list(BASE_COLUMNS)
    if metrics and metrics[0].theta_s:
        first = metrics[0]
        cols += [f"theta_s[{c}]" for c in first.theta_s]
        for c, weights in first.attr_weights.items():
            cols += [f"theta_alpha[{c}][{a}]" for a in weights]
    return cols


def metrics_rows(metrics: Sequence[RoundMetrics]) -> list[dict]:
    rows = []
    for m in metrics:
        row = {"round": m.round, "auc": m.auc, "logloss": m.logloss, "n_clients": m.n_clients,
               "uplink_bytes": m.uplink_bytes, "theta_s_mean": m.theta_s_mean}
        for c, v in m.theta_s.items():
            row[f"theta_s[{c}]"] = v
        for c, weights in m.attr_weights.items():
            for a, v in weights.items():
                row[f"theta_alpha[{c}][{a}]"] = v
        rows.append(row)
    return rows


def metrics_csv(metrics: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    cols = metrics_columns(metrics)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in metrics_rows(metrics):
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def checkpoint_rows(metrics: Sequence[RoundMetrics], checkpoints=CHECKPOINTS) -> list[dict]:
    by_round = {m.round: m for m in metrics}
    return [{"round": r, "auc": by_round[r].auc, "logloss": by_round[r].logloss}
            for r in checkpoints if r in by_round]


def run_experiment(cfg: ExperimentConfig, federation: Optional[Federation] = None, *, write: bool = True,
                   trace_weights: bool = False) -> ExperimentResult:
    """Build the federation, run ``cfg.rounds`` rounds, evaluate after each one."""
    cfg.validate()
    start = time.perf_counter()
    if federation is None:
        federation = load_federation(cfg)
    spec = build_spec(cfg, federation)
    partition = layerwise_partition(spec)
    w = init_params(spec, cfg.seed)
    strategy = build_strategy(cfg)
    strategy.init(w, partition)
    state = FLState(w, spec, partition, federation.client_map)
    rcfg = RoundConfig(local=cfg.local, fraction=float(cfg.fraction), seed=cfg.seed, eval_mode=cfg.eval_mode)
    metrics = []
    trace = [w] if trace_weights else None
    for _ in range(cfg.rounds):
        state, m = run_round(state, strategy, rcfg)
        metrics.append(m)
        if trace is not None:
            trace.append(state.w)
    last = metrics[-1]
    summary = {
        "name": cfg.label,
        "strategy": cfg.strategy,
        "rounds": cfg.rounds,
        "n_clients_total": len(federation),
        "n_trainable_clients": len(state.universe),
        "n_params": spec.n_params,
        "final": {"auc": last.auc, "logloss": last.logloss},
        "checkpoints": checkpoint_rows(metrics),
        "uplink_bytes_total": sum(m.uplink_bytes for m in metrics),
        "theta_s_final": last.theta_s,
        "config": cfg.to_dict(),
        "runtime_sec": round(time.perf_counter() - start, 3),
    }
    if write and cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(metrics), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return ExperimentResult(cfg, metrics, summary, state.w, trace)


def _unique_labels(cfgs: Sequence[ExperimentConfig]) -> list[str]:
    labels, seen = [], {}
    for c in cfgs:
        base = c.label
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return labels


def compare(cfgs: Sequence[ExperimentConfig], output_dir=None, *, write: bool = True) -> dict:
    """Run several strategies on one shared federation; merge their curves.

    Returns ``{"labels", "results", "rows", "checkpoints"}`` where ``rows`` is
    the merged per-round table and ``checkpoints`` the round-20/50/100/150/200
    summary.
    """
    if not cfgs:
        raise ConfigError("compare needs at least one config")
    key = cfgs[0].data.key(cfgs[0].seed)
    for c in cfgs[1:]:
        if c.data.key(c.seed) != key or c.seed != cfgs[0].seed:
            raise ConfigError("compared configs must share the data source and seed")
    federation = load_federation(cfgs[0])
    labels = _unique_labels(cfgs)
    results = {}
    for label, c in zip(labels, cfgs):
        sub = None
        if write and output_dir:
            sub = str(Path(output_dir) / label)
        elif write:
            sub = c.output_dir
        results[label] = run_experiment(c.replace(output_dir=sub), federation, write=write)
    n_rounds = max(c.rounds for c in cfgs)
    rows = []
    for r in range(1, n_rounds + 1):
        row = {"round": r}
        for label in labels:
            ms = results[label].metrics
            m = ms[r - 1] if r <= len(ms) else None
            row[f"{label}.auc"] = m.auc if m else None
            row[f"{label}.logloss"] = m.logloss if m else None
        rows.append(row)
    checkpoints = [
        {"round": r, **{label: {"auc": rows[r - 1][f"{label}.auc"], "logloss": rows[r - 1][f"{label}.logloss"]}
                        for label in labels}}
        for r in CHECKPOINTS if r <= n_rounds
    ]
    out = {"labels": labels, "results": results, "rows": rows, "checkpoints": checkpoints}
    if write and output_dir:
        d = Path(output_dir)
        d.mkdir(parents=True, exist_ok=True)
        cols = ["round"] + [f"{label}.{k}" for label in labels for k in ("auc", "logloss")]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])
        (d / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")
        summary = {"labels": labels, "checkpoints": checkpoints,
                   "final": {label: results[label].summary["final"] for label in labels}}
        (d / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return out


SWEEPABLE = {"gamma_meta": float, "fraction": float, "seed": int, "rounds": int}


def sweep(cfg: ExperimentConfig, param: str, values: Sequence[Any], output_dir=None, *, write: bool = True) -> dict:
    """Re-run ``cfg`` for each value of one parameter (gamma_meta, fraction, ...)."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    cfgs = []
    for v in values:
        try:
            v = SWEEPABLE[param](v)
            cfgs.append(cfg.replace(**{param: v}, name=f"{cfg.label}_{param}={v}"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sweep value {v!r}: {exc}") from None
    if param == "seed":
        return {c.label: run_experiment(c, write=False) for c in cfgs}
    return compare(cfgs, output_dir, write=write)


def format_checkpoints(checkpoints: list[dict], labels: Sequence[str]) -> str:
    head = f"{'round':>5} " + " ".join(f"{lab + ' auc':>18} {lab + ' logloss':>22}" for lab in labels)
    lines = [head]
    for row in checkpoints:
        cells = []
        for lab in labels:
            a, ll = row[lab]["auc"], row[lab]["logloss"]
            cells.append(f"{(f'{a:.4f}' if a is not None else '-'):>18} {ll:>22.4f}")
        lines.append(f"{row['round']:>5} " + " ".join(cells))
    return "\n".join(lines)
