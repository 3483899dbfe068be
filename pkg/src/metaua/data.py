"""Federations: a synthetic non-IID generator and per-user CSV ingestion.

CSV format: UTF-8, comma separated, header row.  Required columns are
``user_id``, ``item_id``, ``label`` (0/1) and ``timestamp`` (integer); any
other column is treated as a categorical context field.  Each user becomes
one client; categorical values are dictionary-encoded to 0-based ids in
order of first appearance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .fl import ClientDataset, split_client
from .model import Examples

REQUIRED_COLUMNS = ("user_id", "item_id", "label", "timestamp")


class IngestionError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Federation(list):
    """A list of ClientDataset plus the categorical fields they are encoded over."""

    def __init__(self, clients: Iterable[ClientDataset], fields: list[tuple[str, int]]):
        super().__init__(clients)
        self.fields = [(str(n), int(c)) for n, c in fields]

    @property
    def client_map(self) -> dict[int, ClientDataset]:
        return {c.client_id: c for c in self}


@dataclass(frozen=True)
class SyntheticConfig:
    """Ground-truth logistic model over user/item/context latent factors.

    Each client gets a bias offset ~ Normal(0, label_shift_std), which skews
    its click rate; sample counts are log-normal.
    """

    n_clients: int = 200
    samples_mu: float = 3.5
    samples_sigma: float = 0.5
    min_samples: int = 4
    n_items: int = 100
    n_context_values: int = 8
    label_shift_std: float = 1.0
    preference_dim: int = 4
    base_rate_logit: float = -0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "n_items", "n_context_values", "preference_dim", "min_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.label_shift_std < 0 or self.samples_sigma < 0:
            raise ValueError("label_shift_std and samples_sigma must be >= 0")

    @property
    def fields(self) -> list[tuple[str, int]]:
        return [("user_id", self.n_clients), ("item_id", self.n_items), ("context", self.n_context_values)]


def generate_examples(cfg: SyntheticConfig) -> dict[int, Examples]:
    """Raw (unsplit) per-client examples for the synthetic federation."""
    world = np.random.default_rng([cfg.seed, 0])
    scale = 1.0 / np.sqrt(cfg.preference_dim)
    users = world.normal(0.0, 1.0, (cfg.n_clients, cfg.preference_dim))
    items = world.normal(0.0, scale, (cfg.n_items, cfg.preference_dim))
    item_bias = world.normal(0.0, 0.5, cfg.n_items)
    context_bias = world.normal(0.0, 0.5, cfg.n_context_values)
    client_bias = world.normal(0.0, 1.0, cfg.n_clients) * cfg.label_shift_std
    sizes = np.maximum(cfg.min_samples,
                       np.round(world.lognormal(cfg.samples_mu, cfg.samples_sigma, cfg.n_clients))).astype(int)
    out = {}
    for k in range(cfg.n_clients):
        rng = np.random.default_rng([cfg.seed, 1, k])
        n = int(sizes[k])
        item = rng.integers(0, cfg.n_items, n)
        ctx = rng.integers(0, cfg.n_context_values, n)
        logit = (cfg.base_rate_logit + client_bias[k] + item_bias[item] + context_bias[ctx]
                 + items[item] @ users[k])
        p = 1.0 / (1.0 + np.exp(-logit))
        y = (rng.random(n) < p).astype(np.float64)
        ids = np.column_stack([np.full(n, k), item, ctx])
        out[k] = Examples(ids, y, np.arange(n))
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Federation:
    raw = generate_examples(cfg)
    return Federation([split_client(k, raw[k]) for k in sorted(raw)], cfg.fields)


def _parse_int(value: str, column: str, line: int) -> int:
    try:
        return int(value.strip())
    except (ValueError, AttributeError):
        raise IngestionError(f"column {column!r}: {value!r} is not an integer", line) from None


def load_csv(path, schema: Optional[dict] = None) -> Federation:
    """Read a per-user CTR file into one client per user.

    ``schema`` may rename the required columns, e.g. ``{"user_id": "uid"}``.
    """
    names = {c: c for c in REQUIRED_COLUMNS}
    if schema:
        names.update(schema)
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError("empty file", 1) from None
        missing = [names[c] for c in REQUIRED_COLUMNS if names[c] not in header]
        if missing:
            raise IngestionError(f"missing required columns {missing}", 1)
        col = {h: i for i, h in enumerate(header)}
        reserved = {names["label"], names["timestamp"]}
        field_cols = [names["user_id"], names["item_id"]] + [
            h for h in header if h not in reserved and h not in (names["user_id"], names["item_id"])]
        vocab: dict[str, dict[str, int]] = {f: {} for f in field_cols}
        rows: dict[int, list] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", line)
            label = _parse_int(row[col[names["label"]]], names["label"], line)
            if label not in (0, 1):
                raise IngestionError(f"label must be 0 or 1, got {label}", line)
            ts = _parse_int(row[col[names["timestamp"]]], names["timestamp"], line)
            ids = []
            for f in field_cols:
                value = row[col[f]].strip()
                table = vocab[f]
                if value not in table:
                    table[value] = len(table)
                ids.append(table[value])
            rows.setdefault(ids[0], []).append((ids, label, ts))
    if not rows:
        raise IngestionError("no data rows")
    clients = []
    for uid in sorted(rows):
        data = rows[uid]
        ex = Examples(np.array([r[0] for r in data]), np.array([r[1] for r in data], dtype=np.float64),
                      np.array([r[2] for r in data]))
        clients.append(split_client(uid, ex))
    fields = [(f, len(vocab[f])) for f in field_cols]
    return Federation(clients, fields)


def write_csv(path, examples: dict[int, Examples], fields: list[tuple[str, int]]) -> None:
    """Write raw per-client examples in the ingestion format (ids as values)."""
    names = [f for f, _ in fields]
    extra = names[2:]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", *extra, "label", "timestamp"])
        for k in sorted(examples):
            ex = examples[k]
            for ids, y, t in zip(ex.ids, ex.labels, ex.timestamps):
                w.writerow([*map(int, ids), int(y), int(t)])
