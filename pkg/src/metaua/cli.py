"""Command line entry point: ``metaua gen-data | run | compare | sweep``.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import IngestionError, generate_examples, write_csv
from .harness import SWEEPABLE, ConfigError, ExperimentConfig, compare, format_checkpoints, run_experiment, sweep

log = logging.getLogger("metaua")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors already; keep that but raise instead so main() owns exiting
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metaua", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic federation of a config as CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override output_dir")

    c = sub.add_parser("compare", help="run several configs on one shared federation")
    c.add_argument("--config", required=True, nargs="+")
    c.add_argument("--out", default="runs/compare")

    s = sub.add_parser("sweep", help="re-run a config over values of one parameter")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, choices=[k for k in SWEEPABLE if k != "seed"])
    s.add_argument("--values", required=True, help="comma separated, e.g. 0.1,0.5,1,2,5")
    s.add_argument("--out", default=None)
    return p


def _gen_data(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if cfg.data.source != "synthetic":
        raise ConfigError("gen-data needs a synthetic data config")
    syn = cfg.data.synthetic_config(cfg.seed)
    raw = generate_examples(syn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "data.csv", raw, syn.fields)
    sizes = np.array([len(raw[k]) for k in sorted(raw)])
    rates = np.array([raw[k].labels.mean() for k in sorted(raw)])
    stats = {
        "n_clients": len(raw),
        "n_examples": int(sizes.sum()),
        "samples_per_client": {"min": int(sizes.min()), "median": float(np.median(sizes)), "max": int(sizes.max())},
        "positive_rate": float(np.concatenate([raw[k].labels for k in raw]).mean()),
        "client_positive_rate_std": float(rates.std()),
        "fields": syn.fields,
        "synthetic": syn.__dict__,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {stats['n_examples']} examples for {stats['n_clients']} clients to {out / 'data.csv'}")
    return EXIT_OK


def _run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = args.out or cfg.output_dir or str(Path("runs") / cfg.label)
    res = run_experiment(cfg.replace(output_dir=out))
    print(format_checkpoints([{"round": c["round"], cfg.label: c} for c in res.summary["checkpoints"]], [cfg.label]))
    f = res.summary["final"]
    print(f"final round {cfg.rounds}: auc={f['auc']} logloss={f['logloss']:.6f} -> {out}")
    return EXIT_OK


def _compare(args) -> int:
    cfgs = [ExperimentConfig.from_file(p) for p in args.config]
    res = compare(cfgs, args.out)
    print(format_checkpoints(res["checkpoints"], res["labels"]))
    print(f"-> {args.out}")
    return EXIT_OK


def _sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    out = args.out or str(Path("runs") / f"sweep_{args.param}")
    res = sweep(cfg, args.param, values, out)
    print(format_checkpoints(res["checkpoints"], res["labels"]))
    print(f"-> {out}")
    return EXIT_OK


COMMANDS = {"gen-data": _gen_data, "run": _run, "compare": _compare, "sweep": _sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"metaua: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, IngestionError) as exc:
        print(f"metaua: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - anything past validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"metaua: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
