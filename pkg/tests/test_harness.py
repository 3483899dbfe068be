import json

import numpy as np
import pytest

from metaua.cli import main
from metaua.harness import CHECKPOINTS, ConfigError, DataConfig, ExperimentConfig, compare, run_experiment, sweep


def small(**kw):
    base = dict(rounds=3, fraction=0.2, data=DataConfig(synthetic={"n_clients": 20}))
    base.update(kw)
    return ExperimentConfig(**base)


def write_cfg(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_one_round_one_row(tmp_path):
    res = run_experiment(small(rounds=1, output_dir=str(tmp_path)))
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and len(res.metrics) == 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["rounds"] == 1 and summary["strategy"] == "metaua"


def test_metaua_logs_theta_columns(tmp_path):
    run_experiment(small(output_dir=str(tmp_path)))
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[:6] == ["round", "auc", "logloss", "n_clients", "uplink_bytes", "theta_s_mean"]
    assert "theta_s[out.bias]" in header and "theta_alpha[out.bias][z2]" in header


def test_rerun_is_byte_identical(tmp_path):
    for strategy in ("metaua", "fednova"):
        a, b = tmp_path / f"{strategy}a", tmp_path / f"{strategy}b"
        run_experiment(small(strategy=strategy, rounds=5, output_dir=str(a)))
        run_experiment(small(strategy=strategy, rounds=5, output_dir=str(b)))
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_compare_checkpoints_and_merged_csv(tmp_path):
    cfgs = [small(rounds=20, strategy=s, name=s) for s in ("fedavg", "metaua")]
    res = compare(cfgs, tmp_path)
    assert [r["round"] for r in res["checkpoints"]] == [20]
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "round,fedavg.auc,fedavg.logloss,metaua.auc,metaua.logloss"
    assert (tmp_path / "metaua" / "metrics.csv").exists()
    assert CHECKPOINTS == (20, 50, 100, 150, 200)


def test_compare_single_config_equals_run(tmp_path):
    cfg = small(rounds=4)
    res = compare([cfg], tmp_path)
    solo = run_experiment(cfg, write=False)
    assert [m.logloss for m in res["results"]["metaua"].metrics] == [m.logloss for m in solo.metrics]


def test_frozen_metaua_equals_uniform_fedadagrad_curves():
    from metaua.harness import ServerConfig
    data = DataConfig(synthetic={"n_clients": 20, "label_shift_std": 0.0, "samples_sigma": 0.0})
    a = ExperimentConfig(strategy="metaua", frozen=True, rounds=5, fraction=0.2, data=data, name="m")
    b = ExperimentConfig(strategy="fedadagrad", rounds=5, fraction=0.2, data=data, name="b",
                         server=ServerConfig(weighting="uniform"))
    res = compare([a, b], write=False)
    la = [m.logloss for m in res["results"]["m"].metrics]
    lb = [m.logloss for m in res["results"]["b"].metrics]
    assert np.max(np.abs(np.array(la) - lb)) <= 1e-9


def test_compare_rejects_mismatched_data():
    with pytest.raises(ConfigError):
        compare([small(), small(seed=1)], write=False)


def test_sweep_labels():
    res = sweep(small(rounds=2), "gamma_meta", ["0.1", "2"], write=False)
    assert res["labels"] == ["metaua_gamma_meta=0.1", "metaua_gamma_meta=2.0"]
    with pytest.raises(ConfigError):
        sweep(small(), "lr", [1], write=False)


@pytest.mark.parametrize("raw", [
    {"rounds": 0}, {"fraction": 1.5}, {"strategy": "fedsgd"}, {"attributes": ["z9"]},
    {"bogus": 1}, {"ablation": {"speed": True}}, {"data": {"source": "csv"}}, {"server": {"kind": "lamb"}},
    {"data": {"n_clients": 0}}, {"local": {"lr": -1}},
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_from_toml_and_defaults(tmp_path):
    cfg = ExperimentConfig.from_file(write_cfg(tmp_path / "c.toml", ""))
    assert (cfg.rounds, cfg.fraction, cfg.gamma_meta, cfg.strategy) == (200, 0.1, 0.1, "metaua")
    assert cfg.server_kind == "adagrad" and cfg.gamma_s == 0.1
    avg = ExperimentConfig.from_dict({"strategy": "fedavg", "attributes": "none", "ablation": {"scaling": False}})
    assert avg.server_kind == "sgd" and avg.gamma_s == 1.0 and avg.attributes == () and not avg.ablation_scaling


def test_uplink_metaua_is_double_fedavg():
    ra = run_experiment(small(strategy="fedavg", rounds=3), write=False).metrics
    rm = run_experiment(small(strategy="metaua", rounds=3), write=False).metrics
    for a, m in zip(ra, rm):
        assert a.n_clients == m.n_clients and m.uplink_bytes == 2 * a.uplink_bytes


# CLI

def test_cli_exit_codes(tmp_path, capsys):
    good = write_cfg(tmp_path / "g.toml", f'rounds = 2\noutput_dir = "{tmp_path / "out"}"\n[data]\nn_clients = 20\n')
    assert main(["run", "--config", good]) == 0
    assert (tmp_path / "out" / "metrics.csv").exists()
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["run", "--config", write_cfg(tmp_path / "b.toml", "rounds = 0\n")]) == 2
    assert main(["run", "--config", write_cfg(tmp_path / "bad.toml", "rounds = [\n")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["sweep", "--config", good, "--param", "lr", "--values", "1"]) == 2
    csv_cfg = write_cfg(tmp_path / "c.toml", f'[data]\npath = "{tmp_path / "nope.csv"}"\n')
    assert main(["run", "--config", csv_cfg]) == 2


def test_cli_runtime_error_exit_code(tmp_path, monkeypatch):
    import metaua.cli as cli

    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(cli, "run_experiment", boom)
    good = write_cfg(tmp_path / "g.toml", "rounds = 1\n")
    assert main(["run", "--config", good]) == 1


def test_cli_gen_data_then_run_csv(tmp_path):
    cfg = write_cfg(tmp_path / "g.toml", "[data]\nn_clients = 15\n")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    stats = json.loads((tmp_path / "d" / "stats.json").read_text())
    assert stats["n_clients"] == 15
    run_cfg = write_cfg(tmp_path / "r.toml", f'rounds = 2\n[data]\npath = "{tmp_path / "d" / "data.csv"}"\n')
    assert main(["run", "--config", run_cfg, "--out", str(tmp_path / "r")]) == 0
    assert len((tmp_path / "r" / "metrics.csv").read_text().splitlines()) == 3


def test_cli_compare_and_sweep(tmp_path):
    a = write_cfg(tmp_path / "a.toml", 'name = "a"\nstrategy = "fedavg"\nrounds = 2\n[data]\nn_clients = 20\n')
    b = write_cfg(tmp_path / "b.toml", 'name = "b"\nrounds = 2\n[data]\nn_clients = 20\n')
    assert main(["compare", "--config", a, b, "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "summary.json").exists()
    assert main(["sweep", "--config", b, "--param", "fraction", "--values", "0.1,0.05",
                 "--out", str(tmp_path / "sw")]) == 0
    header = (tmp_path / "sw" / "metrics.csv").read_text().splitlines()[0]
    assert "b_fraction=0.05.logloss" in header
