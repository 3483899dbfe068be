import numpy as np
import pytest

from metaua.data import IngestionError, SyntheticConfig, generate_examples, generate_synthetic, load_csv, write_csv


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def two_user_csv(tmp_path):
    rows = ["user_id,item_id,genre,label,timestamp"]
    for u in ("alice", "bob"):
        for t in range(5):
            rows.append(f"{u},m{t % 3},g{t % 2},{t % 2},{10 - t}")
    return write(tmp_path / "d.csv", "\n".join(rows) + "\n")


def test_two_user_file_splits(tmp_path):
    fed = load_csv(two_user_csv(tmp_path))
    assert len(fed) == 2
    for ds in fed:
        assert len(ds.support) + len(ds.query) == 4 and len(ds.validation) == 1
        # validation is the latest row
        assert ds.validation.timestamps[0] == 10
    assert [f for f, _ in fed.fields] == ["user_id", "item_id", "genre"]


def test_ten_row_users_split_nine_one(tmp_path):
    rows = ["user_id,item_id,label,timestamp"] + [f"{u},{i},{i % 2},{i}" for u in (1, 2) for i in range(10)]
    fed = load_csv(write(tmp_path / "d.csv", "\n".join(rows)))
    assert [(len(d.train), len(d.validation)) for d in fed] == [(9, 1), (9, 1)]


def test_bad_label_reports_line(tmp_path):
    p = write(tmp_path / "d.csv", "user_id,item_id,label,timestamp\n1,2,0,0\n1,3,2,1\n")
    with pytest.raises(IngestionError) as exc:
        load_csv(p)
    assert exc.value.line == 3


@pytest.mark.parametrize("text,line", [
    ("user_id,label,timestamp\n1,0,0\n", 1),
    ("user_id,item_id,label,timestamp\n1,2,x,0\n", 2),
    ("user_id,item_id,label,timestamp\n1,2,0,0\n1,2,0\n", 3),
    ("user_id,item_id,label,timestamp\n1,2,0,t\n", 2),
])
def test_malformed_rows(tmp_path, text, line):
    with pytest.raises(IngestionError) as exc:
        load_csv(write(tmp_path / "d.csv", text))
    assert exc.value.line == line


def test_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "nope.csv")


def test_encoding_dense_and_stable(tmp_path):
    p = two_user_csv(tmp_path)
    a, b = load_csv(p), load_csv(p)
    for da, db in zip(a, b):
        assert np.array_equal(da.train.ids, db.train.ids)
    all_ids = np.concatenate([np.concatenate([d.train.ids, d.validation.ids]) for d in a])
    for f, (_, card) in enumerate(a.fields):
        assert all_ids[:, f].max() + 1 == card == len(np.unique(all_ids[:, f]))


def test_csv_round_trip(tmp_path):
    cfg = SyntheticConfig(n_clients=6, seed=3)
    raw = generate_examples(cfg)
    write_csv(tmp_path / "s.csv", raw, cfg.fields)
    fed = load_csv(tmp_path / "s.csv")
    direct = generate_synthetic(cfg)
    assert [len(d.train) for d in fed] == [len(d.train) for d in direct]
    assert all(np.array_equal(a.train.labels, b.train.labels) for a, b in zip(fed, direct))


def test_synthetic_deterministic():
    cfg = SyntheticConfig(n_clients=20, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.train.ids, y.train.ids) and np.array_equal(x.train.labels, y.train.labels)
    c = generate_synthetic(SyntheticConfig(n_clients=20, seed=6))
    assert any(not np.array_equal(x.train.labels, y.train.labels) for x, y in zip(a, c))


def test_validation_after_train_everywhere():
    for ds in generate_synthetic(SyntheticConfig(n_clients=50, seed=1)):
        assert len(ds.support) > 0
        assert ds.train.timestamps.max() < ds.validation.timestamps.min()


def _rate_spread(shift, seeds=range(4)):
    spreads = []
    for s in seeds:
        raw = generate_examples(SyntheticConfig(n_clients=200, samples_mu=4.5, samples_sigma=0.0,
                                                label_shift_std=shift, seed=s))
        spreads.append(np.std([raw[k].labels.mean() for k in raw]))
    return float(np.mean(spreads))


def test_positive_rate_spread_grows_with_label_shift():
    spreads = [_rate_spread(s) for s in (0.0, 0.5, 1.0, 2.0)]
    assert all(a < b for a, b in zip(spreads, spreads[1:]))


def test_zero_shift_equal_sizes_is_homogeneous_in_expectation():
    raw = generate_examples(SyntheticConfig(n_clients=200, samples_mu=4.5, samples_sigma=0.0,
                                            label_shift_std=0.0, seed=0))
    rates = np.array([raw[k].labels.mean() for k in raw])
    assert len({len(raw[k]) for k in raw}) == 1
    # user preferences still vary, so the bounds allow a factor of 2-3 over pure binomial noise
    n = len(raw[0])
    p = rates.mean()
    half = len(rates) // 2
    assert abs(rates[:half].mean() - rates[half:].mean()) < 3 * np.sqrt(2 * p * (1 - p) / (n * half)) * 2
    assert rates.std() < 3 * np.sqrt(p * (1 - p) / n)


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(n_clients=0)
    with pytest.raises(ValueError):
        SyntheticConfig(label_shift_std=-1)
