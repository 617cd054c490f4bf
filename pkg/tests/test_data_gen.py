import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedobd.data_gen import Dataset, generate_blobs, load_csv, partition_iid, write_csv
from fedobd.nn_model import LrSchedule, ModelSpec, forward, init_model, train_local


def test_blobs_balanced_and_deterministic():
    a = generate_blobs(2, 3, 10, 1.0, seed=5)
    assert len(a) == 20
    assert np.bincount(a.labels).tolist() == [10, 10]
    b = generate_blobs(2, 3, 10, 1.0, seed=5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    c = generate_blobs(2, 3, 10, 1.0, seed=6)
    assert not np.array_equal(a.features, c.features)


def test_tight_blobs_are_separable():
    data = generate_blobs(2, 4, 50, 1e-3, seed=1)
    model = init_model(ModelSpec((4, 8, 2), seed=0))
    model = train_local(model, data.features, data.labels, 30, LrSchedule(0.1, 30), 16, seed=0)
    assert forward(model, data.features, data.labels)[1] == 1.0


def test_partition_examples():
    data = generate_blobs(2, 2, 50, 1.0, seed=0)
    plan = partition_iid(data, 10, 0.2, seed=0)
    assert len(plan.test_indices) == 20
    assert plan.sample_counts == [8] * 10
    single = partition_iid(data, 1, 0.0, seed=0)
    assert sorted(single.client_indices[0]) == list(range(100))
    assert single.test_indices == ()


def test_partition_errors():
    data = generate_blobs(2, 2, 2, 1.0, seed=0)
    with pytest.raises(ValueError, match="too few"):
        partition_iid(data, 5, 0.0, seed=0)
    with pytest.raises(ValueError):
        partition_iid(data, 1, 1.0, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 20), st.floats(0, 0.9), st.integers(0, 1000))
def test_partition_disjoint_and_covering(n, clients, frac, seed):
    data = Dataset(np.zeros((n, 1)), np.zeros(n, dtype=np.int64), 1)
    n_test = int(round(frac * n))
    if n - n_test < clients:
        with pytest.raises(ValueError):
            partition_iid(data, clients, frac, seed)
        return
    plan = partition_iid(data, clients, frac, seed)
    everything = [i for c in plan.client_indices for i in c] + list(plan.test_indices)
    assert sorted(everything) == list(range(n))
    counts = plan.sample_counts
    assert min(counts) >= 1 and max(counts) - min(counts) <= 1
    assert sum(counts) == n - len(plan.test_indices)
    assert partition_iid(data, clients, frac, seed) == plan


def test_load_csv_small(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n3.5,-1,1\n0,0,1\n")
    d = load_csv(p, "label")
    assert d.features.shape == (3, 2)
    assert d.labels.tolist() == [0, 1, 1]
    assert d.classes == 2


def test_load_csv_string_labels(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,x\ncat,1\ndog,2\ncat,3\n")
    d = load_csv(p, "y")
    assert d.labels.tolist() == [0, 1, 0]
    assert d.features[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_load_csv_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n")
    with pytest.raises(ValueError, match="no label column"):
        load_csv(p, "target")
    p.write_text("a,b,label\n1,2,0\n1,2\n")
    with pytest.raises(ValueError, match="row 3"):
        load_csv(p, "label")
    p.write_text("a,b,label\n1,x,0\n")
    with pytest.raises(ValueError, match="row 2"):
        load_csv(p, "label")


def test_csv_roundtrip(tmp_path):
    data = generate_blobs(3, 4, 7, 0.5, seed=2)
    path = tmp_path / "blobs.csv"
    write_csv(data, path)
    back = load_csv(path, "label")
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels)
    assert back.classes == data.classes
