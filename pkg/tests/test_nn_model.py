import math

import numpy as np
import pytest

from fedobd.data_gen import generate_blobs
from fedobd.nn_model import (
    LrSchedule,
    Model,
    ModelSpec,
    blocks_of,
    forward,
    from_blocks,
    init_model,
    loss_and_grad,
    lr_at,
    train_local,
)
from fedobd.tensor_core import ParameterVector, concat, param_count


def test_param_count_by_hand():
    assert param_count(init_model(ModelSpec((2, 4, 3))).params) == 2 * 4 + 4 + 4 * 3 + 3


def test_init_is_deterministic_per_seed():
    a = init_model(ModelSpec((3, 5, 2), seed=1))
    b = init_model(ModelSpec((3, 5, 2), seed=1))
    c = init_model(ModelSpec((3, 5, 2), seed=2))
    assert a.params == b.params
    assert not np.array_equal(a.params.values, c.params.values)


def test_init_scale_and_zero_bias():
    m = init_model(ModelSpec((16, 8, 2), seed=3))
    w = m.params.layer("layer1.weight")
    assert np.abs(w).max() <= 1 / math.sqrt(16)
    assert np.all(m.params.layer("layer1.bias") == 0)
    assert np.all(m.params.layer("head.bias") == 0)


@pytest.mark.parametrize("dims", [(3, 2), (3, 0, 2), (3, 4, 1)])
def test_invalid_dims(dims):
    with pytest.raises(ValueError):
        ModelSpec(dims)


def test_block_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((2, 3, 3, 2), (("a", ("layer1",)), ("b", ("layer1",))))
    with pytest.raises(ValueError):
        ModelSpec((2, 3, 3, 2), (("a", ("layer1", "head")),))  # not consecutive
    with pytest.raises(ValueError):
        ModelSpec((2, 3, 2), (("a", ("nope",)),))


def test_remaining_layers_become_singletons():
    spec = ModelSpec((2, 3, 3, 3, 2), (("body", ("layer2", "layer3")),))
    assert spec.blocks() == [("layer1", ["layer1"]), ("body", ["layer2", "layer3"]), ("head", ["head"])]


def test_forward_single_sample_loss_is_neg_log_p(small_model):
    x = np.array([[0.3, -1.0, 2.0, 0.5]])
    loss, _ = forward(small_model, x, [1])
    # independent softmax
    p = small_model.params
    h = np.maximum(x @ p.layer("layer1.weight") + p.layer("layer1.bias"), 0)
    h = np.maximum(h @ p.layer("layer2.weight") + p.layer("layer2.bias"), 0)
    z = h @ p.layer("head.weight") + p.layer("head.bias")
    prob = np.exp(z[0, 1]) / np.exp(z[0]).sum()
    assert loss == pytest.approx(-math.log(prob), rel=1e-12)


def test_forward_dimension_mismatch(small_model):
    with pytest.raises(ValueError, match="dimension"):
        forward(small_model, np.zeros((2, 5)), [0, 1])


def test_untrained_accuracy_near_chance():
    data = generate_blobs(4, 8, 500, 1.0, seed=0)
    accs = [forward(init_model(ModelSpec((8, 16, 4), seed=s)), data.features, data.labels)[1] for s in range(10)]
    assert abs(np.mean(accs) - 0.25) < 0.1


def test_gradient_matches_central_differences(rng):
    for trial in range(5):
        spec = ModelSpec((3, 5, 4, 3), seed=trial)
        model = init_model(spec)
        # random biases so no ReLU sits exactly on its kink
        model = model.with_params(ParameterVector(model.params.values + rng.normal(0, 0.1, len(model.params)), model.params.layout))
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 3, size=6)
        _, g = loss_and_grad(model, x, y)
        h = 1e-5
        for i in range(len(g)):
            up = model.params.values.copy()
            dn = model.params.values.copy()
            up[i] += h
            dn[i] -= h
            lu, _ = forward(model.with_params(model.params.with_values(up)), x, y)
            ld, _ = forward(model.with_params(model.params.with_values(dn)), x, y)
            num = (lu - ld) / (2 * h)
            assert abs(num - g[i]) <= 1e-4 * max(abs(num), abs(g[i]), 1e-6) + 1e-9


def test_lr_schedule_values():
    s = LrSchedule(0.1, 100, 0.0)
    assert lr_at(s, 0) == 0.1
    assert lr_at(s, 100) == 0.0
    assert lr_at(s, 50) == pytest.approx(0.05, abs=1e-15)
    s2 = LrSchedule(0.1, 10, 0.01)
    assert lr_at(s2, 10) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        lr_at(s, 101)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    with pytest.raises(ValueError):
        LrSchedule(0.1, 10, 0.2)


def test_train_zero_epochs_is_identity(small_model):
    x = np.ones((4, 4))
    out = train_local(small_model, x, [0, 1, 2, 0], 0, LrSchedule(0.1, 5))
    assert out.params == small_model.params


def test_train_is_deterministic_and_pure(small_model, rng):
    x = rng.normal(size=(100, 4))
    y = rng.integers(0, 3, 100)
    before = small_model.params.values.copy()
    a = train_local(small_model, x, y, 3, LrSchedule(0.1, 5), 16, seed=9)
    b = train_local(small_model, x, y, 3, LrSchedule(0.1, 5), 16, seed=9)
    c = train_local(small_model, x, y, 3, LrSchedule(0.1, 5), 16, seed=10)
    assert a.params == b.params
    assert not np.array_equal(a.params.values, c.params.values)
    assert np.array_equal(small_model.params.values, before)


def test_train_empty_dataset(small_model):
    with pytest.raises(ValueError, match="empty"):
        train_local(small_model, np.zeros((0, 4)), [], 1, LrSchedule(0.1, 5))


def test_loss_decreases_on_separable_blobs():
    data = generate_blobs(2, 5, 100, 0.3, seed=4)
    model = init_model(ModelSpec((5, 8, 2), seed=0))
    sched = LrSchedule(0.1, 5)
    losses = [forward(model, data.features, data.labels)[0]]
    for epoch in range(5):
        model = train_local(model, data.features, data.labels, 1, sched, 64, epoch_offset=epoch, seed=epoch)
        losses.append(forward(model, data.features, data.labels)[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_blocks_partition(small_model):
    blocks = blocks_of(small_model)
    assert [name for name, _ in blocks] == ["layer1", "layer2", "head"]
    assert sum(param_count(v) for _, v in blocks) == param_count(small_model.params)
    assert concat([v for _, v in blocks]).values.tolist() == small_model.params.values.tolist()
    assert from_blocks(small_model.spec, blocks).params == small_model.params


def test_single_block_is_whole_model():
    spec = ModelSpec((3, 4, 2), (("all", ("layer1", "head")),))
    m = init_model(spec)
    (name, v), = blocks_of(m)
    assert name == "all"
    assert np.array_equal(v.values, m.params.values)


def test_blocks_roundtrip_random_specs(rng):
    for trial in range(30):
        depth = int(rng.integers(2, 6))
        dims = tuple(int(d) for d in rng.integers(1, 6, size=depth + 1))
        dims = dims[:-1] + (max(dims[-1], 2),)
        spec = ModelSpec(dims, seed=trial)
        names = spec.layer_names
        cut = int(rng.integers(1, len(names) + 1))
        spec = ModelSpec(dims, (("front", tuple(names[:cut])),), seed=trial)
        m = init_model(spec)
        assert concat([v for _, v in blocks_of(m)]) == m.params
