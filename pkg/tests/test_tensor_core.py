import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedobd.tensor_core import (
    LayerSlice,
    ParameterVector,
    add,
    concat,
    diff,
    flatten,
    l2_norm,
    linf_norm,
    param_count,
    split_layers,
    unflatten,
)


def test_flatten_concatenates_in_order():
    v = flatten({"A": np.array([1.0, 2.0]), "B": np.array([3.0])}, ["A", "B"])
    assert v.values.tolist() == [1.0, 2.0, 3.0]
    assert v.layout == (LayerSlice("A", 0, 2, (2,)), LayerSlice("B", 2, 1, (1,)))


def test_flatten_respects_given_order():
    v = flatten({"A": np.array([1.0]), "B": np.array([3.0])}, ["B", "A"])
    assert v.values.tolist() == [3.0, 1.0]


@pytest.mark.parametrize("layers", [{"A": np.array([])}, {}])
def test_flatten_rejects_empty(layers):
    with pytest.raises(ValueError, match="no parameters"):
        flatten(layers)


def test_flatten_roundtrip_random(rng):
    for _ in range(100):
        n_layers = rng.integers(1, 5)
        layers = {}
        for j in range(n_layers):
            shape = tuple(int(x) for x in rng.integers(1, 5, size=rng.integers(1, 4)))
            layers[f"l{j}"] = rng.normal(size=shape)
        back = unflatten(flatten(layers))
        assert list(back) == list(layers)
        for name in layers:
            assert np.array_equal(back[name], layers[name])
            assert back[name].shape == layers[name].shape


def test_vector_is_read_only():
    v = flatten({"A": np.array([1.0, 2.0])})
    with pytest.raises(ValueError):
        v.values[0] = 5.0


def test_layout_must_cover_values():
    with pytest.raises(ValueError):
        ParameterVector([1.0, 2.0, 3.0], [LayerSlice("A", 0, 2, (2,))])
    with pytest.raises(ValueError):
        ParameterVector([1.0, 2.0], [LayerSlice("A", 1, 2, (2,))])


def test_l2_norm():
    assert l2_norm(flatten({"A": np.array([3.0, 4.0])})) == 5.0
    assert l2_norm(flatten({"A": np.zeros(4)})) == 0.0


def test_l2_norm_matches_loop(rng):
    for _ in range(50):
        x = rng.normal(size=rng.integers(1, 300)) * 10
        expected = math.sqrt(sum(float(t) * float(t) for t in x))
        assert l2_norm(flatten({"A": x})) == pytest.approx(expected, rel=1e-12)


def test_linf_and_count():
    assert linf_norm(flatten({"A": np.array([-3.0, 1.0])})) == 3.0
    v = flatten({"A": np.array([1.0, 2.0]), "B": np.array([3.0])})
    assert param_count(v) == 3


def test_diff_and_add_are_inverse():
    a = flatten({"A": np.array([5.0, 5.0])})
    b = flatten({"A": np.array([2.0, 3.0])})
    assert diff(a, b).values.tolist() == [3.0, 2.0]
    assert add(b, diff(a, b)) == a


def test_diff_rejects_layout_mismatch():
    a = flatten({"A": np.array([5.0, 5.0])})
    b = flatten({"B": np.array([2.0, 3.0])})
    c = flatten({"A": np.array([1.0, 2.0, 3.0])})
    for other in (b, c):
        with pytest.raises(ValueError, match="incompatible shapes"):
            diff(a, other)
        with pytest.raises(ValueError, match="incompatible shapes"):
            add(a, other)


# b + (a - b) is exact whenever a - b is (Sterbenz: b/2 <= a <= 2b).
@settings(max_examples=200, deadline=None)
@given(
    hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(1.0, 2.0)),
    st.floats(1e-300, 1e300),
)
def test_add_diff_bit_exact_without_rounding(x, scale):
    b = flatten({"A": x * scale})
    a = flatten({"A": x[::-1] * scale})
    assert np.array_equal(add(b, diff(a, b)).values, a.values)


def test_split_and_concat_roundtrip(rng):
    v = flatten({"A": rng.normal(size=(2, 3)), "B": rng.normal(size=4)})
    parts = split_layers(v)
    assert [p.layer_names() for p in parts] == [["A"], ["B"]]
    assert concat(parts) == v
