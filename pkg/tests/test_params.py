import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaua.model import ModelSpec
from metaua.params import (CongruenceError, ParamVector, Partition, PartitionError, elementwise,
                           layerwise_partition, make_layout)


def vec(values, name="v"):
    values = np.asarray(values, dtype=float)
    return ParamVector(values, make_layout([(name, values.shape)]))


def test_layout_tiles_values():
    blocks = make_layout([("a", (2, 3)), ("b", (4,)), ("c", (1,))])
    assert [(b.offset, b.length) for b in blocks] == [(0, 6), (6, 4), (10, 1)]
    v = ParamVector(np.arange(11.0), blocks)
    assert v.block("a").shape == (2, 3)
    assert v.block("b").tolist() == [6.0, 7.0, 8.0, 9.0]
    with pytest.raises(ValueError):
        ParamVector(np.arange(10.0), blocks)


def test_values_are_read_only():
    v = vec([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 5.0


def test_dot_hand_value():
    assert elementwise("dot", vec([1, 2, 3]), vec([4, 5, 6])) == 32.0


def test_scale_zero_and_norm_identity():
    v = vec([1.5, -2.0, 3.25])
    assert np.all(elementwise("scale", v, 0).values == 0.0)
    assert elementwise("dot", v, v) == elementwise("sq_l2_norm", v)


def test_incongruent_operands_rejected():
    a = vec([1.0, 2.0], "x")
    b = vec([1.0, 2.0], "y")
    for op in ("add", "sub", "hadamard", "dot"):
        with pytest.raises(CongruenceError):
            elementwise(op, a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6).filter(lambda x: x == 0 or abs(x) > 1e-100), min_size=1, max_size=20),
       st.integers(-8, 8), st.data())
def test_linearity_power_of_two(xs, k, data):
    ys = data.draw(st.lists(st.floats(-1e6, 1e6).filter(lambda x: x == 0 or abs(x) > 1e-100),
                            min_size=len(xs), max_size=len(xs)))
    a, b = vec(xs), vec(ys)
    c = 2.0 ** k
    lhs = elementwise("add", elementwise("scale", a, c), elementwise("scale", b, c))
    rhs = elementwise("scale", elementwise("add", a, b), c)
    assert np.array_equal(lhs.values, rhs.values)


def test_dot_is_deterministic(rng):
    a, b = vec(rng.normal(size=5000)), vec(rng.normal(size=5000))
    first = elementwise("dot", a, b)
    assert all(elementwise("dot", a, b) == first for _ in range(20))


def _model(hidden):
    return ModelSpec((("u", 5), ("i", 7)), embed_dim=3, cross_layers=0, hidden=hidden)


def test_layerwise_partition_counts():
    assert len(layerwise_partition(_model((4,)))) == 6
    part = layerwise_partition(_model(()))
    assert part.names == ["embed:u", "embed:i", "out.weight", "out.bias"]


@pytest.mark.parametrize("hidden,cross", [((), 0), ((4,), 0), ((16, 8), 1), ((3, 3, 3), 1)])
def test_layerwise_partition_is_disjoint_cover(hidden, cross):
    spec = ModelSpec((("u", 5), ("i", 7), ("c", 2)), cross_layers=cross, hidden=hidden)
    part = layerwise_partition(spec)
    part.validate(spec.layout())
    # independent set-arithmetic check over flat indices
    cells = [set(np.concatenate([np.arange(s.start, s.stop) for s in sl]).tolist())
             for sl in part.slices(spec.layout())]
    union = set().union(*cells)
    assert union == set(range(spec.n_params))
    assert sum(len(c) for c in cells) == spec.n_params


def test_partition_validation_errors():
    blocks = make_layout([("a", (2,)), ("b", (3,))])
    with pytest.raises(PartitionError):
        Partition([("x", ["a"])]).validate(blocks)
    with pytest.raises(PartitionError):
        Partition([("x", ["a", "b"]), ("y", ["b"])]).validate(blocks)
    with pytest.raises(PartitionError):
        Partition([("x", ["a", "b", "zz"])]).validate(blocks)
    Partition([("x", ["b", "a"])]).validate(blocks)
