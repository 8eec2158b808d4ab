import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonet.rng import Rng
from canonet.transform import (ChannelTransform, GroupRestrictionError, TransformError,
                               apply_to_activation, block_diag, compose, group_restrict,
                               kron_lift, rewrite_consumer)

from oracles import dense_block_diag, dense_kron, dense_rewrite, path, random_transform

I = ChannelTransform.identity


def test_invariants():
    assert len(I(4).entries) == 4 and I(4).is_identity()
    with pytest.raises(TransformError):
        ChannelTransform(2, 2, ((0, 0, 1.0), (0, 0, 2.0)))
    with pytest.raises(TransformError):
        ChannelTransform(2, 2, ((0, 1, float("nan")),))
    with pytest.raises(TransformError):
        ChannelTransform(2, 2, ((2, 0, 1.0),))
    m = ChannelTransform(3, 2, ((2, 1, 0.5), (0, 0, 1.0)))
    assert m.entries == ((0, 0, 1.0), (2, 1, 0.5))
    assert ChannelTransform.from_json(m.to_json()) == m


def test_perm_scale_convention():
    # y_after[k] = s_k * y_before[perm[k]]; M maps it back
    perm, s = [2, 0, 1], [0.5, 2.0, 1.25]
    m = ChannelTransform.from_perm_scale(perm, s)
    y_before = Rng(1).normal((3, 2, 2))
    y_after = np.stack([s[k] * y_before[perm[k]] for k in range(3)])
    np.testing.assert_allclose(apply_to_activation(m, y_after), y_before, rtol=1e-15)
    with pytest.raises(TransformError):
        ChannelTransform.from_perm_scale([0, 0, 1])
    with pytest.raises(TransformError):
        ChannelTransform.from_perm_scale([0, 1], [1.0, -1.0])


def test_apply_identity_and_split_row():
    y = Rng(2).normal((3, 4))
    assert np.array_equal(apply_to_activation(I(3), y), y)
    split = ChannelTransform(1, 3, ((0, 0, 1 / 3), (0, 1, 1 / 3), (0, 2, 1 / 3)))
    v = Rng(3).normal(5)
    np.testing.assert_allclose(apply_to_activation(split, np.stack([v, v, v]))[0], v,
                               rtol=1e-15, atol=1e-15)


def test_apply_random_vs_dense():
    r = Rng(4)
    for _ in range(20):
        m, dense = random_transform(r, 5, 7)
        y = r.normal((7, 3))
        np.testing.assert_allclose(apply_to_activation(m, y), dense @ y, rtol=0, atol=1e-12)


def test_rewrite_identity_is_bit_exact():
    w = Rng(5).normal((4, 3, 3, 3))
    out = rewrite_consumer(w, I(3))
    assert out.tobytes() == w.tobytes() and out is not w


def test_rewrite_injection_columns():
    # duplicate channel 0 into a new channel and add a null channel
    m = ChannelTransform.from_dense([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    w = Rng(6).normal((2, 2, 1, 1))
    out = rewrite_consumer(w, m)
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(out[:, 2], 0.0)
    np.testing.assert_allclose(out, dense_rewrite(w, m.to_dense(), 0, 1), rtol=0, atol=1e-12)


def test_flatten_swap_is_block_swap():
    swap = ChannelTransform.from_perm_scale([1, 0])
    w = Rng(7).normal((3, 8))
    out = rewrite_consumer(w, swap, path("fc", 0, 2, hw=4))
    assert np.array_equal(out[:, :4], w[:, 4:]) and np.array_equal(out[:, 4:], w[:, :4])


def test_rewrite_only_touches_slice():
    r = Rng(8)
    w = r.normal((3, 9, 3, 3))
    m, dense = random_transform(r, 4, 6)
    out = rewrite_consumer(w, m, path("c", 2, 4))
    assert out.shape == (3, 11, 3, 3)
    assert np.array_equal(out[:, :2], w[:, :2]) and np.array_equal(out[:, 8:], w[:, 6:])
    np.testing.assert_allclose(out, dense_rewrite(w, dense, 2, 1), rtol=0, atol=1e-12)


def test_rewrite_errors():
    w = np.zeros((2, 5))
    with pytest.raises(TransformError):
        rewrite_consumer(w, ChannelTransform.from_perm_scale([1, 0]), path("x", 4, 2))
    with pytest.raises(TransformError):
        rewrite_consumer(w, ChannelTransform.from_perm_scale([1, 0]))
    with pytest.raises(TransformError):
        rewrite_consumer(w, ChannelTransform.from_perm_scale([1, 0]), path("x", 0, 3))


def test_grouped_rewrite():
    w = Rng(9).normal((4, 2, 3, 3))
    inner = ChannelTransform.from_perm_scale([1, 0, 2, 3], [2.0, 1.0, 1.0, 0.5])
    out = rewrite_consumer(w, inner, groups=2)
    d = inner.to_dense()
    np.testing.assert_allclose(out[:2], np.einsum("oc...,cd->od...", w[:2], d[:2, :2]))
    np.testing.assert_allclose(out[2:], np.einsum("oc...,cd->od...", w[2:], d[2:, 2:]))
    with pytest.raises(GroupRestrictionError):
        rewrite_consumer(w, ChannelTransform.from_perm_scale([2, 1, 0, 3]), groups=2)


def test_compose_examples():
    r = Rng(10)
    m, _ = random_transform(r, 4, 5)
    assert compose(I(4), m) == m
    p = ChannelTransform.from_perm_scale([2, 0, 3, 1])
    pt = ChannelTransform.from_dense(p.to_dense().T)
    assert compose(pt, p).is_identity()
    with pytest.raises(TransformError):
        compose(I(3), m)


def test_block_diag_examples():
    assert block_diag([I(2), I(3)]) == I(5)
    m, _ = random_transform(Rng(11), 3, 2)
    assert block_diag([m]) == m
    swap = ChannelTransform.from_perm_scale([1, 0])
    a, b = Rng(12).normal((2, 4)), Rng(13).normal((3, 4))
    cat = np.concatenate([a, b])
    got = apply_to_activation(block_diag([swap, I(3)]), cat)
    want = np.concatenate([apply_to_activation(swap, a), b])
    assert np.array_equal(got, want)


def test_kron_examples():
    m, dense = random_transform(Rng(14), 3, 4)
    assert kron_lift(m, 1) == m
    np.testing.assert_array_equal(kron_lift(m, 4).to_dense(), np.kron(dense, np.eye(4)))


def test_group_restrict():
    assert group_restrict(I(4), 2) == I(4)
    with pytest.raises(GroupRestrictionError):
        group_restrict(ChannelTransform.from_perm_scale([2, 1, 0, 3]), 2)
    scaled = ChannelTransform.from_perm_scale([0, 1, 2, 3], [0.5, 2, 3, 4])
    assert group_restrict(scaled, 2) == scaled
    with pytest.raises(GroupRestrictionError):
        group_restrict(I(3), 2)


dims = st.integers(1, 8)


@settings(max_examples=60, deadline=None)
@given(dims, dims, dims, st.integers(0, 2**32))
def test_compose_vs_dense(a, b, c, seed):
    r = Rng(seed)
    m1, d1 = random_transform(r, a, b)
    m2, d2 = random_transform(r, b, c)
    np.testing.assert_allclose(compose(m1, m2).to_dense(), d1 @ d2, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(dims, dims), min_size=1, max_size=4), st.integers(0, 2**32))
def test_block_diag_vs_dense(shapes, seed):
    r = Rng(seed)
    pairs = [random_transform(r, a, b) for a, b in shapes]
    got = block_diag([m for m, _ in pairs]).to_dense()
    np.testing.assert_array_equal(got, dense_block_diag([d for _, d in pairs]))


@settings(max_examples=60, deadline=None)
@given(dims, dims, st.integers(1, 9), st.integers(0, 2**32))
def test_kron_vs_dense(a, b, hw, seed):
    m, d = random_transform(Rng(seed), a, b)
    np.testing.assert_array_equal(kron_lift(m, hw).to_dense(), dense_kron(d, hw))
    np.testing.assert_array_equal(dense_kron(d, hw), np.kron(d, np.eye(hw)))


@settings(max_examples=60, deadline=None)
@given(dims, dims, st.integers(1, 9), st.integers(0, 3), st.integers(0, 3),
       st.booleans(), st.integers(0, 2**32))
def test_rewrite_vs_dense(cb, ca, hw, pre, post, is_conv, seed):
    r = Rng(seed)
    m, d = random_transform(r, cb, ca)
    n_in = pre + cb * hw + post
    if is_conv:
        hw = 1
        n_in = pre + cb + post
        w = r.normal((3, n_in, 2, 2))
    else:
        w = r.normal((3, n_in))
    got = rewrite_consumer(w, m, path("x", pre, cb, hw))
    np.testing.assert_allclose(got, dense_rewrite(w, d, pre, hw), rtol=0, atol=1e-12)


def test_rewrite_preserves_function_on_activations():
    # W y_before == (W M) y_after for every y_after
    r = Rng(15)
    for cb, ca in itertools.product((1, 3, 5), (2, 4)):
        m, d = random_transform(r, cb, ca)
        w = r.normal((2, cb))
        y_after = r.normal(ca)
        np.testing.assert_allclose(rewrite_consumer(w, m) @ y_after, w @ (d @ y_after),
                                   rtol=0, atol=1e-12)
