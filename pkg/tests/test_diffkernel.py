import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import check, rel_error
from ground3d import diffkernel as dk
from ground3d.diffkernel import ParamStore, Tensor

rng = np.random.default_rng(7)


def leaf(*shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# ---------------------------------------------------------------- forward values

def test_matmul_matches_naive_loops():
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(dk.matmul(Tensor(a), Tensor(b)).values, naive_matmul(a, b), atol=1e-12)


def test_softmax_matches_mpmath():
    v = np.array([1000.0, 999.0, -5.0, 0.0])
    mp = [mpmath.exp(mpmath.mpf(x)) for x in v]
    ref = np.array([float(e / mpmath.fsum(mp)) for e in mp])
    np.testing.assert_allclose(dk.softmax(Tensor(v)).values, ref, rtol=1e-13, atol=1e-300)


def test_softmax_empty_raises():
    with pytest.raises(dk.DomainError):
        dk.softmax(Tensor(np.zeros(0)))


def test_segment_softmax_rows_sum_to_one():
    seg = np.array([0, 0, 1, 2, 2, 2])
    y = dk.segment_softmax(Tensor(rng.normal(size=6) * 30), seg, 3).values
    np.testing.assert_allclose(np.bincount(seg, weights=y), 1.0, atol=1e-12)


def test_bce_closed_forms():
    assert dk.bce_with_logits(Tensor(np.zeros(1)), [1.0]).values[0] == pytest.approx(np.log(2))
    big = dk.bce_with_logits(Tensor(np.array([800.0, -800.0])), [1.0, 0.0]).values
    assert np.all(np.isfinite(big)) and np.all(big < 1e-300)


def test_smooth_l1_pieces():
    out = dk.smooth_l1(Tensor(np.array([0.5, -2.0, 0.0]))).values
    np.testing.assert_allclose(out, [0.125, 1.5, 0.0])


def test_cross_entropy_matches_log_softmax():
    logits = rng.normal(size=(3, 5))
    target = [4, 0, 2]
    ref = [np.log(np.exp(r).sum()) - r[t] for r, t in zip(logits, target)]
    np.testing.assert_allclose(dk.cross_entropy(Tensor(logits), target).values, ref, rtol=1e-12)


def test_backward_needs_scalar():
    with pytest.raises(dk.DomainError):
        dk.backward(leaf(3))


# ---------------------------------------------------------------- gradients of every op

@pytest.mark.parametrize("name,fn,shapes", [
    ("add-broadcast", lambda a, b: dk.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: dk.sub(a, b), [(3, 4), (3, 4)]),
    ("mul-broadcast", lambda a, b: dk.mul(a, b), [(3, 4), (3, 1)]),
    ("square", lambda a: dk.square(a), [(5,)]),
    ("exp", lambda a: dk.exp(a), [(5,)]),
    ("log", lambda a: dk.log(dk.add(dk.square(a), 1.0)), [(5,)]),
    ("tanh", lambda a: dk.tanh(a), [(4, 2)]),
    ("sigmoid", lambda a: dk.sigmoid(a), [(4, 2)]),
    ("relu", lambda a: dk.relu(a), [(6,)]),
    ("sum-axis", lambda a: dk.sum(a, axis=0), [(3, 4)]),
    ("mean-keep", lambda a: dk.mean(a, axis=1, keepdims=True), [(3, 4)]),
    ("reshape", lambda a: dk.reshape(a, (2, 6)), [(3, 4)]),
    ("transpose", lambda a: dk.transpose(a), [(3, 4)]),
    ("concat", lambda a, b: dk.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    ("stack", lambda a, b: dk.stack([a, b], axis=0), [(3,), (3,)]),
    ("index-slice", lambda a: a[1:, ::2], [(4, 5)]),
    ("index-fancy", lambda a: a[np.array([0, 0, 2])], [(3, 2)]),
    ("take-repeat", lambda a: dk.take(a, [2, 0, 2, 2]), [(3, 4)]),
    ("segment-sum", lambda a: dk.segment_sum(a, [1, 0, 1, 3], 4), [(4, 2)]),
    ("matmul", lambda a, b: dk.matmul(a, b), [(3, 4), (4, 2)]),
    ("matvec", lambda a, b: dk.matmul(a, b), [(3, 4), (4,)]),
    ("vecmat", lambda a, b: dk.matmul(a, b), [(4,), (4, 2)]),
    ("rowdot", lambda a, b: dk.rowdot(a, b), [(3, 4), (3, 4)]),
    ("softmax", lambda a: dk.softmax(a, axis=-1), [(2, 5)]),
    ("segment-softmax", lambda a: dk.segment_softmax(a, [0, 0, 1, 1, 1], 2), [(5,)]),
    ("bce", lambda a: dk.bce_with_logits(a, [1, 0, 1]), [(3,)]),
    ("smooth-l1", lambda a: dk.smooth_l1(dk.mul(a, 2.0)), [(6,)]),
    ("cross-entropy", lambda a: dk.cross_entropy(a, [1, 3]), [(2, 4)]),
])
def test_op_gradients(name, fn, shapes):
    ins = [leaf(*s) for s in shapes]
    w = rng.normal(size=fn(*ins).shape)
    assert check(lambda: dk.sum(dk.mul(fn(*ins), w)), ins, max_entries=None) < 1e-6


def test_gradient_accumulates_across_reuse():
    a = leaf(3)
    dk.backward(dk.sum(dk.mul(a, a)))
    np.testing.assert_allclose(a.grad, 2 * a.values)


# ---------------------------------------------------------------- layers

def test_dense_and_mlp_gradients():
    store = ParamStore(1)
    x = leaf(5, 6)
    f = lambda: dk.sum(dk.square(dk.mlp(store, x, "m", 7, 3)))
    f()  # parameters are created on first use
    assert check(f, [x] + [store[n] for n in ("m/0/W", "m/0/b", "m/1/W", "m/1/b")]) < 1e-6


def test_gather_mlp_equals_mlp_on_concatenation():
    store = ParamStore(2)
    a, b, c = leaf(4, 3), leaf(5, 2), leaf(6, 4)
    ia, ib = np.array([0, 3, 3, 1, 2, 0]), np.array([4, 4, 0, 1, 2, 3])
    fused = dk.gather_mlp(store, [(a, ia), (b, ib), (c, None)], "g", 8, 2)
    cat = dk.concat([dk.take(a, ia), dk.take(b, ib), c], axis=1)
    np.testing.assert_allclose(fused.values, dk.mlp(store, cat, "g", 8, 2).values, atol=1e-12)
    assert check(lambda: dk.sum(dk.square(dk.gather_mlp(store, [(a, ia), (b, ib), (c, None)], "g", 8, 2))),
                 [a, b, c, store["g/0/W"]]) < 1e-6


def _gru_reference(x, W, U, b, bu, mask):
    """Step-by-step GRU written from the gate equations, for comparison."""
    H = U.shape[1]
    h = np.zeros((x.shape[1], H))
    out = []
    sig = lambda v: 1 / (1 + np.exp(-v))
    for t in range(x.shape[0]):
        Wr, Wz, Wn = np.split(W, 3)
        Ur, Uz, Un = np.split(U, 3)
        br, bz, bn = np.split(b, 3)
        ur, uz, un = np.split(bu, 3)
        r = sig(x[t] @ Wr.T + br + h @ Ur.T + ur)
        z = sig(x[t] @ Wz.T + bz + h @ Uz.T + uz)
        n = np.tanh(x[t] @ Wn.T + bn + r * (h @ Un.T + un))
        new = (1 - z) * n + z * h
        h = np.where(mask[t][:, None], new, h)
        out.append(h)
    return np.stack(out)


def test_gru_sequence_matches_reference_and_gradients():
    T, B, d, H = 5, 3, 4, 6
    x, W, U = leaf(T, B, d), leaf(3 * H, d, scale=0.5), leaf(3 * H, H, scale=0.5)
    b, bu = leaf(3 * H, scale=0.5), leaf(3 * H, scale=0.5)
    mask = np.ones((T, B), bool)
    mask[3:, 1] = False
    mask[1:, 2] = False
    out = dk.gru_sequence(x, W, U, b, bu, mask)
    np.testing.assert_allclose(out.values, _gru_reference(x.values, W.values, U.values, b.values,
                                                          bu.values, mask), atol=1e-12)
    wts = rng.normal(size=out.shape)
    f = lambda: dk.sum(dk.mul(dk.gru_sequence(x, W, U, b, bu, mask), wts))
    assert check(f, [x, W, U, b, bu], max_entries=None) < 1e-6


def test_birnn_batch_equals_single_sequences():
    store = ParamStore(3)
    seqs = [leaf(4, 5), leaf(2, 5), leaf(6, 5)]
    pooled = dk.birnn_encode_batch(store, seqs, "enc", hidden=8)
    for i, s in enumerate(seqs):
        states, single = dk.birnn_encode(store, s, "enc", hidden=8)
        np.testing.assert_allclose(pooled.values[i], single.values, atol=1e-12)
        np.testing.assert_allclose(single.values, states.values.mean(axis=0), atol=1e-12)


def test_birnn_reversal_swaps_directions():
    store = ParamStore(4)
    s = leaf(5, 5)
    dk.birnn_encode(store, s, "enc", hidden=8)
    for part in ("W", "U", "b", "bu"):
        store[f"enc/bw/{part}"].values[...] = store[f"enc/fw/{part}"].values
    rev = Tensor(s.values[::-1].copy())
    _, p1 = dk.birnn_encode(store, s, "enc", hidden=8)
    _, p2 = dk.birnn_encode(store, rev, "enc", hidden=8)
    np.testing.assert_allclose(p1.values[:8], p2.values[8:], atol=1e-12)
    np.testing.assert_allclose(p1.values[8:], p2.values[:8], atol=1e-12)


def test_birnn_empty_sequence_rejected():
    with pytest.raises(dk.DomainError):
        dk.birnn_encode(ParamStore(0), Tensor(np.zeros((0, 3))), "enc", hidden=4)


# ---------------------------------------------------------------- parameters and optimizer

def test_param_init_deterministic_and_order_free():
    a, b = ParamStore(5), ParamStore(5)
    a.get("x", (3, 4), 4)
    a.get("y", (2,), 2)
    b.get("y", (2,), 2)
    b.get("x", (3, 4), 4)
    assert np.array_equal(a["x"].values, b["x"].values)
    assert not np.array_equal(a["x"].values, ParamStore(6).get("x", (3, 4), 4).values)
    assert np.all(np.abs(a["x"].values) <= 0.5)


def test_param_shape_immutable():
    s = ParamStore(0)
    s.get("w", (2, 2))
    with pytest.raises(dk.ConfigurationError):
        s.get("w", (3, 2))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = ParamStore(9)
    x = leaf(4, 3)
    dk.backward(dk.sum(dk.square(dk.mlp(s, x, "m", 5, 2))))
    dk.adam_step(s, 1e-2)
    s.save(tmp_path / "c.npz")
    t = ParamStore.load(tmp_path / "c.npz")
    assert t.names() == s.names() and t.step == s.step
    for n in s.names():
        assert s[n].values.tobytes() == t[n].values.tobytes()
        assert s.m[n].tobytes() == t.m[n].tobytes() and s.v[n].tobytes() == t.v[n].tobytes()


def test_adam_matches_hand_update_and_clears_grads():
    s = ParamStore(0)
    p = s.get("w", (3,))
    start = p.values.copy()
    g = np.array([0.5, -1.0, 2.0])
    p.grad = g.copy()
    dk.adam_step(s, 0.1)
    m, v = 0.1 * g, 0.001 * g * g
    expect = start - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.values, expect, rtol=1e-12)
    assert p.grad is None


def test_adam_without_grads_warns(caplog):
    s = ParamStore(0)
    s.get("w", (2,))
    assert dk.adam_step(s, 0.1) is False
    assert "without gradients" in caplog.text


# ---------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_is_distribution(v):
    y = dk.softmax(Tensor(v)).values
    assert np.all(y >= 0) and abs(y.sum() - 1) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_take_backward_is_scatter_add(rows):
    a = Tensor(np.zeros((5, 2)), requires_grad=True)
    g = np.arange(len(rows) * 2, dtype=float).reshape(-1, 2)
    dk.backward(dk.sum(dk.mul(dk.take(a, rows), g)))
    ref = np.zeros((5, 2))
    np.add.at(ref, rows, g)
    assert rel_error(a.grad, ref) < 1e-12
