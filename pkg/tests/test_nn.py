import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langnav.nn import (
    Conv2d,
    Conv3d,
    Embedding,
    Linear,
    LossConfig,
    MultiHeadSelfAttention,
    OptimizerState,
    ShapeError,
    Tensor,
    WeightsError,
    adamw_step,
    assign_weights,
    combo_loss,
    concat,
    grad_check,
    load_weights,
    poly_lr,
    save_weights,
    upsample2x,
    using_dtype,
)
from langnav.nn.layers import conv2d, conv3d


# ---- tensor ops ----

def test_add_mul_broadcast_gradients():
    a = Tensor(np.array([[1.0], [2.0], [3.0]]), requires_grad=True)
    b = Tensor(np.array([[10.0, 20.0, 30.0, 40.0]]), requires_grad=True)
    (a * b).sum().backward()
    # d/da_i sum_ij a_i b_j = sum_j b_j
    assert np.allclose(a.grad, np.full((3, 1), 100.0))
    assert np.allclose(b.grad, np.full((1, 4), 6.0))


def test_matmul_gradients_match_manual():
    rng = np.random.default_rng(0)
    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    B = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    (A @ B).sum().backward()
    ones = np.ones((3, 2))
    assert np.allclose(A.grad, ones @ B.data.T, atol=1e-6)
    assert np.allclose(B.grad, A.data.T @ ones, atol=1e-6)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_reshape_transpose_getitem_gradients():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    y = x.transpose((1, 0, 2)).reshape(3, 8)
    y[1].sum().backward()
    expect = np.zeros((2, 3, 4))
    expect[:, 1, :] = 1.0
    assert np.array_equal(x.grad, expect)


def test_concat_backward_splits():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    out = concat([a, b], axis=1)
    (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    assert np.array_equal(a.grad, [[0, 1, 2], [5, 6, 7]])
    assert np.array_equal(b.grad, [[3, 4], [8, 9]])


def test_clamp_blocks_gradient_outside_range():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    x.clamp(0.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_softmax_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=5.0, size=(4, 7)))
    p = x.softmax(axis=-1).data
    assert np.all(p >= 0.0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_embedding_accumulates_duplicate_ids():
    emb = Embedding(5, 3, np.random.default_rng(1))
    emb(np.array([1, 1, 2])).sum().backward()
    g = emb.weight.grad
    assert np.allclose(g[1], 2.0)
    assert np.allclose(g[2], 1.0)
    assert np.allclose(g[[0, 3, 4]], 0.0)


def test_upsample2x_values_and_gradient():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    y = upsample2x(x)
    assert np.array_equal(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2],
                                         [3, 3, 4, 4], [3, 3, 4, 4]])
    w = np.arange(16.0).reshape(1, 1, 4, 4)
    (y * Tensor(w)).sum().backward()
    blocks = w.reshape(1, 1, 2, 2, 2, 2).sum(axis=(3, 5))
    assert np.array_equal(x.grad, blocks)


# ---- attention ----

def test_attention_single_token_weight_is_one():
    attn = MultiHeadSelfAttention(4, 2, np.random.default_rng(2))
    out, weights = attn(Tensor(np.random.default_rng(3).normal(size=(1, 4))))
    assert out.shape == (1, 4)
    assert weights.shape == (2, 1, 1)
    assert np.array_equal(weights.data, np.ones((2, 1, 1)))


def test_attention_identical_tokens_uniform_weights():
    attn = MultiHeadSelfAttention(8, 4, np.random.default_rng(4))
    x = Tensor(np.tile(np.random.default_rng(5).normal(size=(1, 8)), (3, 1)))
    _, weights = attn(x)
    assert np.allclose(weights.data, 1.0 / 3.0, atol=1e-6)


def test_attention_matches_hand_computed_case():
    # L=2, C=2, one head: fix all projection matrices and follow the scaled
    # dot-product arithmetic with plain floats
    attn = MultiHeadSelfAttention(2, 1, np.random.default_rng(6))
    attn.wq.weight.data[:] = np.eye(2)
    attn.wk.weight.data[:] = np.array([[0.0, 1.0], [1.0, 0.0]])
    attn.wv.weight.data[:] = np.array([[2.0, 0.0], [0.0, 1.0]])
    attn.wo.weight.data[:] = np.eye(2)
    for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
        lin.bias.data[:] = 0.0

    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    q, k, v = x @ np.eye(2), x @ [[0, 1], [1, 0]], x @ [[2, 0], [0, 1]]
    scores = (q @ np.asarray(k, float).T) / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    expect = w @ v

    out, weights = attn(Tensor(x))
    assert np.allclose(out.data, expect, atol=1e-6)
    assert np.allclose(weights.data[0], w, atol=1e-6)


def test_attention_batched_matches_unbatched():
    attn = MultiHeadSelfAttention(8, 2, np.random.default_rng(7))
    x = np.random.default_rng(8).normal(size=(5, 8))
    out1, w1 = attn(Tensor(x))
    out2, w2 = attn(Tensor(np.stack([x, x])))
    assert np.allclose(out2.data[0], out1.data, atol=1e-6)
    assert np.allclose(out2.data[1], out1.data, atol=1e-6)
    assert np.allclose(w2.data[0], w1.data, atol=1e-6)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ShapeError):
        MultiHeadSelfAttention(6, 4, np.random.default_rng(0))


# ---- convolution ----

def naive_conv2d(x, w, b, stride, padding):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    y = np.zeros((B, Cout, Ho, Wo))
    for bi in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[co]
                    for ci in range(Cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += (xp[bi, ci, i * sh + di, j * sw + dj]
                                        * w[co, ci, di, dj])
                    y[bi, co, i, j] = acc
    return y


def naive_conv3d(x, w, b, stride, padding):
    B, Cin, T, H, W = x.shape
    Cout, _, kt, kh, kw = w.shape
    st_, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    To = (T + 2 * pt - kt) // st_ + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    y = np.zeros((B, Cout, To, Ho, Wo))
    for bi in range(B):
        for co in range(Cout):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = b[co]
                        for ci in range(Cin):
                            for dt in range(kt):
                                for di in range(kh):
                                    for dj in range(kw):
                                        acc += (xp[bi, ci, t * st_ + dt,
                                                   i * sh + di, j * sw + dj]
                                                * w[co, ci, dt, di, dj])
                        y[bi, co, t, i, j] = acc
    return y


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(5)
    with using_dtype(np.float64):
        x = rng.normal(size=(2, 2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b),
                     stride=(2, 1), padding=(1, 1))
        assert np.allclose(out.data, naive_conv2d(x, w, b, (2, 1), (1, 1)),
                           atol=1e-12)


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 1, 3, 4, 4)).astype(np.float32)
    w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
    out = conv3d(Tensor(x), Tensor(w))
    assert np.allclose(out.data, x, atol=1e-7)


def test_conv3d_temporal_collapse_sums_frames():
    T = 8
    x = Tensor(np.ones((1, 1, T + 1, 3, 3)))
    w = Tensor(np.ones((1, 1, T + 1, 1, 1)))
    out = conv3d(x, w)
    assert out.shape == (1, 1, 1, 3, 3)
    assert np.allclose(out.data, float(T + 1))


def test_conv3d_matches_naive_loops():
    rng = np.random.default_rng(5)
    with using_dtype(np.float64):
        x = rng.normal(size=(2, 2, 3, 4, 5))
        w = rng.normal(size=(3, 2, 2, 2, 3))
        b = rng.normal(size=3)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b),
                     stride=(1, 2, 1), padding=(0, 1, 1))
        expect = naive_conv3d(x, w, b, (1, 2, 1), (0, 1, 1))
        assert np.allclose(out.data, expect, atol=1e-12)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


# ---- combo loss ----

def test_combo_loss_half_ones_closed_form():
    gt = np.zeros((8, 8), dtype=np.float32)
    gt[:4] = 1.0
    pred = Tensor(np.full((8, 8), 0.5, dtype=np.float32))
    loss = combo_loss(pred, gt)
    dice = (2.0 * 16.0 + 1e-6) / (32.0 + 32.0 + 1e-6)
    expected = 0.3 * np.log(2.0) - 0.7 * dice   # = -0.14206 to 5 places
    assert abs(loss.item() - expected) < 1e-6


def test_combo_loss_perfect_prediction_limit():
    rng = np.random.default_rng(11)
    gt = (rng.random((8, 8)) > 0.6).astype(np.float32)
    gt[0, 0] = 1.0
    loss = combo_loss(Tensor(gt.copy()), gt)
    assert abs(loss.item() - (-0.7)) < 1e-3


def test_combo_loss_permutation_bit_identical():
    rng = np.random.default_rng(12)
    raw = rng.uniform(0.01, 0.99, size=(16, 16)).astype(np.float32)
    gt = (rng.random((16, 16)) > 0.5).astype(np.float32)
    perm = rng.permutation(raw.size)
    l1 = combo_loss(Tensor(raw), gt).item()
    l2 = combo_loss(Tensor(raw.ravel()[perm].reshape(16, 16)),
                    gt.ravel()[perm].reshape(16, 16)).item()
    assert l1 == l2


def test_combo_loss_batched_agrees_with_single():
    rng = np.random.default_rng(13)
    raw = rng.uniform(0.05, 0.95, size=(8, 8)).astype(np.float32)
    gt = (rng.random((8, 8)) > 0.5).astype(np.float32)
    single = combo_loss(Tensor(raw), gt).item()
    stacked = combo_loss(Tensor(np.stack([raw, raw])),
                         np.stack([gt, gt])).item()
    assert abs(single - stacked) < 1e-5


def test_combo_loss_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        combo_loss(Tensor(np.full((4, 4), 0.5)), np.zeros((5, 5)))


def test_combo_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    with using_dtype(np.float64):
        raw = rng.uniform(0.05, 0.95, size=(8, 8))
        gt = (rng.random((8, 8)) > 0.5).astype(np.float64)
        pred = Tensor(raw.copy(), requires_grad=True)
        combo_loss(pred, gt).backward()
        analytic = pred.grad
        h = 1e-6
        worst = 0.0
        for i in range(8):
            for j in range(8):
                hi, lo = raw.copy(), raw.copy()
                hi[i, j] += h
                lo[i, j] -= h
                numeric = (combo_loss(Tensor(hi), gt).item()
                           - combo_loss(Tensor(lo), gt).item()) / (2 * h)
                rel = abs(numeric - analytic[i, j]) / max(
                    abs(numeric), abs(analytic[i, j]), 1e-8)
                worst = max(worst, rel)
        assert worst < 1e-4


# ---- optimizer ----

def test_poly_lr_closed_forms():
    state = OptimizerState(max_iters=200)
    assert poly_lr(0, state) == pytest.approx(1e-4, abs=1e-12)
    assert poly_lr(200, state) == 0.0
    assert poly_lr(100, state) == pytest.approx(1e-4 * np.sqrt(0.5),
                                                abs=1e-12)


def test_adamw_zero_grad_no_decay_is_identity():
    with using_dtype(np.float64):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        state = OptimizerState(weight_decay=0.0, max_iters=10)
        adamw_step([("p", p)], [np.zeros(2)], state)
        assert np.array_equal(p.data, [1.5, -2.0])


def test_adamw_zero_grad_applies_decoupled_decay():
    with using_dtype(np.float64):
        p = Tensor(np.array([1.0, -4.0]), requires_grad=True)
        state = OptimizerState(lr0=1e-4, weight_decay=0.01, max_iters=10)
        adamw_step([("p", p)], [np.zeros(2)], state)
        assert np.allclose(p.data, np.array([1.0, -4.0]) * (1.0 - 1e-6),
                           rtol=0, atol=1e-15)


def test_adamw_three_steps_match_hand_unrolled_recurrence():
    with using_dtype(np.float64):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimizerState(lr0=1e-3, weight_decay=0.01, max_iters=100)
        theta, m, v = 1.0, 0.0, 0.0
        for t in (1, 2, 3):
            lr = 1e-3 * (1.0 - (t - 1) / 100) ** 0.5
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            mhat = m / (1.0 - 0.9 ** t)
            vhat = v / (1.0 - 0.999 ** t)
            theta = theta - lr * (mhat / (np.sqrt(vhat) + 1e-8)
                                  + 0.01 * theta)
            adamw_step([("p", p)], [np.array([1.0])], state)
            assert p.data[0] == pytest.approx(theta, abs=1e-15)
        assert state.step == 3


def test_training_trajectory_is_deterministic():
    def run():
        lin = Linear(6, 1, np.random.default_rng(7))
        x = Tensor(np.random.default_rng(8).normal(size=(10, 6)))
        y = Tensor(np.random.default_rng(9).normal(size=(10, 1)))
        state = OptimizerState(lr0=1e-2, max_iters=50)
        for _ in range(5):
            lin.zero_grad()
            d = lin(x) - y
            (d * d).mean().backward()
            adamw_step(lin.parameters(), state=state)
        return [p.data.copy() for _, p in lin.parameters()]

    for pa, pb in zip(run(), run()):
        assert np.array_equal(pa, pb)


# ---- gradient checking ----

def test_grad_check_linear_is_exact():
    with using_dtype(np.float64):
        lin = Linear(5, 3, np.random.default_rng(1))
        x = Tensor(np.random.default_rng(2).normal(size=(4, 5)))
        report = grad_check(lambda: lin(x).sum(), lin.parameters(),
                            tolerance=1e-7)
        assert report.passed
        assert report.max_rel_error < 1e-7


def test_grad_check_attention_block():
    with using_dtype(np.float64):
        attn = MultiHeadSelfAttention(8, 2, np.random.default_rng(1))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
        m = Tensor(np.random.default_rng(2).normal(size=(2, 4, 4)))

        def loss():
            out, w = attn(x)
            return (out * out).sum() + (w * m).sum()

        report = grad_check(loss, attn.parameters(), tolerance=1e-4)
        assert report.passed, report.format()


def test_grad_check_conv_layers():
    with using_dtype(np.float64):
        rng = np.random.default_rng(3)
        c2 = Conv2d(2, 3, 3, rng, stride=2, padding=1)
        c3 = Conv3d(1, 2, (3, 2, 2), rng)
        x2 = Tensor(rng.normal(size=(2, 2, 6, 6)))
        x3 = Tensor(rng.normal(size=(1, 1, 3, 4, 4)))

        def loss():
            a = c2(x2).relu().sum()
            b = c3(x3).sigmoid().sum()
            return a + b

        params = c2.parameters() + c3.parameters()
        report = grad_check(loss, params, tolerance=1e-4)
        assert report.passed, report.format()


def test_grad_check_requires_64bit_mode():
    lin = Linear(2, 2, np.random.default_rng(0))
    x = Tensor(np.ones((1, 2)))
    with pytest.raises(ValueError):
        grad_check(lambda: lin(x).sum(), lin.parameters())


def test_grad_check_sampled_coordinates_bound_work():
    with using_dtype(np.float64):
        lin = Linear(10, 10, np.random.default_rng(4))
        x = Tensor(np.random.default_rng(5).normal(size=(2, 10)))
        report = grad_check(lambda: lin(x).sigmoid().sum(),
                            lin.parameters(), samples_per_param=4,
                            rng=np.random.default_rng(6))
        assert all(e.checked <= 4 for e in report.entries)
        assert report.passed


# ---- weight files ----

def test_weight_file_golden_bytes(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "w.nnw"
    save_weights(path, [("w", arr)])
    expected = (b"NNW1" + struct.pack("<I", 1)
                + struct.pack("<I", 1) + b"w"
                + struct.pack("<I", 2) + struct.pack("<II", 2, 3)
                + arr.astype("<f4").tobytes())
    assert path.read_bytes() == expected


def test_weight_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(14)
    named = [("enc.weight", rng.normal(size=(3, 2, 4, 4))
              .astype(np.float32)),
             ("enc.bias", rng.normal(size=3).astype(np.float32))]
    path = tmp_path / "m.nnw"
    save_weights(path, named)
    loaded = load_weights(path)
    assert list(loaded) == ["enc.weight", "enc.bias"]
    for name, arr in named:
        assert np.array_equal(loaded[name], arr)


def test_weight_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.nnw"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(WeightsError):
        load_weights(path)


def test_weight_truncation_raises(tmp_path):
    path = tmp_path / "t.nnw"
    save_weights(path, [("w", np.ones((4, 4), dtype=np.float32))])
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(WeightsError):
        load_weights(path)


def test_assign_weights_restores_module(tmp_path):
    lin = Linear(3, 2, np.random.default_rng(15))
    path = tmp_path / "lin.nnw"
    save_weights(path, lin.parameters())
    other = Linear(3, 2, np.random.default_rng(99))
    assign_weights(other.parameters(), load_weights(path))
    assert np.allclose(other.weight.data, lin.weight.data, atol=1e-7)
    with pytest.raises(WeightsError):
        assign_weights(Linear(4, 2, np.random.default_rng(0)).parameters(),
                       load_weights(path))
