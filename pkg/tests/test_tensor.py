"""Tensor core: op semantics, multiply accounting, gradients vs finite differences."""

import math

import numpy as np
import pytest

import archscale.tensor as T
from conftest import central_diff, rel_err


def t64(arr, rg=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# hand-checked forward semantics


def test_matmul_identity_count():
    with T.Tape() as tape:
        out = T.matmul(t64(np.eye(2)), t64(np.eye(2)))
    assert np.array_equal(out.data, np.eye(2))
    assert tape.multiply_count == 8  # 2*2*2


def test_matmul_hand_example():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[1.0], [1.0]])
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_grad_vs_fd_and_closed_form():
    rng = np.random.default_rng(0)
    a0 = rng.normal(size=(3, 5))
    b0 = rng.normal(size=(5, 4))
    b = t64(b0, rg=False)

    def f(x):
        return float(T.matmul(t64(x, rg=False), b).data.sum())

    a = t64(a0)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.matmul(a, b))
    grads = tape.backward(loss)
    # closed form: d sum(a@b) / d a = ones @ b.T
    closed = np.ones((3, 4)) @ b0.T
    assert rel_err(grads[a], closed) < 1e-12
    assert rel_err(grads[a], central_diff(f, a0)) < 1e-6


def test_softmax_uniform_and_stability():
    out = T.softmax(t64([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-12)
    big = T.softmax(t64([1000.0, 0.0]))
    assert np.all(np.isfinite(big.data))
    assert np.allclose(big.data, [1.0, 0.0], atol=1e-12)


def test_softmax_rows_nonneg_sum_one():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(scale=5.0, size=(6, 9)))
    out = T.softmax(x, axis=-1)
    assert np.all(out.data >= 0)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-6


def test_softmax_grad_vs_fd():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(7,))
    w = rng.normal(size=(7,))

    def f(x):
        return float((T.softmax(t64(x, rg=False)).data * w).sum())

    x = t64(x0)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.mul(T.softmax(x), T.Tensor(w)))
    grads = tape.backward(loss)
    assert rel_err(grads[x], central_diff(f, x0)) < 1e-5


def test_depthwise_conv_kernel_010_is_identity():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(5, 6)))
    k = t64(np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))  # width 3, 2 groups
    out = T.depthwise_conv1d(x, k, padding="same")
    assert np.allclose(out.data, x.data, atol=1e-15)


def test_mean_pool_constant_and_odd_tail():
    x = t64(np.full((4, 3), 2.5))
    out = T.mean_pool_stride2(x)
    assert out.shape == (2, 3)
    assert np.allclose(out.data, 2.5)
    odd = T.mean_pool_stride2(t64(np.arange(15, dtype=np.float64).reshape(5, 3)))
    assert odd.shape == (3, 3)
    assert np.allclose(odd.data[-1], [12.0, 13.0, 14.0])  # singleton window


def test_cross_entropy_uniform_logits():
    logits = t64(np.zeros((3, 256)))
    loss = T.cross_entropy(logits, np.array([5, 100, 255]))
    assert abs(loss.item() - math.log(256)) < 1e-12


def test_cross_entropy_ignore_id():
    logits = t64(np.zeros((4, 8)))
    full = T.cross_entropy(logits, np.array([1, 2, 3, 0]))
    masked = T.cross_entropy(logits, np.array([1, 2, 0, 0]), ignore_id=0)
    assert abs(full.item() - masked.item()) < 1e-12  # uniform rows all cost ln 8


def test_backward_sum_gives_ones():
    w = t64(np.arange(6, dtype=np.float64).reshape(2, 3))
    with T.Tape() as tape:
        loss = T.reduce_sum(w)
    grads = tape.backward(loss)
    assert np.array_equal(grads[w], np.ones((2, 3)))


def test_backward_requires_scalar():
    w = t64(np.ones((2, 2)))
    with T.Tape() as tape:
        out = T.mul(w, w)
    with pytest.raises(T.GraphError):
        tape.backward(out)


def test_two_layer_mlp_grads_match_fd_and_are_deterministic():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 6))
    w1_0 = rng.normal(size=(6, 8)) / math.sqrt(6)
    w2_0 = rng.normal(size=(8, 3)) / math.sqrt(8)
    targets = rng.integers(0, 3, size=(4,))

    def run(w1_data, w2_data):
        w1, w2 = t64(w1_data), t64(w2_data)
        with T.Tape() as tape:
            h = T.relu(T.matmul(T.Tensor(x0), w1))
            logits = T.matmul(h, w2)
            loss = T.cross_entropy(logits, targets)
        g = tape.backward(loss)
        return loss.item(), g[w1].copy(), g[w2].copy()

    loss, g1, g2 = run(w1_0, w2_0)
    fd1 = central_diff(lambda w: run(w, w2_0)[0], w1_0)
    fd2 = central_diff(lambda w: run(w1_0, w)[0], w2_0)
    assert rel_err(g1, fd1) < 1e-4
    assert rel_err(g2, fd2) < 1e-4
    loss_b, g1_b, g2_b = run(w1_0, w2_0)
    assert loss == loss_b
    assert np.array_equal(g1, g1_b) and np.array_equal(g2, g2_b)


def test_multiply_count_is_shape_pure():
    def count(seed):
        rng = np.random.default_rng(seed)
        x = t64(rng.normal(size=(5, 8)))
        w = t64(rng.normal(size=(8, 8)))
        with T.Tape() as tape:
            h = T.softmax(T.matmul(T.gelu(T.matmul(x, w)), w))
            T.reduce_sum(h)
        return tape.multiply_count

    assert count(0) == count(1) == count(12345)


def test_embed_out_of_range():
    table = t64(np.ones((4, 2)))
    with pytest.raises(T.ShapeError):
        T.embed(np.array([4]), table)


def test_scatter_rows_drops_padding_index():
    src = t64(np.ones((2, 3, 4)))
    idx = np.array([[0, 1, 5], [2, 5, 5]])  # 5 == length -> dropped
    out = T.scatter_rows(src, idx, 5)
    expected = np.zeros((5, 4))
    expected[[0, 1, 2]] = 1.0
    assert np.array_equal(out.data, expected)


def test_nested_tape_rejected():
    with T.Tape():
        with pytest.raises(T.GraphError):
            with T.Tape():
                pass


# ---------------------------------------------------------------------------
# gradient property: every registered op vs central differences, many seeds

def _safe_normal(rng, shape):
    """Values bounded away from 0 so kinked ops (relu) differentiate cleanly."""
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + 0.05)


def _op_cases():
    n, d = 4, 6

    def unary(op, **kw):
        def build(rng):
            x = _safe_normal(rng, (n, d))
            w = rng.normal(size=(n, d))
            def f(xv):
                return float((op(t64(xv, rg=False), **kw).data * w).sum())
            def taped(xt):
                return T.reduce_sum(T.mul(op(xt, **kw), T.Tensor(w)))
            return x, f, taped
        return build

    def binary_second(op, second_shape, **kw):
        """Differentiates through the second argument of a two-tensor op."""
        def build(rng):
            x = _safe_normal(rng, (n, d))
            p = _safe_normal(rng, second_shape)
            w = rng.normal(size=(n, d))
            def f(pv):
                return float((op(T.Tensor(x), t64(pv, rg=False), **kw).data * w).sum())
            def taped(pt):
                return T.reduce_sum(T.mul(op(T.Tensor(x), pt, **kw), T.Tensor(w)))
            return p, f, taped
        return build

    cases = {
        "relu": unary(T.relu),
        "gelu": unary(T.gelu),
        "tanh": unary(T.tanh),
        "sigmoid": unary(T.sigmoid),
        "softmax": unary(T.softmax),
        "neg": unary(T.neg),
        "scale": unary(T.scale, c=1.7),
        "cumsum": unary(T.cumsum, axis=0),
        "unfold1d": None,  # handled below: output shape differs
        "rms_norm_gain": binary_second(T.rms_norm, (d,)),
        "depthwise_kernels": binary_second(T.depthwise_conv1d, (3, 2), padding="causal"),
    }

    def build_pool(rng):
        x = _safe_normal(rng, (5, d))  # odd length exercises the singleton tail
        w = rng.normal(size=(3, d))
        def f(xv):
            return float((T.mean_pool_stride2(t64(xv, rg=False)).data * w).sum())
        def taped(xt):
            return T.reduce_sum(T.mul(T.mean_pool_stride2(xt), T.Tensor(w)))
        return x, f, taped
    cases["mean_pool_stride2"] = build_pool

    def build_unfold(rng):
        x = _safe_normal(rng, (n, d))
        w = rng.normal(size=(n, 3 * d))
        def f(xv):
            return float((T.unfold1d(t64(xv, rg=False), 3, "same").data * w).sum())
        def taped(xt):
            return T.reduce_sum(T.mul(T.unfold1d(xt, 3, "same"), T.Tensor(w)))
        return x, f, taped
    cases["unfold1d"] = build_unfold

    def build_log(rng):
        x = np.abs(rng.normal(size=(n, d))) + 0.5
        w = rng.normal(size=(n, d))
        def f(xv):
            return float((T.log(t64(xv, rg=False)).data * w).sum())
        def taped(xt):
            return T.reduce_sum(T.mul(T.log(xt), T.Tensor(w)))
        return x, f, taped
    cases["log"] = build_log

    def build_div(rng):
        x = _safe_normal(rng, (n, d))
        y = np.abs(rng.normal(size=(n, d))) + 0.5
        w = rng.normal(size=(n, d))
        def f(xv):
            return float((T.div(t64(xv, rg=False), T.Tensor(y)).data * w).sum())
        def taped(xt):
            return T.reduce_sum(T.mul(T.div(xt, T.Tensor(y)), T.Tensor(w)))
        return x, f, taped
    cases["div"] = build_div

    def build_dyn_conv(rng):
        k = T.softmax(T.Tensor(rng.normal(size=(n, 3, 2))), axis=-2).data
        x = _safe_normal(rng, (n, d))
        w = rng.normal(size=(n, d))
        def f(xv):
            return float((T.depthwise_conv1d_dyn(t64(xv, rg=False), T.Tensor(k), "causal").data * w).sum())
        def taped(xt):
            return T.reduce_sum(T.mul(T.depthwise_conv1d_dyn(xt, T.Tensor(k), "causal"), T.Tensor(w)))
        return x, f, taped
    cases["depthwise_conv1d_dyn"] = build_dyn_conv

    def build_einsum(rng):
        a = _safe_normal(rng, (2, n, 3))
        b = rng.normal(size=(2, n, 5))
        w = rng.normal(size=(2, 3, 5))
        def f(av):
            return float((T.einsum2("bnk,bnv->bkv", t64(av, rg=False), T.Tensor(b)).data * w).sum())
        def taped(at):
            return T.reduce_sum(T.mul(T.einsum2("bnk,bnv->bkv", at, T.Tensor(b)), T.Tensor(w)))
        return a, f, taped
    cases["einsum2"] = build_einsum

    def build_embed(rng):
        table = rng.normal(size=(7, d))
        ids = rng.integers(0, 7, size=(n,))
        w = rng.normal(size=(n, d))
        def f(tv):
            return float((T.embed(ids, t64(tv, rg=False)).data * w).sum())
        def taped(tt):
            return T.reduce_sum(T.mul(T.embed(ids, tt), T.Tensor(w)))
        return table, f, taped
    cases["embed"] = build_embed

    def build_ce(rng):
        logits = rng.normal(size=(n, 5))
        targets = rng.integers(0, 5, size=(n,))
        def f(lv):
            return float(T.cross_entropy(t64(lv, rg=False), targets).data)
        def taped(lt):
            return T.cross_entropy(lt, targets)
        return logits, f, taped
    cases["cross_entropy"] = build_ce

    return cases


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_match_central_differences(name):
    build = _op_cases()[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        x0, f, taped = build(rng)
        xt = t64(x0)
        with T.Tape() as tape:
            loss = taped(xt)
        g = tape.backward(loss)[xt]
        worst = max(worst, rel_err(g, central_diff(f, x0.copy())))
    assert worst < 1e-4, f"{name}: worst rel err {worst:.2e}"
