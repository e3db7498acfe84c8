"""Gradient and optimizer checks for the tape engine."""

import numpy as np
import pytest

from stationcast import tape as tp
from stationcast.errors import ShapeError

RNG = np.random.default_rng


def fd_ok(build_loss, params, tol=1e-4, h=1e-5, seed=0):
    err = tp.finite_diff_check(build_loss, params, h=h,
                               rng=np.random.default_rng(seed))
    assert err <= tol, f"worst relative gradient error {err:.3e}"


def test_matmul_2d_gradients():
    p = {"a": RNG(1).standard_normal((4, 3)), "b": RNG(2).standard_normal((3, 5))}
    fd_ok(lambda t: tp.reduce_sum(tp.tanh(tp.matmul(t["a"], t["b"]))), p)


def test_matmul_batched_gradients():
    p = {"a": RNG(3).standard_normal((2, 3, 4)), "b": RNG(4).standard_normal((2, 4, 3))}
    fd_ok(lambda t: tp.reduce_mean(tp.tanh(tp.matmul(t["a"], t["b"]))), p)


def test_matmul_batched_by_shared_gradients():
    p = {"a": RNG(5).standard_normal((3, 2, 4)), "b": RNG(6).standard_normal((4, 6))}
    fd_ok(lambda t: tp.reduce_sum(tp.tanh(tp.matmul(t["a"], t["b"]))), p)


def test_elementwise_gradients():
    p = {"a": RNG(7).standard_normal((3, 4)) + 0.3,
         "b": RNG(8).standard_normal((3, 4)) + 0.2}

    def loss(t):
        s = tp.add(t["a"], t["b"])
        d = tp.sub(t["a"], t["b"])
        m = tp.hadamard(s, d)
        return tp.reduce_sum(tp.tanh(tp.scalar_mul(0.7, m)))

    fd_ok(loss, p)


def test_relu_abs_gradients_away_from_kink():
    p = {"a": RNG(9).standard_normal((5, 5)) * 2.0}

    def loss(t):
        return tp.reduce_sum(tp.add(tp.relu(t["a"]), tp.absolute(t["a"])))

    fd_ok(loss, p)


def test_relu_zero_subgradient():
    t = tp.Tape()
    a = t.param(np.zeros(3))
    loss = tp.reduce_sum(tp.relu(a))
    g = tp.grad_of(tp.backward(loss), a)
    assert np.array_equal(g, np.zeros(3))


def test_structural_gradients():
    p = {"a": RNG(10).standard_normal((2, 6)), "b": RNG(11).standard_normal((2, 6))}

    def loss(t):
        c = tp.concat([t["a"], t["b"]], axis=0)
        s = tp.slice_axis(c, 1, 1, 5)
        r = tp.reshape(s, (4, 2, 2))
        tr = tp.transpose(r, (1, 0, 2))
        return tp.reduce_mean(tp.tanh(tr))

    fd_ok(loss, p)


def test_tile_and_bias_gradients():
    p = {"x": RNG(12).standard_normal((3, 4)), "b": RNG(13).standard_normal(4)}

    def loss(t):
        tiled = tp.tile_leading(t["x"], 5)
        return tp.reduce_sum(tp.tanh(tp.add_bias(tiled, t["b"])))

    fd_ok(loss, p)


def test_conv1d_gradients_with_dilation():
    p = {"x": RNG(14).standard_normal((2, 10, 3)),
         "w": RNG(15).standard_normal((3, 3, 4))}

    def loss(t):
        y = tp.conv1d(t["x"], t["w"], dilation=2)
        return tp.reduce_mean(tp.tanh(y))

    fd_ok(loss, p)


def test_conv1d_matches_direct_sum():
    # oracle: explicit loop over output positions and taps
    rng = RNG(16)
    x = rng.standard_normal((2, 8, 3))
    w = rng.standard_normal((4, 3, 2))
    d = 2
    t_out = 8 - 3 * d
    want = np.zeros((2, t_out, 2))
    for m in range(2):
        for t in range(t_out):
            for j in range(4):
                want[m, t] += x[m, t + j * d] @ w[j]
    got = tp.conv1d(x, w, dilation=d).values
    assert np.allclose(got, want, atol=1e-12)


def test_scaled_laplacian_gradients():
    rng = RNG(17)
    base = rng.uniform(0.1, 1.0, size=(5, 5))
    adj = (base + base.T) / 2.0
    np.fill_diagonal(adj, 0.0)

    def loss(t):
        sym = tp.scalar_mul(0.5, tp.add(t["a"], tp.transpose(t["a"], (1, 0))))
        lt = tp.scaled_laplacian_op(tp.absolute(sym))
        return tp.reduce_sum(tp.hadamard(lt, lt))

    fd_ok(loss, {"a": adj}, tol=1e-4)


def test_scaled_laplacian_batched_matches_single():
    rng = RNG(18)
    mats = []
    for _ in range(3):
        b = rng.uniform(0.1, 1.0, size=(4, 4))
        m = (b + b.T) / 2.0
        np.fill_diagonal(m, 0.0)
        mats.append(m)
    stack = np.stack(mats)
    got = tp.scaled_laplacian_op(stack).values
    for i in range(3):
        single = tp.scaled_laplacian_op(mats[i]).values
        assert np.array_equal(got[i], single)


def test_scaled_laplacian_triangle_spectrum():
    # complete graph on three nodes: normalized Laplacian eigenvalues 0, 1.5, 1.5
    adj = np.ones((3, 3)) - np.eye(3)
    lt = tp.scaled_laplacian_op(adj).values
    lap = np.eye(3) - adj / 2.0
    evals = np.linalg.eigvalsh(lap)
    assert np.allclose(np.sort(evals), [0.0, 1.5, 1.5], atol=1e-12)
    want = 2.0 * lap / 1.5 - np.eye(3)
    assert np.allclose(lt, want, atol=1e-9)


def test_scaled_laplacian_self_loop_singleton():
    lt = tp.scaled_laplacian_op(np.array([[1.0]])).values
    assert np.allclose(lt, [[-1.0]], atol=0)


def test_scaled_laplacian_isolated_node_stays_finite():
    adj = np.zeros((3, 3))
    adj[0, 1] = adj[1, 0] = 1.0
    lt = tp.scaled_laplacian_op(adj)
    assert np.isfinite(lt.values).all()
    t = tp.Tape()
    a = t.param(adj)
    loss = tp.reduce_sum(tp.hadamard(tp.scaled_laplacian_op(a),
                                     tp.scaled_laplacian_op(a)))
    g = tp.grad_of(tp.backward(loss), a)
    assert np.isfinite(g).all()


def test_backward_zero_for_untouched_param():
    t = tp.Tape()
    a = t.param(np.ones((2, 2)))
    b = t.param(np.ones((3,)))
    loss = tp.reduce_sum(a)
    store = tp.backward(loss)
    assert np.array_equal(tp.grad_of(store, b), np.zeros(3))
    assert np.array_equal(tp.grad_of(store, a), np.ones((2, 2)))


def test_backward_requires_scalar():
    t = tp.Tape()
    a = t.param(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        tp.backward(tp.tanh(a))


def test_mixing_tapes_raises():
    t1, t2 = tp.Tape(), tp.Tape()
    a = t1.param(np.ones((2, 2)))
    b = t2.param(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        tp.add(a, b)


def test_shape_mismatch_raises():
    t = tp.Tape()
    a = t.param(np.ones((2, 3)))
    b = t.param(np.ones((3, 3)))
    with pytest.raises(ShapeError):
        tp.add(a, b)
    with pytest.raises(ShapeError):
        tp.matmul(a, np.ones((2, 2)))


def test_replay_is_bitwise_deterministic():
    rng = RNG(19)
    p = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal((4, 4))}

    def run():
        t = tp.Tape()
        tp_a, tp_b = t.param(p["a"]), t.param(p["b"])
        loss = tp.reduce_mean(tp.tanh(tp.matmul(tp_a, tp_b)))
        store = tp.backward(loss)
        return loss.values.copy(), tp.grad_of(store, tp_a).copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_corrupted_derivative_is_caught():
    # an op whose backward is 5% off must trip the finite-difference check

    def bad_tanh(a):
        av = tp._as_array(a)
        out = np.tanh(av)
        return tp._emit("bad_tanh", (a,), out,
                        lambda g: (1.05 * g * (1.0 - out * out),))

    p = {"a": RNG(20).standard_normal((3, 3))}
    err = tp.finite_diff_check(
        lambda t: tp.reduce_sum(bad_tanh(t["a"])), p,
        rng=np.random.default_rng(0))
    assert err > 1e-2


def test_linear_function_checks_tightly():
    # central differences are exact on affine maps up to rounding
    p = {"a": RNG(21).standard_normal((4, 4))}
    w = RNG(22).standard_normal((4, 4))
    err = tp.finite_diff_check(
        lambda t: tp.reduce_sum(tp.hadamard(t["a"], tp.TapeTensor(w))), p,
        rng=np.random.default_rng(0))
    assert err < 1e-9


def test_adam_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -0.25, 1.0])}
    st = tp.AdamState()
    out = tp.adam_step(p, g, st, lr=0.1)
    # after bias correction the first step is lr * g / (|g| + eps)
    want = p["w"] - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(out["w"], want, atol=1e-12)
    assert st.t == 1


def test_adam_minimizes_quadratic_bowl():
    target = np.array([1.5, -0.5, 2.0])
    p = {"w": np.zeros(3)}
    st = tp.AdamState()
    for _ in range(800):
        g = {"w": 2.0 * (p["w"] - target)}
        p = tp.adam_step(p, g, st, lr=0.05)
    assert np.allclose(p["w"], target, atol=1e-3)


def test_full_expression_gradients():
    # a composite touching most primitives at once
    rng = RNG(23)
    p = {
        "adj": np.abs(rng.standard_normal((4, 4))) + 0.1,
        "theta": rng.standard_normal((3, 2)),
        "bias": rng.standard_normal(2),
        "x": rng.standard_normal((4, 3)),
    }

    def loss(t):
        sym = tp.scalar_mul(0.5, tp.add(t["adj"], tp.transpose(t["adj"], (1, 0))))
        lt = tp.scaled_laplacian_op(tp.absolute(sym))
        h = tp.matmul(lt, t["x"])
        y = tp.add_bias(tp.matmul(h, t["theta"]), t["bias"])
        return tp.reduce_mean(tp.absolute(tp.tanh(y)))

    fd_ok(loss, p, tol=1e-4)
