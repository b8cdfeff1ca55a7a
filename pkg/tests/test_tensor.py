import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentflow import tensor as T
from latentflow.checks import fd_check, primitive_cases
from latentflow.tensor import ContractViolation, NonFiniteError, Tape, Tensor


def grad_of(fn, *arrays_):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays_]
    with Tape() as tape:
        loss = fn(*ts)
    g = tape.backward(loss)
    return [g[t] for t in ts]


def naive_conv(x, w, b):
    B, H, W, C = x.shape
    k = w.shape[0]
    p = k // 2
    out = np.zeros((B, H, W, w.shape[3]))
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for o in range(w.shape[3]):
                    acc = b[o]
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i + di - p, j + dj - p
                            if 0 <= y < H and 0 <= xx < W:
                                acc += np.dot(x[n, y, xx, :], w[di, dj, :, o])
                    out[n, i, j, o] = acc
    return out


# --- Tensor and Tape ---------------------------------------------------------

def test_tensor_rejects_order_above_four():
    with pytest.raises(ContractViolation):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_integer_data_promoted_to_float():
    assert Tensor([1, 2]).dtype == np.float64


def test_check_finite_flags_nan():
    t = Tensor([1.0, np.nan])
    assert not t.is_finite()
    with pytest.raises(NonFiniteError):
        t.check_finite()


def test_detached_tensor_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x.detach()))
    g = tape.backward(loss)
    assert x in g and x.detach() not in g
    np.testing.assert_allclose(g[x], [1.0, 2.0])


def test_ops_outside_tape_are_not_recorded():
    x = Tensor([1.0], requires_grad=True)
    y = T.square(x)
    assert y.tape is None and y.node_id is None


def test_node_order_is_append_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        a = T.square(x)
        b = T.sum_all(a)
    assert [n.out for n in tape.nodes] == [a, b]
    assert a.node_id < b.node_id


def test_backward_twice_errors():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_needs_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.square(x)
    with pytest.raises(ContractViolation):
        tape.backward(y)


def test_backward_of_sum_gives_ones():
    (g,) = grad_of(T.sum_all, np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_backward_of_sum_of_squares():
    (g,) = grad_of(T.sum_squares, [1.0, 2.0])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_gradients_have_value_shapes(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
    with Tape() as tape:
        h = T.leaky_relu(T.conv2d(x, w))
        p = T.max_pool2(h)
        loss = T.sum_squares(p)
    g = tape.backward(loss)
    for t, grad in g.items():
        assert grad.shape == t.shape


def test_backward_is_linear(rng):
    a = rng.standard_normal((1, 4, 4, 1))
    f1 = lambda x: T.sum_squares(T.leaky_relu(x))  # noqa: E731
    f2 = lambda x: T.sum_all(T.resize_bilinear(x, 6, 3))  # noqa: E731
    (g1,) = grad_of(f1, a)
    (g2,) = grad_of(f2, a)
    (g12,) = grad_of(lambda x: T.add(f1(x), f2(x)), a)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12)


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 3, 3, 1)))
    y = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_zero_padding_counts():
    y = T.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data[0, :, :, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(k, rng):
    x = rng.standard_normal((1, 8, 8, 2))
    w = rng.standard_normal((k, k, 2, 4))
    b = rng.standard_normal(4)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(y.data, naive_conv(x, w, b), atol=1e-6)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.ones((1, 4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 1, 1))))


# --- activations and pooling ------------------------------------------------

def test_leaky_relu_values():
    np.testing.assert_allclose(T.leaky_relu(Tensor([1.0, -1.0]), 0.2).data, [1.0, -0.2])


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1e6)))
def test_leaky_relu_identity_on_nonnegative(a):
    np.testing.assert_array_equal(T.leaky_relu(Tensor(a)).data, a)


def test_leaky_relu_gradient_at_negative_point():
    (g,) = grad_of(lambda x: T.sum_all(T.leaky_relu(x, 0.2)), [-2.0])
    h = 1e-4
    fd = (T.leaky_relu(Tensor([-2.0 + h])).data - T.leaky_relu(Tensor([-2.0 - h])).data) / (2 * h)
    assert g[0] == pytest.approx(0.2) and fd[0] == pytest.approx(0.2)


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ContractViolation):
        T.leaky_relu(Tensor([1.0]), 1.0)


def test_max_pool_small():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert T.max_pool2(x).data.reshape(-1).tolist() == [4.0]


def test_max_pool_constant():
    y = T.max_pool2(Tensor(np.full((1, 4, 6, 2), 3.0)))
    assert y.shape == (1, 2, 3, 2) and np.all(y.data == 3.0)


def test_max_pool_matches_window_scan(rng):
    x = rng.standard_normal((1, 8, 8, 3))
    oracle = np.zeros((1, 4, 4, 3))
    for i in range(4):
        for j in range(4):
            oracle[0, i, j] = x[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(4, 3).max(axis=0)
    np.testing.assert_array_equal(T.max_pool2(Tensor(x)).data, oracle)


def test_max_pool_odd_extent_raises():
    with pytest.raises(ContractViolation):
        T.max_pool2(Tensor(np.ones((1, 3, 4, 1))))


# --- resize and sampling -----------------------------------------------------

def test_resize_ramp_is_exact():
    x = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 2, 2, 1))
    y = T.resize_bilinear(x, 2, 4).data[0, :, :, 0]
    np.testing.assert_allclose(y, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 6))
def test_resize_same_extents_is_identity(h, w):
    x = np.arange(h * w * 2, dtype=float).reshape(1, h, w, 2)
    np.testing.assert_array_equal(T.resize_bilinear(Tensor(x), h, w).data, x)


def weight_table(n_in, n_out):
    """Explicit per-output interpolation weights, corner aligned."""
    table = np.zeros((n_out, n_in))
    for o in range(n_out):
        s = o * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(s)), n_in - 2)
        table[o, lo] = 1 - (s - lo)
        table[o, lo + 1] = s - lo
    return table


def test_resize_up_then_down_matches_weight_table(rng):
    x = rng.standard_normal((1, 4, 4, 1))
    up = T.resize_bilinear(Tensor(x), 8, 8)
    down = T.resize_bilinear(up, 4, 4).data[0, :, :, 0]
    U, D = weight_table(4, 8), weight_table(8, 4)
    oracle = D @ (U @ x[0, :, :, 0] @ U.T) @ D.T
    np.testing.assert_allclose(down, oracle, atol=1e-6)


def test_grid_sample_native_grid_is_identity(rng):
    x = rng.standard_normal((2, 5, 7, 3))
    coords = np.broadcast_to(T.native_grid(5, 7), (2, 5, 7, 2))
    np.testing.assert_allclose(T.grid_sample(Tensor(x), Tensor(coords)).data, x, atol=1e-12)


@given(st.floats(-5, 5), arrays(np.float64, (1, 4, 4, 2), elements=st.floats(-3, 3)))
def test_grid_sample_constant_input(c, coords):
    out = T.grid_sample(Tensor(np.full((1, 4, 4, 1), c)), Tensor(coords)).data
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_grid_sample_matches_four_neighbour_oracle(rng):
    x = rng.standard_normal((1, 6, 6, 1))
    coords = rng.uniform(0, 1, (1, 6, 6, 2))
    out = T.grid_sample(Tensor(x), Tensor(coords)).data
    for i in range(6):
        for j in range(6):
            px, py = coords[0, i, j, 0] * 5, coords[0, i, j, 1] * 5
            x0, y0 = min(int(px), 4), min(int(py), 4)
            fx, fy = px - x0, py - y0
            v = ((1 - fx) * (1 - fy) * x[0, y0, x0, 0] + fx * (1 - fy) * x[0, y0, x0 + 1, 0]
                 + (1 - fx) * fy * x[0, y0 + 1, x0, 0] + fx * fy * x[0, y0 + 1, x0 + 1, 0])
            assert out[0, i, j, 0] == pytest.approx(v, abs=1e-12)


def test_grid_sample_coordinate_gradient_fd(rng):
    x = rng.standard_normal((1, 6, 6, 1))
    coords = rng.uniform(0.05, 0.95, (1, 6, 6, 2))
    err, _ = fd_check(lambda a, c: T.sum_squares(T.grid_sample(a, c)), [x, coords], rng, n_samples=20, h=1e-6)
    assert err <= 1e-4


# --- every primitive against central differences ------------------------------

@pytest.mark.parametrize("case", primitive_cases(np.random.default_rng(0)), ids=lambda c: c[0])
def test_primitive_gradient(case):
    name, fn, inputs = case
    err, n = fd_check(fn, inputs, np.random.default_rng(1), n_samples=10, h=1e-4)
    assert err <= 1e-3, f"{name}: {err}"


def test_primitives_deterministic(rng):
    x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w)).data
    b = T.conv2d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_in_add_raises():
    with pytest.raises(ContractViolation):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
