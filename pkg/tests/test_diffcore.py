import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdp.diffcore import Graph, Tensor, backward, forward, grad_check
from mdp.errors import DegenerateEmbeddingError, ShapeError, UsageError


def direct_conv(x, w, b, stride):
    """Zero-padded 3x3 convolution as an explicit six-deep loop."""
    n, h, wd, c = x.shape
    o = w.shape[3]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, o))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for ky in range(3):
                    for kx in range(3):
                        yy, xx = i * stride + ky - 1, j * stride + kx - 1
                        if 0 <= yy < h and 0 <= xx < wd:
                            out[s, i, j] += x[s, yy, xx] @ w[ky, kx]
                out[s, i, j] += b
    return out


# -- forward ----------------------------------------------------------------


def test_identity_graph():
    g = Graph()
    x = g.input("x", shape=(3,))
    g.output(x)
    assert forward(g, {"x": [1, 2, 3]})["out"] == Tensor([1.0, 2.0, 3.0])


def test_relu_forward():
    g = Graph()
    g.output(g.relu(g.input("x", shape=(3,))))
    np.testing.assert_array_equal(g.forward({"x": [-1, 0, 2]})["out"].data, [0, 0, 2])


def test_conv_center_of_ones_is_nine():
    g = Graph()
    y = g.conv3x3(g.const(np.ones((1, 3, 3, 1))), g.const(np.ones((3, 3, 1, 1))))
    g.output(y)
    out = g.forward()["out"].data
    oracle = direct_conv(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), 1)
    assert out[0, 1, 1, 0] == 9.0
    np.testing.assert_array_equal(out, oracle)
    # corners see four pixels, edges six
    assert out[0, 0, 0, 0] == 4.0 and out[0, 0, 1, 0] == 6.0


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [(5, 5), (6, 4), (7, 8)])
def test_conv_matches_direct_loop(stride, size):
    rng = np.random.default_rng(stride * 100 + size[0])
    x = rng.normal(size=(2, *size, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    g = Graph()
    g.output(g.conv3x3(g.const(x), g.const(w), g.const(b), stride=stride))
    np.testing.assert_allclose(g.forward()["out"].data, direct_conv(x, w, b, stride), atol=1e-12)


def test_shape_mismatch_names_node():
    g = Graph()
    a = g.input("a", shape=(2, 3))
    b = g.input("b", shape=(4, 2))
    g.output(g.matmul(a, b))
    with pytest.raises(ShapeError, match="matmul"):
        g.forward({"a": np.ones((2, 3)), "b": np.ones((4, 2))})
    with pytest.raises(ShapeError, match="input 'a'"):
        g.forward({"a": np.ones((3, 3)), "b": np.ones((4, 2))})


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_forward_does_not_mutate_inputs():
    x = np.array([[1.0, -2.0], [3.0, 0.5]])
    keep = x.copy()
    g = Graph()
    g.output(g.l2_normalize(g.relu(g.input("x", shape=(2, 2))), axis=-1))
    g.forward({"x": x})
    np.testing.assert_array_equal(x, keep)


# -- backward ---------------------------------------------------------------


def test_square_derivative():
    g = Graph()
    g.output(g.square(g.param("x", 3.0)))
    g.forward()
    assert backward(g)["x"] == 6.0


def test_relu_sum_derivative():
    g = Graph()
    g.output(g.sum(g.relu(g.param("x", [-1.0, 2.0]))))
    g.forward()
    np.testing.assert_array_equal(g.backward()["x"], [0.0, 1.0])


def test_backward_before_forward():
    g = Graph()
    x = g.input("x", shape=(2,))
    w = g.param("w", [1.0, 2.0])
    g.output(g.sum(g.mul(x, w)))
    with pytest.raises(UsageError, match="before forward"):
        g.backward()
    g.forward({"x": [1.0, 1.0]})
    g.set_param("w", [0.0, 0.0])
    with pytest.raises(UsageError):
        g.backward()


def test_random_three_layer_graph_matches_differences():
    rng = np.random.default_rng(7)
    g = Graph()
    x = g.const(rng.uniform(-2, 2, (5, 4)))
    h = x
    for layer in range(3):
        w = g.param(f"w{layer}", rng.uniform(-2, 2, (4, 4)))
        b = g.param(f"b{layer}", rng.uniform(-2, 2, 4))
        h = g.bias_add(g.matmul(h, w), b)
        if layer < 2:
            h = g.relu(h)
    g.output(g.sum(g.square(h)))
    rep = grad_check(g, eps=1e-3, tol=1e-4)
    assert rep.kink_probes == 0
    assert rep.passed, rep.errors


# -- l2_normalize -----------------------------------------------------------


def test_l2_normalize_examples():
    g = Graph()
    g.output(g.l2_normalize(g.const([3.0, 4.0])))
    np.testing.assert_allclose(g.forward()["out"].data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    g = Graph()
    g.output(g.l2_normalize(g.const(u)))
    np.testing.assert_array_equal(g.forward()["out"].data, u)


def test_l2_normalize_degenerate():
    g = Graph()
    with pytest.raises(DegenerateEmbeddingError):
        g.l2_normalize(g.const([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
              elements=st.floats(-2, 2)))
def test_l2_normalize_unit_norm(x):
    rows = np.linalg.norm(x, axis=1) > 1e-3
    x = x[rows] if rows.any() else np.ones((1, x.shape[1]))
    g = Graph()
    g.output(g.l2_normalize(g.const(x), axis=1))
    out = g.forward()["out"].data
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) < 1e-12)


def test_l2_normalize_gradient():
    rng = np.random.default_rng(3)
    g = Graph()
    v = g.param("v", rng.normal(size=(4, 6)))
    g.output(g.sum(g.mul(g.l2_normalize(v), g.const(rng.normal(size=(4, 6))))))
    assert grad_check(g).passed


# -- grad_check -------------------------------------------------------------


def test_grad_check_linear_is_exact():
    g = Graph()
    w = g.param("w", [1.0, -2.0, 0.5])
    g.output(g.sum(g.mul(w, g.const([3.0, 1.0, -4.0]))))
    rep = grad_check(g)
    assert rep.passed and rep.max_error < 1e-10


def test_grad_check_negative_control():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    g.output(g.sum(g.square(w)))
    g.forward()
    bad = {"w": g.backward()["w"] * 1.01}
    rep = grad_check(g, analytic=bad)
    assert not rep.passed


def test_grad_check_needs_scalar():
    g = Graph()
    g.output(g.square(g.param("w", [1.0, 2.0])))
    with pytest.raises(UsageError, match="scalar"):
        grad_check(g)


def test_prototype_loss_graph_passes():
    from mdp.losses import pixel_to_prototype

    rng = np.random.default_rng(11)
    g = Graph()
    f = g.l2_normalize(g.param("f", rng.normal(size=(10, 4))))
    P = rng.normal(size=(5, 4))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    loss = pixel_to_prototype(f, rng.integers(0, 5, 10), P, np.ones(5, bool), 0.07)
    g.output(loss.node)
    rep = grad_check(g, eps=1e-3, tol=1e-4)
    assert rep.passed, rep.errors


# -- every primitive --------------------------------------------------------


def _prim_graph(name, rng):
    u = lambda *s: rng.uniform(-2, 2, s)
    g = Graph()
    c = g.const(u(3, 4))
    if name == "add":
        y = g.add(g.param("a", u(3, 4)), g.param("b", u(3, 4)))
    elif name == "mul":
        y = g.mul(g.param("a", u(3, 4)), g.param("b", u(3, 4)))
    elif name == "scale":
        y = g.scale(g.param("a", u(3, 4)), -1.7)
    elif name == "shift":
        y = g.shift(g.param("a", u(3, 4)), 0.3)
    elif name == "square":
        y = g.square(g.param("a", u(3, 4)))
    elif name == "matmul":
        y = g.matmul(g.param("a", u(3, 5)), g.param("b", u(5, 4)))
    elif name == "matmul_t":
        y = g.matmul(g.param("a", u(3, 5)), g.param("b", u(4, 5)), transpose_b=True)
    elif name == "relu":
        a = u(3, 4)
        a[np.abs(a) < 0.05] = 0.5  # keep probes off the kink
        y = g.relu(g.param("a", a))
    elif name == "reshape":
        y = g.reshape(g.param("a", u(2, 6)), (3, 4))
    elif name == "bias_add":
        y = g.bias_add(g.param("a", u(3, 4)), g.param("b", u(4)))
    elif name == "take_rows":
        y = g.take_rows(g.param("a", u(4, 4)), [0, 2, 2])
    elif name == "concat_rows":
        y = g.concat_rows([g.param("a", u(1, 4)), g.param("b", u(2, 4))])
    elif name == "l2_normalize":
        a = u(3, 4)
        a[:, 0] += np.sign(a[:, 0]) * 1.0
        y = g.l2_normalize(g.param("a", a))
    elif name == "conv3x3":
        z = g.conv3x3(g.param("x", u(1, 4, 4, 2)), g.param("w", u(3, 3, 2, 3)),
                      g.param("b", u(3)), stride=2)
        y = g.reshape(z, (1, 12))
        c = g.const(u(1, 12))
    elif name == "softmax_log_loss":
        w = rng.uniform(0, 1, (3, 4))
        mask = np.array([True, True, False, True])
        return g, g.softmax_log_loss(g.param("a", u(3, 4)), w, mask)
    elif name == "sum":
        return g, g.sum(g.param("a", u(3, 4)))
    return g, g.sum(g.mul(y, c))


PRIMITIVES = ["add", "mul", "scale", "shift", "square", "sum", "matmul", "matmul_t", "relu",
              "reshape", "bias_add", "take_rows", "concat_rows", "l2_normalize", "conv3x3",
              "softmax_log_loss"]


@pytest.mark.parametrize("name", PRIMITIVES)
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradient(name, seed):
    g, node = _prim_graph(name, np.random.default_rng([seed, len(name)]))
    g.output(node)
    rep = grad_check(g, eps=1e-3, tol=1e-4)
    assert rep.passed, rep.errors


# -- purity and replay ------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_forward_is_pure(x):
    g = Graph()
    w = g.param("w", np.linspace(-1, 1, 12).reshape(4, 3))
    g.output(g.sum(g.square(g.relu(g.matmul(g.input("x", shape=(3, 4)), w)))))
    a = g.forward({"x": x})["out"].data.tobytes()
    b = g.forward({"x": x})["out"].data.tobytes()
    assert a == b


def test_replay_after_set_param():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    g.output(g.sum(g.square(w)))
    assert g.forward()["out"].data == 5.0
    g.set_param("w", [3.0, 0.0])
    assert g.forward()["out"].data == 9.0
    np.testing.assert_array_equal(g.backward()["w"], [6.0, 0.0])
