import numpy as np
import pytest

from stylemorph import tensor as T

RNG = np.random.default_rng(0)


def fd_ok(loss, env, tol=1e-4, **kw):
    report = T.finite_diff_check(loss, env, tolerance=tol, **kw)
    bad = {k.name or k.id: v.max_rel_err for k, v in report.items() if not v.passed}
    assert not bad, f"finite-difference failures: {bad}"


def test_identity_and_add():
    x = T.leaf((2,))
    assert np.array_equal(T.evaluate(x, {x: np.array([1.0, 2.0])}), [1.0, 2.0])
    s = T.leaf((1,))
    # add(x, x) doubles: symmetry of the same node as both operands
    assert T.evaluate(s + s, {s: np.array([3.0])})[0] == 6.0


def test_leaky_relu_definition():
    x = T.leaf((2,))
    out = T.evaluate(T.leaky_relu(x, 0.2), {x: np.array([-1.0, 2.0])})
    assert np.allclose(out, [-0.2, 2.0])


def test_square_gradient():
    x = T.leaf(())
    g = T.gradients(x * x, [x], {x: np.float64(3.0)})
    assert g[x] == pytest.approx(6.0)


def test_sum_gradient_is_ones():
    x = T.leaf((3, 4))
    g = T.gradients(T.reduce_sum(x), [x], {x: RNG.standard_normal((3, 4))})
    assert np.array_equal(g[x], np.ones((3, 4)))


def test_sq_norm_gradient():
    w = T.leaf((2, 2))
    g = T.gradients(T.reduce_sum(w * w), [w], {w: np.ones((2, 2))})
    assert np.array_equal(g[w], 2.0 * np.ones((2, 2)))


def test_cube_finite_diff():
    # d/dx x^3 at 2 is 12; central difference must agree to ~1e-6
    x = T.leaf(())
    report = T.finite_diff_check(T.pow_scalar(x, 3.0), {x: np.float64(2.0)},
                                 epsilon=1e-5)
    (check,) = report.values()
    assert check.max_rel_err < 1e-6
    assert check.passed


def test_linear_layer_finite_diff():
    x = T.leaf((3, 3), "x")
    w = T.leaf((3, 3), "w")
    b = T.leaf((3,), "b")
    loss = T.reduce_sum(T.pow_scalar(T.linear(x, w, b), 2.0))
    env = {x: RNG.standard_normal((3, 3)), w: RNG.standard_normal((3, 3)),
           b: RNG.standard_normal(3)}
    fd_ok(loss, env)


def test_modulated_conv_finite_diff():
    x = T.leaf((1, 4, 4), "x")
    w = T.leaf((2, 1, 3, 3), "w")
    s = T.leaf((1,), "s")
    out = T.modulated_conv2d(x, w, s, pad=1, demodulate=True)
    loss = T.reduce_sum(out * T.const(RNG.standard_normal((2, 4, 4))))
    env = {x: RNG.standard_normal((1, 4, 4)),
           w: RNG.standard_normal((2, 1, 3, 3)),
           s: np.array([1.3])}
    fd_ok(loss, env)


@pytest.mark.parametrize("builder,shape", [
    (lambda x: T.reduce_sum(T.exp(x)), (3,)),
    (lambda x: T.reduce_sum(T.log(x + 3.0)), (3,)),
    (lambda x: T.reduce_sum(T.sqrt(x + 3.0)), (3,)),
    (lambda x: T.reduce_sum(T.absval(x) * T.const(RNG.standard_normal(5))), (5,)),
    (lambda x: T.reduce_mean(x * x, axes=0), (4, 2)),
    (lambda x: T.reduce_sum(T.softmax(x, axes=(0, 1)) * T.const(RNG.standard_normal((4, 4)))), (4, 4)),
    (lambda x: T.reduce_sum(T.roll(x, 1, 1) * x), (4, 4)),
    (lambda x: T.reduce_sum(T.avgpool_2x(x) ** 2.0), (2, 4, 4)),
    (lambda x: T.reduce_sum(T.upsample_2x(x) * T.const(RNG.standard_normal((2, 8, 8)))), (2, 4, 4)),
    (lambda x: T.reduce_sum(T.resize_bilinear(x, 3, 5) * T.const(RNG.standard_normal((3, 5)))), (4, 4)),
    (lambda x: T.reduce_sum(T.clamp(x, -0.5, 0.5) * T.const(RNG.standard_normal(7))), (7,)),
    (lambda x: T.l2_norm(x + 1.0), (6,)),
    (lambda x: T.l1_norm(x + 2.5), (6,)),
    (lambda x: T.reduce_sum(T.leaky_relu(x, 0.2) * T.const(RNG.standard_normal(6))), (6,)),
    (lambda x: T.reduce_sum(x / (T.const(RNG.standard_normal(5)) + 4.0)), (5,)),
])
def test_op_finite_diff(builder, shape):
    x = T.leaf(shape, "x")
    reduced = builder(x)
    if reduced.shape != ():
        reduced = T.reduce_sum(reduced)
    fd_ok(reduced, {x: RNG.standard_normal(shape)}, wrt=[x])


def test_conv2d_finite_diff_both_operands():
    x = T.leaf((2, 5, 5), "x")
    w = T.leaf((3, 2, 3, 3), "w")
    loss = T.reduce_sum(T.conv2d(x, w, pad=1) * T.const(RNG.standard_normal((3, 5, 5))))
    fd_ok(loss, {x: RNG.standard_normal((2, 5, 5)),
                 w: RNG.standard_normal((3, 2, 3, 3))})


def test_broadcast_gradients():
    a = T.leaf((3, 1), "a")
    b = T.leaf((4,), "b")
    loss = T.reduce_sum((a * b + b) ** 2.0)
    fd_ok(loss, {a: RNG.standard_normal((3, 1)), b: RNG.standard_normal(4)})


def test_composition_product_rule():
    # f(x) = exp(x) * x^2; manual product rule on a single element
    x = T.leaf(())
    f = T.exp(x) * T.pow_scalar(x, 2.0)
    val = 0.7
    g = T.gradients(f, [x], {x: np.float64(val)})
    manual = np.exp(val) * val**2 + np.exp(val) * 2 * val
    assert float(g[x]) == pytest.approx(manual, rel=1e-12)


def test_evaluate_deterministic_bits():
    x = T.leaf((8, 8))
    loss = T.reduce_sum(T.softmax(x * 3.0, axes=(0, 1)) * T.exp(x))
    env = {x: RNG.standard_normal((8, 8))}
    a = T.evaluate(loss, env)
    b = T.evaluate(loss, env)
    assert a.tobytes() == b.tobytes()


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.matmul(T.leaf((2, 3)), T.leaf((2, 3)))
    with pytest.raises(T.ShapeError):
        T.add(T.leaf((2, 3)), T.leaf((4,)))
    with pytest.raises(T.ShapeError):
        T.avgpool_2x(T.leaf((3, 5, 5)))
    with pytest.raises(T.ShapeError):
        T.conv2d(T.leaf((2, 4, 4)), T.leaf((1, 3, 3, 3)))
    x = T.leaf((2,))
    with pytest.raises(T.ShapeError):
        T.evaluate(x, {x: np.zeros(3)})


def test_unbound_leaf_errors():
    x, y = T.leaf((2,), "x"), T.leaf((2,), "y")
    with pytest.raises(T.TensorError, match="unbound"):
        T.evaluate(x + y, {x: np.zeros(2)})


def test_nonfinite_reports_node():
    x = T.leaf((2,), "probe")
    node = T.log(x)
    with pytest.raises(T.NonFiniteError, match="log"):
        T.evaluate(node, {x: np.array([-1.0, 1.0])})


def test_gradient_of_disconnected_leaf_is_zero():
    x, y = T.leaf((3,), "x"), T.leaf((2,), "y")
    g = T.gradients(T.reduce_sum(x * x), [x, y],
                    {x: np.ones(3), y: np.ones(2)})
    assert np.array_equal(g[y], np.zeros(2))


def test_gradient_requires_scalar():
    x = T.leaf((3,))
    with pytest.raises(T.ShapeError):
        T.gradients(x * x, [x], {x: np.ones(3)})


def test_resize_bilinear_2x2_to_4x4_corners():
    x = T.leaf((2, 2))
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.evaluate(T.resize_bilinear(x, 4, 4), {x: v})
    # half-pixel centers with border clamp keep the corner values exact
    assert out[0, 0] == 1.0 and out[0, 3] == 2.0
    assert out[3, 0] == 3.0 and out[3, 3] == 4.0
    # interior weights, e.g. column position 0.25 between the two columns
    assert out[0, 1] == pytest.approx(0.75 * 1.0 + 0.25 * 2.0)
    assert out[1, 0] == pytest.approx(0.75 * 1.0 + 0.25 * 3.0)


def test_finite_diff_check_reports_instead_of_raising():
    x = T.leaf(())
    report = T.finite_diff_check(T.leaky_relu(x, 0.2), {x: np.float64(0.0)})
    (check,) = report.values()  # kink at 0: must report a failure, not raise
    assert not check.passed
    assert check.max_rel_err > 0.1
