"""Engine-level checks: frozen examples, finite differences, determinism."""

import numpy as np
import pytest

from scengen.autodiff import (Graph, NoSecondOrderRuleError, NumericFaultError,
                              ShapeError, UsageError, backward_grad,
                              finite_diff_check, forward_eval, input_grad_node)


def test_add_elementwise():
    g = Graph()
    a = g.input("a", [1.0, 2.0])
    b = g.input("b", [3.0, 4.0])
    assert np.array_equal((a + b).values, [4.0, 6.0])


def test_matmul_identity():
    g = Graph()
    x = g.input("x", [[1.0], [2.0], [3.0]])
    y = g.constant(np.eye(3)) @ x
    assert np.array_equal(y.values, [[1.0], [2.0], [3.0]])


def test_mean_relu_hand_value():
    g = Graph()
    x = g.input("x", [-1.0, 2.0, 4.0])
    assert x.relu().mean().values == pytest.approx(2.0)


def test_sum_gradient_is_ones():
    g = Graph()
    x = g.input("x", np.arange(6.0).reshape(2, 3))
    grads = backward_grad(g, x.sum())
    assert np.array_equal(grads[x.node_id].values, np.ones((2, 3)))


def test_mean_square_gradient():
    g = Graph()
    x = g.input("x", [1.0, 2.0])
    grads = backward_grad(g, (x * x).mean())
    assert np.allclose(grads[x.node_id].values, [1.0, 2.0], atol=1e-15)


def test_sigmoid_gradient_at_zero():
    g = Graph()
    x = g.input("x", [0.0])
    grads = backward_grad(g, x.sigmoid().sum())
    assert grads[x.node_id].values[0] == pytest.approx(0.25, abs=1e-15)


def test_relu_gradient_pinned_to_zero_at_kink():
    g = Graph()
    x = g.input("x", [0.0, -1.0, 1.0])
    grads = backward_grad(g, x.relu().sum())
    assert np.array_equal(grads[x.node_id].values, [0.0, 0.0, 1.0])


def test_backward_requires_scalar_root():
    g = Graph()
    x = g.input("x", [1.0, 2.0])
    with pytest.raises(UsageError):
        backward_grad(g, x * 2.0)


def test_shape_mismatch_reports_op():
    g = Graph()
    a = g.input("a", np.ones((2, 3)))
    b = g.input("b", np.ones((2, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        a @ b


def test_nonfinite_forward_is_reported():
    g = Graph()
    x = g.input("x", [-1.0])
    with pytest.raises(NumericFaultError):
        x.log()


# -- input_grad_node -----------------------------------------------------


def test_input_grad_bilinear():
    g = Graph()
    w = g.input("w", [2.0, -3.0])
    x = g.input("x", [5.0, 7.0])
    root = (w * x).sum()
    node = input_grad_node(g, root, x)
    assert np.array_equal(node.values, [2.0, -3.0])
    # d/dw of sum(grad_x) is the identity map
    outer = backward_grad(g, node.sum())
    assert np.array_equal(outer[w.node_id].values, [1.0, 1.0])


def test_input_grad_mean_square():
    g = Graph()
    x = g.input("x", [3.0])
    node = input_grad_node(g, (x * x).mean(), x)
    assert np.allclose(node.values, [6.0], atol=1e-15)


def test_unit_gradient_penalty_is_exactly_zero():
    g = Graph()
    w = g.input("w", [[0.6], [0.8]])
    x = g.input("x", [[0.3, 0.9], [0.5, 0.2]])
    root = (x @ w).sum()
    gx = input_grad_node(g, root, x)
    norm = (gx * gx).sum(axes=1) ** 0.5
    penalty = ((norm - 1.0) ** 2.0).mean()
    assert penalty.values == 0.0
    outer = backward_grad(g, penalty)
    assert np.array_equal(outer[w.node_id].values, [[0.0], [0.0]])


def test_input_grad_matches_backward_grad():
    rng = np.random.default_rng(3)
    for _ in range(25):
        g = Graph()
        x = g.input("x", rng.normal(size=(3, 4)))
        w = g.input("w", rng.normal(size=(4, 2)))
        root = ((x @ w).relu() * rng.normal(size=(3, 2))).sum()
        direct = backward_grad(g, root)[x.node_id].values
        node = input_grad_node(g, root, x)
        assert np.max(np.abs(node.values - direct)) < 1e-12


def test_input_grad_unreachable_gives_zeros():
    g = Graph()
    x = g.input("x", [1.0, 2.0])
    y = g.input("y", [3.0])
    assert np.array_equal(input_grad_node(g, y.sum(), x).values, [0.0, 0.0])


def test_no_second_order_rule_for_sigmoid():
    g = Graph()
    x = g.input("x", [[0.4, 0.6]])
    w = g.input("w", [[1.0], [2.0]])
    root = (x @ w).sigmoid().sum()
    with pytest.raises(NoSecondOrderRuleError, match="sigmoid"):
        input_grad_node(g, root, x)


# -- finite differences ---------------------------------------------------


def _weighted_scalar(t, rng):
    return (t * t.graph.constant(rng.normal(size=t.shape))).sum()


def _fd_case(build, n_cases=100, step=1e-5, tol=1e-4, seed=0):
    worst = 0.0
    for i in range(n_cases):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        g, root, wrt = build(rng)
        report = finite_diff_check(g, root, wrt, step=step, tolerance=tol)
        worst = max(worst, report.max_rel_error)
        assert report.passed, (
            f"case {i}: rel err {report.max_rel_error:.3e} at "
            f"{report.worst_index} (analytic {report.analytic_at_worst}, "
            f"numeric {report.numeric_at_worst})")
    return worst


def _away_from_kink(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "neg", "square", "cube", "sqrt", "inverse", "exp",
    "log", "matmul", "relu", "leaky_relu", "sigmoid", "clip", "sum_all",
    "sum_axis", "mean", "reshape", "transpose", "broadcast", "pad_slice",
    "zero_stuff", "downsample",
])
def test_finite_diff_each_op(name):
    def build(rng):
        g = Graph()
        if name in ("add", "sub", "mul"):
            a = g.input("a", rng.normal(size=(2, 3)))
            b = g.constant(rng.normal(size=(3,)))   # exercises broadcasting
            out = {"add": a + b, "sub": a - b, "mul": a * b}[name]
        elif name == "neg":
            a = g.input("a", rng.normal(size=(4,)))
            out = -a
        elif name == "square":
            a = g.input("a", rng.normal(size=(4,)))
            out = a ** 2.0
        elif name == "cube":
            a = g.input("a", rng.normal(size=(4,)))
            out = a ** 3.0
        elif name == "sqrt":
            a = g.input("a", rng.random(4) + 0.5)
            out = a.sqrt()
        elif name == "inverse":
            a = g.input("a", rng.random(4) + 0.5)
            out = a ** -1.0
        elif name == "exp":
            a = g.input("a", rng.normal(size=(4,)))
            out = a.exp()
        elif name == "log":
            a = g.input("a", rng.random(4) + 0.5)
            out = a.log()
        elif name == "matmul":
            a = g.input("a", rng.normal(size=(2, 3)))
            out = a @ g.constant(rng.normal(size=(3, 2)))
        elif name == "relu":
            a = g.input("a", _away_from_kink(rng, (2, 3)))
            out = a.relu()
        elif name == "leaky_relu":
            a = g.input("a", _away_from_kink(rng, (2, 3)))
            out = a.leaky_relu(0.2)
        elif name == "sigmoid":
            a = g.input("a", rng.normal(size=(4,)))
            out = a.sigmoid()
        elif name == "clip":
            # inputs sit strictly inside the clip box, away from its edges
            a = g.input("a", rng.normal(size=(4,)))
            out = a.clip(-10.0, 10.0)
        elif name == "sum_all":
            a = g.input("a", rng.normal(size=(2, 3)))
            out = a.sum()
        elif name == "sum_axis":
            a = g.input("a", rng.normal(size=(2, 3, 2)))
            out = a.sum(axes=(1,), keepdims=True)
        elif name == "mean":
            a = g.input("a", rng.normal(size=(2, 3)))
            out = a.mean(axes=1)
        elif name == "reshape":
            a = g.input("a", rng.normal(size=(2, 3)))
            out = a.reshape((3, 2))
        elif name == "transpose":
            a = g.input("a", rng.normal(size=(2, 3, 2)))
            out = a.transpose((2, 0, 1))
        elif name == "broadcast":
            a = g.input("a", rng.normal(size=(1, 3)))
            out = a.broadcast_to((4, 3))
        elif name == "pad_slice":
            a = g.input("a", rng.normal(size=(2, 5)))
            out = a.pad_last(2, 1).slice_last(1, 4)
        elif name == "zero_stuff":
            a = g.input("a", rng.normal(size=(2, 3)))
            out = a.zero_stuff(2)
        elif name == "downsample":
            a = g.input("a", rng.normal(size=(2, 6)))
            out = a.downsample(2)
        else:
            raise AssertionError(name)
        return g, _weighted_scalar(out, rng), a
    _fd_case(build, n_cases=100)


def test_finite_diff_linear_graph_is_tight():
    def build(rng):
        g = Graph()
        a = g.input("a", rng.normal(size=(3,)))
        w = g.constant(rng.normal(size=(3,)))
        return g, (a * w).sum(), a
    worst = _fd_case(build, n_cases=50, step=1e-5, tol=1e-9)
    assert worst < 1e-9


def test_finite_diff_through_gradient_node():
    def build(rng):
        g = Graph()
        w = g.input("w", rng.normal(size=(4, 1)))
        x = g.input("x", rng.normal(size=(3, 4)))
        root = ((x @ w).relu() * g.constant(rng.normal(size=(3, 1)))).sum()
        gx = input_grad_node(g, root, x)
        pen = (((gx * gx).sum(axes=1) + 1e-6) ** 0.5 - 1.0)
        return g, (pen * pen).mean(), w
    _fd_case(build, n_cases=100, step=1e-4, tol=1e-3)


def test_finite_diff_rejects_nonpositive_step():
    g = Graph()
    x = g.input("x", [1.0])
    with pytest.raises(UsageError):
        finite_diff_check(g, x.sum(), x, step=0.0)


# -- replay and determinism ------------------------------------------------


def test_forward_eval_replays_with_new_inputs():
    g = Graph()
    x = g.input("x", [1.0, 2.0])
    root = (x * x).sum()
    assert forward_eval(g, {"x": [3.0, 4.0]}, root) == pytest.approx(25.0)
    assert forward_eval(g, {"x": [1.0, 2.0]}, root) == pytest.approx(5.0)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(9)
    vals = rng.normal(size=(3, 3))
    g = Graph()
    x = g.input("x", vals)
    w = g.constant(rng.normal(size=(3, 2)))
    root = ((x @ w).leaky_relu(0.1)).mean()
    first = root.values.copy()
    again = forward_eval(g, {"x": vals}, root)
    assert first.tobytes() == np.asarray(again).tobytes()
    g1 = backward_grad(g, root)[x.node_id].values.copy()
    forward_eval(g, {"x": vals}, root)
    g2 = backward_grad(g, root)[x.node_id].values
    assert g1.tobytes() == g2.tobytes()


def test_identical_builds_are_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        g = Graph()
        x = g.input("x", rng.normal(size=(4, 4)))
        w = g.input("w", rng.normal(size=(4, 1)))
        root = ((x @ w).relu()).mean()
        grad = backward_grad(g, root)[w.node_id].values
        return root.values.tobytes(), grad.tobytes()
    assert run() == run()
