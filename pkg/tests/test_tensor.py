import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fsrlab import tensor as T
from fsrlab.gradcheck import gradcheck
from fsrlab.tensor import ShapeError, Tensor, frozen, get_tape, no_grad


def leaf(x, name=None):
    return Tensor(x, requires_grad=True, name=name)


# -- forward values ---------------------------------------------------------

def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_add_values():
    assert T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]


def test_mul_backward_product_rule():
    a, b = leaf([2.0]), leaf([3.0])
    (a * b).sum().backward()
    assert a.grad.tolist() == [3.0]
    assert b.grad.tolist() == [2.0]


def test_matmul_identity_and_arithmetic():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_against_differences(rng):
    a, b = leaf(rng.uniform(-2, 2, (3, 4)), "a"), leaf(rng.uniform(-2, 2, (4, 2)), "b")
    m = rng.standard_normal((3, 2))
    rep = gradcheck(lambda: (a @ b * m).sum(), [a, b], tol=1e-6)
    assert rep.passed, rep.summary()


def test_reductions():
    x = Tensor([[1.0, 3.0], [5.0, 7.0]])
    assert x.mean().item() == 4.0
    assert Tensor(np.zeros((2, 2))).sum().item() == 0.0
    assert Tensor([1.0, 9.0, 3.0]).max().item() == 9.0


def test_linearity_and_power_rule():
    w = leaf([1.0, 1.0, 1.0])
    w.sum().backward()
    assert w.grad.tolist() == [1.0, 1.0, 1.0]
    w = leaf([1.0, 2.0])
    (w * w).sum().backward()
    assert w.grad.tolist() == [2.0, 4.0]


def test_elementwise_dispatch():
    a, b = Tensor([4.0]), Tensor([2.0])
    cases = {"add": 6.0, "sub": 2.0, "mul": 8.0, "div": 2.0}
    for kind, want in cases.items():
        assert T.elementwise(kind, a, b).item() == want
    assert T.elementwise("sqrt", a).item() == 2.0
    assert T.elementwise("neg", a).item() == -4.0
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_max_splits_ties():
    x = leaf([2.0, 2.0, 1.0])
    x.max().backward()
    assert x.grad.tolist() == [0.5, 0.5, 0.0]


def test_log_softmax_rows(rng):
    z = rng.standard_normal((4, 5)) * 30
    out = T.log_softmax(Tensor(z)).data
    oracle = z - z.max(1, keepdims=True) - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True))
    assert np.allclose(out, oracle, atol=1e-12)
    assert np.allclose(T.softmax(Tensor(z)).sum(axis=1), 1.0, atol=1e-12)


def test_take_with_repeats_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    T.take(x, np.array([0, 0, 2])).sum().backward()
    assert x.grad.tolist() == [2.0, 0.0, 1.0]


def test_conv2d_against_direct_correlation(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in [(1, 0), (2, 1), (1, 1), (3, 2)]:
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = (7 + 2 * pad - 3) // stride + 1
        ow = (6 + 2 * pad - 3) // stride + 1
        ref = np.empty((2, 4, oh, ow))
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
        assert np.allclose(out, ref, atol=1e-12), (stride, pad)


def test_batch_norm_forward(rng):
    z = rng.standard_normal((5, 3, 4, 4)) * 3 + 1
    g, b = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    out, mean, var = T.batch_norm(Tensor(z), Tensor(g), Tensor(b), 1e-5)
    assert np.allclose(mean, z.mean(axis=(0, 2, 3)))
    assert np.allclose(var, z.var(axis=(0, 2, 3)))
    ref = (z - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5) * g[None, :, None, None] \
        + b[None, :, None, None]
    assert np.allclose(out.data, ref, atol=1e-12)


# -- broadcasting -------------------------------------------------------------

@given(hnp.mutually_broadcastable_shapes(num_shapes=2, max_dims=4, max_side=4))
def test_broadcast_shape_matches_numpy(shapes):
    a, b = shapes.input_shapes
    assert T.broadcast_shape(a, b) == np.broadcast_shapes(a, b)


def test_broadcast_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 2\).*\(4,\)"):
        Tensor(np.zeros((3, 2))) + Tensor(np.zeros(4))


@given(hnp.mutually_broadcastable_shapes(num_shapes=2, max_dims=3, max_side=3), st.integers(0, 2**31))
def test_grad_shape_equals_leaf_shape(shapes, seed):
    rng = np.random.default_rng(seed)
    sa, sb = shapes.input_shapes
    a, b = leaf(rng.standard_normal(sa)), leaf(rng.uniform(1, 2, sb))
    ((a * b) / b + a).sum().backward()
    assert a.grad.shape == sa and b.grad.shape == sb


@given(st.integers(0, 2**31))
def test_sum_of_product_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
    (a * b).sum().backward()
    assert np.array_equal(a.grad, b.data) and np.array_equal(b.grad, a.data)


# -- tape contract ------------------------------------------------------------

def test_tape_is_cleared_after_backward():
    a = leaf([1.0, 2.0])
    loss = (a * a).sum()
    assert len(get_tape()) == 2
    loss.backward()
    assert len(get_tape()) == 0


def test_tape_topological_order():
    a = leaf([1.0])
    b = T.exp(a)
    c = b * a
    nodes = get_tape().nodes
    seen = set()
    for node in nodes:
        for p in node.parents:
            if not p.is_leaf:
                assert id(p) in seen
        seen.add(id(node.out))
    c.sum().backward()


def test_shared_subexpression_visited_once():
    a = leaf([3.0])
    b = a * a  # used twice below
    (b + b).sum().backward()
    assert a.grad.tolist() == [12.0]


def test_backward_rejects_nonscalar():
    with pytest.raises(ShapeError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with no_grad():
        out = a * a
    assert len(get_tape()) == 0 and not out.requires_grad


def test_frozen_blocks_gradient_even_after_exit():
    a, b = leaf([2.0]), leaf([3.0])
    with frozen([b]):
        loss = (a * b).sum()
    assert b.requires_grad
    loss.backward()
    assert a.grad.tolist() == [3.0] and b.grad is None


def test_strict_division_by_zero():
    with pytest.raises(ZeroDivisionError):
        Tensor([1.0]) / Tensor([0.0])


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = leaf(rng.standard_normal((2, 3, 6, 6)))
        w = leaf(rng.standard_normal((4, 3, 3, 3)))
        loss = (T.relu(T.conv2d(x, w, None, 2, 1)) * 1.5).mean()
        loss.backward()
        return loss.item(), x.grad.copy(), w.grad.copy()
    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2 and np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_gradients_accumulate_across_backward_calls():
    a = leaf([1.0])
    (a * 2.0).sum().backward()
    (a * 3.0).sum().backward()
    assert a.grad.tolist() == [5.0]


def test_relu_propagates_nan():
    assert np.isnan(T.relu(Tensor([np.nan, 1.0])).data[0])
