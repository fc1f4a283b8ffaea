"""Finite-difference checks for every op in the reverse-mode engine."""
import numpy as np
import pytest

import posebc.autodiff as ad


def numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, *shapes, seed=0):
    """build(tensors...) -> output Tensor; checks d(sum(out*w))/d(input)."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    out0 = build(*[ad.Tensor(a) for a in arrays]).data
    w = rng.standard_normal(out0.shape)

    def scalar():
        return float(np.sum(build(*[ad.Tensor(a) for a in arrays]).data * w))

    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    loss = ad.sum_(ad.mul(out, ad.Tensor(w)))
    ad.backward(loss)
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays[i])
        denom = max(np.linalg.norm(num), np.linalg.norm(t.grad), 1e-12)
        assert np.linalg.norm(t.grad - num) / denom < 1e-6, f"operand {i}"


def test_add_broadcast():
    check_op(ad.add, (3, 4), (4,))


def test_sub():
    check_op(ad.sub, (2, 3), (2, 3))


def test_mul_broadcast():
    check_op(ad.mul, (2, 3, 4), (4,))


def test_scale():
    check_op(lambda a: ad.scale(a, -2.5), (3, 3))


def test_matmul_2d():
    check_op(ad.matmul, (3, 4), (4, 5))


def test_matmul_batched_times_2d():
    check_op(ad.matmul, (2, 3, 4), (4, 5))


def test_matmul_batched_both():
    check_op(ad.matmul, (2, 2, 3, 4), (2, 2, 4, 3))


def test_reshape_transpose():
    check_op(lambda a: ad.transpose(ad.reshape(a, (2, 3, 2, 2)), (0, 2, 1, 3)), (2, 12))


def test_getitem():
    check_op(lambda a: ad.getitem(a, (slice(None), 1)), (4, 3, 2))


def test_stack_and_concat():
    check_op(lambda a, b: ad.stack([a, b], axis=1), (2, 3), (2, 3))
    check_op(lambda a, b: ad.concat([a, b], axis=-1), (2, 3), (2, 5))


def test_sum_mean():
    check_op(lambda a: ad.sum_(a, axis=1), (3, 4))
    check_op(lambda a: ad.mean(a, axis=0, keepdims=True), (3, 4))
    check_op(lambda a: ad.mean(a), (2, 5))


def test_softmax():
    check_op(ad.softmax, (3, 4, 5))


def test_gelu():
    check_op(ad.gelu, (4, 7))


def test_layernorm():
    check_op(ad.layernorm, (3, 8))


def test_shared_node_accumulates_gradient():
    x = ad.Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1
    ad.backward(ad.sum_(y))
    assert np.allclose(x.grad, 2 * x.data + 1, atol=1e-12)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_float32_graph_keeps_float32():
    x = ad.Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = ad.mean(ad.gelu(ad.layernorm(x)))
    assert y.data.dtype == np.float32
    ad.backward(y)
    assert x.grad.dtype == np.float32
