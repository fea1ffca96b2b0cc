"""Gradient checks for every op the models use, against central differences."""

from __future__ import annotations

import numpy as np
import pytest

from styleloop import autodiff as ad
from styleloop.autodiff import Tensor


def central_diff_check(fn, arrays, rng, h=1e-6, tol=1e-6, samples=8):
    """Compare analytic grads of a scalar-valued fn against central FD."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    for t in tensors:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig - h
            dn = float(fn(*[Tensor(x.data) for x in tensors]).data)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            an = float(gflat[i])
            assert abs(fd - an) <= tol * max(1.0, abs(fd), abs(an)), (fd, an)


def test_elementwise_ops(rng):
    a = rng.standard_normal((4, 5)) + 2.5  # keep sqrt/log domains safe
    central_diff_check(lambda t: ad.mean(ad.sqrt(t)), [a], rng)
    central_diff_check(lambda t: ad.mean(ad.log(t)), [a], rng)
    central_diff_check(lambda t: ad.mean(ad.exp(ad.mul(t, 0.3))), [a], rng)
    central_diff_check(lambda t: ad.mean(ad.tanh(t)), [a], rng)
    central_diff_check(lambda t: ad.mean(ad.gelu(t)), [a - 2.5], rng)
    central_diff_check(lambda t: ad.mean(ad.absolute(t)), [a - 2.0], rng)
    central_diff_check(lambda t: ad.mean(ad.powc(t, 3.0)), [a], rng)


def test_binary_ops_with_broadcasting(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    c = rng.standard_normal(())
    central_diff_check(lambda x, y: ad.mean(ad.mul(x, y)), [a, b], rng)
    central_diff_check(lambda x, y: ad.mean(ad.add(x, y)), [a, b], rng)
    central_diff_check(lambda x, y: ad.mean(ad.add(ad.mul(x, 2.0), y)), [a, c], rng)


def test_matmul_shapes(rng):
    central_diff_check(
        lambda x, y: ad.mean(ad.matmul(x, y)),
        [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))],
        rng,
    )
    # broadcast batched case used by cross-attention
    central_diff_check(
        lambda x, y: ad.mean(ad.matmul(x, y)),
        [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 5, 2))],
        rng,
    )


def test_reductions_and_shapes(rng):
    a = rng.standard_normal((3, 4, 5))
    m = rng.standard_normal((3, 5, 4))
    central_diff_check(lambda t: ad.sum_(ad.mul(ad.transpose(t, (0, 2, 1)), Tensor(m))), [a], rng)
    central_diff_check(lambda t: ad.mean(ad.reshape(t, (12, 5))), [a], rng)
    central_diff_check(lambda t: ad.sum_(ad.mean(t, axis=1)), [a], rng)
    central_diff_check(lambda t: ad.sum_(ad.sum_(t, axis=(0, 2), keepdims=True)), [a], rng)


def test_softmax_and_layernorm(rng):
    a = rng.standard_normal((4, 6))
    proj = Tensor(rng.standard_normal((4, 6)))
    central_diff_check(lambda t: ad.sum_(ad.mul(ad.softmax(t, axis=-1), proj)), [a], rng)
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    central_diff_check(
        lambda t, gg, bb: ad.sum_(ad.mul(ad.layer_norm(t, gg, bb), proj)), [a, g, b], rng
    )


def test_conv_upsample_embedding_stack(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    central_diff_check(
        lambda xx, ww: ad.mean(ad.powc(ad.conv2d(xx, ww, stride=2, pad=1), 2.0)), [x, w], rng
    )
    proj = Tensor(rng.standard_normal((2, 3, 12, 12)))
    central_diff_check(lambda t: ad.sum_(ad.mul(ad.upsample_nearest2x(t), proj)), [x], rng)
    table = rng.standard_normal((7, 4))
    ids = np.array([1, 3, 3, 0])
    central_diff_check(lambda t: ad.mean(ad.embedding(t, ids)), [table], rng)
    u, v = rng.standard_normal(5), rng.standard_normal(5)
    central_diff_check(lambda p, q: ad.mean(ad.powc(ad.stack0([p, q]), 2.0)), [u, v], rng)


def test_no_grad_builds_no_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(t, 2.0)
    assert not out.requires_grad and out._backward is None
    out2 = ad.mul(t, 2.0)
    assert out2.requires_grad


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(t, 2.0).backward()


def test_grad_accumulates_across_uses(rng):
    t = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.sum_(ad.mul(t, 3.0) + ad.mul(t, t))  # 3t + t^2 -> dy/dt = 3 + 2t = 7
    y.backward()
    np.testing.assert_allclose(t.grad, [7.0])


def test_scalar_constants_do_not_promote_dtype():
    t = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    out = ad.mean((ad.mul(t, 2.0) + 1.0) / 4.0 - 0.5)
    assert out.dtype == np.float32
    out.backward()
    assert t.grad.dtype == np.float32
