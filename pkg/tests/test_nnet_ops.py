import numpy as np
import pytest

from axon import nnet
from axon.nnet import autodiff as ad
from axon.voxcore import SeededRng, VoxError

RNG = np.random.default_rng(1234)


def finite_diff_check(f, tensors, n_probes=10, h=1e-5, tol=1e-4):
    """Central finite differences against analytic grads on random entries."""
    out = f()
    seed_grad = RNG.standard_normal(out.shape)
    out.backward(seed_grad)
    worst = 0.0
    for t in tensors:
        flat = t.data.ravel()
        gflat = t.grad.ravel()
        picks = RNG.choice(flat.size, size=min(n_probes, flat.size), replace=False)
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + h
            up = float((f().data * seed_grad).sum())
            flat[idx] = old - h
            dn = float((f().data * seed_grad).sum())
            flat[idx] = old
            num = (up - dn) / (2 * h)
            ana = gflat[idx]
            rel = abs(num - ana) / max(1e-6, abs(num), abs(ana))
            worst = max(worst, rel)
        t.zero_grad()
    assert worst < tol, f"worst rel error {worst}"
    return worst


def param(shape, scale=1.0):
    return ad.Tensor(RNG.standard_normal(shape) * scale, requires_grad=True)


def test_relu_values():
    x = ad.Tensor([-1.0, 2.0])
    out = ad.relu(x)
    assert list(out.data) == [0.0, 2.0]


def test_elementwise_grads():
    x = param((3, 4))
    y = param((3, 4))
    finite_diff_check(lambda: ad.mul(ad.silu(x), ad.add(y, 0.5)), [x, y])
    finite_diff_check(lambda: ad.relu(x), [x])
    finite_diff_check(lambda: ad.leaky_relu(x, 0.2), [x])
    finite_diff_check(lambda: ad.pow_const(ad.add(ad.mul(x, x), 1.0), -0.5), [x])


def test_broadcast_add_grad():
    x = param((2, 3, 4))
    b = param((1, 3, 1))
    finite_diff_check(lambda: ad.add(x, b), [x, b])


def test_mean_and_sum_grads():
    x = param((4, 5))
    finite_diff_check(lambda: ad.mean(x, axis=1, keepdims=True), [x])
    finite_diff_check(lambda: ad.mean(x), [x])
    finite_diff_check(lambda: ad.sum_all(x), [x])


def test_concat_split_roundtrip():
    a = param((1, 2, 3, 3, 3))
    b = param((1, 3, 3, 3, 3))
    out = ad.concat([a, b], axis=1)
    assert out.shape == (1, 5, 3, 3, 3)
    assert np.array_equal(out.data[:, :2], a.data)
    assert np.array_equal(out.data[:, 2:], b.data)
    finite_diff_check(lambda: ad.concat([a, b], axis=1), [a, b])


def test_conv3d_identity_scaling_kernel():
    x = ad.Tensor(RNG.standard_normal((1, 1, 3, 3, 3)))
    w = ad.Tensor(np.full((1, 1, 1, 1, 1), 2.0))
    out = ad.conv3d(x, w)
    assert np.allclose(out.data, 2.0 * x.data)


def test_conv3d_ones_kernel_interior():
    x = ad.Tensor(np.ones((1, 1, 5, 5, 5)))
    w = ad.Tensor(np.ones((1, 1, 3, 3, 3)))
    out = ad.conv3d(x, w, pad=1)
    assert out.data[0, 0, 2, 2, 2] == pytest.approx(27.0)


def test_conv3d_output_shape_formula():
    x = ad.Tensor(RNG.standard_normal((1, 2, 9, 8, 7)))
    w = param((3, 2, 3, 3, 3), 0.1)
    out = ad.conv3d(x, w, stride=2, pad=1)
    assert out.shape == (1, 3, 5, 4, 4)  # floor((n + 2 - 3)/2) + 1


def test_conv_shape_mismatch_raises():
    x = ad.Tensor(RNG.standard_normal((1, 2, 4, 4, 4)))
    w = param((3, 5, 3, 3, 3))
    with pytest.raises(VoxError):
        ad.conv3d(x, w)
    with pytest.raises(VoxError):
        ad.conv3d(ad.Tensor(np.zeros((1, 1, 2, 2, 2))), param((1, 1, 3, 3, 3)))


def test_conv3d_gradcheck():
    x = param((2, 2, 5, 5, 5))
    w = param((3, 2, 3, 3, 3), 0.2)
    b = param((3,), 0.1)
    finite_diff_check(lambda: ad.conv3d(x, w, b, stride=1, pad=1), [x, w, b])
    finite_diff_check(lambda: ad.conv3d(x, w, b, stride=2, pad=1), [x, w, b])


def test_conv2d_gradcheck():
    x = param((2, 3, 6, 5))
    w = param((4, 3, 3, 3), 0.2)
    b = param((4,), 0.1)
    finite_diff_check(lambda: ad.conv2d(x, w, b, stride=2, pad=1), [x, w, b])


def test_conv_transpose3d_nearest_upsample():
    x = ad.Tensor(RNG.standard_normal((1, 1, 2, 2, 2)))
    w = ad.Tensor(np.ones((1, 1, 2, 2, 2)))
    out = ad.conv_transpose3d(x, w, stride=2)
    assert out.shape == (1, 1, 4, 4, 4)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                block = out.data[0, 0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2]
                assert np.allclose(block, x.data[0, 0, i, j, k])


def test_conv_transpose_output_dim_formula():
    x = ad.Tensor(RNG.standard_normal((1, 2, 5, 4, 3)))
    w = param((2, 3, 4, 4, 4), 0.1)
    out = ad.conv_transpose3d(x, w, stride=2, pad=1)
    # (n-1)*stride - 2*pad + k
    assert out.shape == (1, 3, 10, 8, 6)


def test_conv_transpose_gradcheck():
    x = param((2, 3, 3, 4, 3))
    w = param((3, 2, 2, 2, 2), 0.3)
    b = param((2,), 0.1)
    finite_diff_check(lambda: ad.conv_transpose3d(x, w, b, stride=2), [x, w, b])
    x2 = param((2, 3, 5, 4))
    w2 = param((3, 2, 4, 4), 0.3)
    finite_diff_check(lambda: ad.conv_transpose2d(x2, w2, None, stride=2, pad=1), [x2, w2])


def test_conv_adjoint_identity():
    for stride, pad, k in [(1, 1, 3), (2, 1, 3), (2, 0, 2)]:
        x = RNG.standard_normal((2, 3, 8, 8, 8))
        w = RNG.standard_normal((4, 3, k, k, k))
        st, pd = (stride,) * 3, (pad,) * 3
        y_shape = ad._conv_raw(x, w, st, pd).shape
        y = RNG.standard_normal(y_shape)
        lhs = float((ad._conv_raw(x, w, st, pd) * y).sum())
        opad = tuple(x.shape[2 + i] - ((y.shape[2 + i] - 1) * stride + k - 2 * pad)
                     for i in range(3))
        rhs = float((x * ad._conv_transpose_raw(y, w, st, pd, opad)).sum())
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_group_norm_moments():
    # group variance ~100 keeps the eps=1e-5 floor below the 1e-6 tolerance
    x = ad.Tensor(RNG.standard_normal((2, 8, 4, 4, 4)) * 10 + 1)
    gamma = ad.Tensor(np.ones(8))
    beta = ad.Tensor(np.zeros(8))
    out = ad.group_norm(x, 4, gamma, beta)
    grouped = out.data.reshape(2, 4, -1)
    assert np.max(np.abs(grouped.mean(axis=2))) < 1e-9
    assert np.max(np.abs(grouped.var(axis=2) - 1.0)) < 1e-6


def test_group_norm_constant_input_gives_beta():
    x = ad.Tensor(np.full((1, 4, 2, 2, 2), 5.0))
    gamma = ad.Tensor(np.ones(4))
    beta = ad.Tensor(np.array([1.0, -2.0, 0.5, 0.0]))
    out = ad.group_norm(x, 2, gamma, beta)
    want = np.broadcast_to(beta.data[None, :, None, None, None], out.shape)
    assert np.allclose(out.data, want)


def test_group_norm_rejects_indivisible():
    with pytest.raises(VoxError):
        ad.group_norm(ad.Tensor(np.zeros((1, 5, 2, 2, 2))), 4,
                      ad.Tensor(np.ones(5)), ad.Tensor(np.zeros(5)))


def test_group_norm_gradcheck():
    x = param((2, 4, 3, 3, 3))
    gamma = param((4,))
    beta = param((4,))
    finite_diff_check(lambda: ad.group_norm(x, 2, gamma, beta), [x, gamma, beta])


def test_time_embedding_zero_alternates():
    emb = ad.time_embedding(0, 8)
    assert np.allclose(emb.data, [[0, 1, 0, 1, 0, 1, 0, 1]])


def test_time_embedding_frequencies_geometric():
    emb = ad.time_embedding(1.0, 6)
    omegas = np.arcsin(np.clip(emb.data[0, 0::2], -1, 1))
    assert omegas[0] == pytest.approx(1.0)
    assert omegas[-1] == pytest.approx(1e-4, rel=1e-6)


def test_losses():
    a = ad.Tensor([1.0, 2.0, 3.0])
    b = ad.Tensor([1.5, 2.0, 2.0])
    assert ad.mse_loss(a, b).data == pytest.approx((0.25 + 0 + 1) / 3)
    assert ad.l1_loss(a, b).data == pytest.approx((0.5 + 0 + 1) / 3)
    x = param((5,))
    finite_diff_check(lambda: ad.mse_loss(x, ad.Tensor([0.1, 0.2, 0.3, 0.4, 0.5])), [x])


def test_backward_accumulates_through_shared_nodes():
    x = param((3,))
    y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))  # x^2 + 2x -> grad 2x + 2
    y.backward(np.ones(3))
    assert np.allclose(x.grad, 2 * x.data + 2)
