import warnings

import numpy as np
import pytest

from moecgan import nn
from moecgan.conv import conv3d
from moecgan.tensor import ShapeError, Tensor, check_gradients


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


class TestConvShapes:
    def test_strided_halves(self, rng):
        conv = nn.Conv3d(1, 3, 4, 2, 1, rng=rng)
        assert conv(Tensor(rng.random((1, 1, 16, 16, 16)))).shape == (1, 3, 8, 8, 8)

    def test_dilated_size_preserving(self, rng):
        conv = nn.Conv3d(1, 2, 3, 1, 2, dilation=2, rng=rng)
        assert conv(Tensor(rng.random((1, 1, 16, 16, 16)))).shape == (1, 2, 16, 16, 16)

    def test_ones_kernel_sum(self):
        conv = nn.Conv3d(1, 1, 4, bias=False)
        conv.weight.data[...] = 1.0
        assert conv(Tensor(np.ones((1, 1, 4, 4, 4)))).data.reshape(-1).tolist() == [64.0]

    def test_output_size_formula(self):
        for n, k, s, p, d in [(16, 4, 2, 1, 1), (9, 3, 1, 4, 4), (7, 2, 3, 0, 1)]:
            conv = nn.Conv3d(1, 1, k, s, p, d)
            assert conv.output_size(n) == (n + 2 * p - d * (k - 1) - 1) // s + 1
            assert conv(Tensor(np.zeros((1, 1, n, n, n)))).shape[-1] == conv.output_size(n)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            nn.Conv3d(2, 1, 3)(Tensor(np.zeros((1, 3, 5, 5, 5))))

    def test_degenerate_output(self):
        with pytest.raises(ShapeError):
            nn.Conv3d(1, 1, 4)(Tensor(np.zeros((1, 1, 2, 2, 2))))

    def test_transpose_doubles(self, rng):
        up = nn.ConvTranspose3d(3, 5, 4, 2, 1, rng=rng)
        assert up(Tensor(rng.random((1, 3, 4, 4, 4)))).shape == (1, 5, 8, 8, 8)

    def test_transpose_impulse_response(self, rng):
        up = nn.ConvTranspose3d(1, 1, 2, 2, 0, bias=False, rng=rng)
        x = np.zeros((1, 1, 3, 3, 3))
        x[0, 0, 1, 2, 0] = 1.0
        out = up(Tensor(x)).data[0, 0]
        np.testing.assert_array_equal(out[2:4, 4:6, 0:2], up.weight.data[0, 0])
        assert np.count_nonzero(out) == np.count_nonzero(up.weight.data)

    @pytest.mark.parametrize("stride,pad,dil", [(2, 1, 1), (1, 2, 2), (2, 0, 1), (3, 1, 2)])
    def test_transpose_is_conv_input_gradient(self, rng, stride, pad, dil):
        w = rng.standard_normal((3, 2, 4, 4, 4))  # conv weight [out=3, in=2]
        # pick a size with no stride remainder so both maps cover the same grid
        n = next(n for n in range(8, 14) if (n + 2 * pad - dil * 3 - 1) % stride == 0)
        x = leaf(rng.standard_normal((2, 2, n, n, n)))
        y = conv3d(x, Tensor(w), None, stride, pad, dil)
        g = rng.standard_normal(y.shape)
        (y * Tensor(g)).sum().backward()
        up = nn.ConvTranspose3d(3, 2, 4, stride, pad, dil, bias=False)
        up.weight.data = w.copy()
        out = up(Tensor(g)).data
        np.testing.assert_allclose(out, x.grad, atol=1e-10)


def layer_grad_check(layer, x_shape, rng, n_instances=20, coords=12):
    worst = 0.0
    params = layer.parameters()
    for _ in range(n_instances):
        x = leaf(rng.standard_normal(x_shape))
        out_shape = layer(x).shape
        w = probe(rng, out_shape)
        fn = lambda x, *ps: (layer(x) * w).sum()
        worst = max(worst, check_gradients(fn, [x, *params], max_coords=coords, rng=rng))
    return worst


class TestLayerGradients:
    def test_conv_k4s2(self, rng):
        assert layer_grad_check(nn.Conv3d(2, 3, 4, 2, 1, rng=rng), (2, 2, 6, 6, 6), rng) < 1e-4

    @pytest.mark.parametrize("rate", [2, 4, 8])
    def test_dilated(self, rng, rate):
        assert layer_grad_check(nn.Conv3d(2, 2, 3, 1, rate, dilation=rate, rng=rng), (1, 2, 6, 6, 6), rng, 20, 8) < 1e-4

    def test_transposed(self, rng):
        assert layer_grad_check(nn.ConvTranspose3d(2, 3, 4, 2, 1, rng=rng), (2, 2, 3, 3, 3), rng) < 1e-4

    def test_batchnorm_train(self, rng):
        bn = nn.BatchNorm3d(2)
        bn.weight.data = rng.standard_normal(2)
        assert layer_grad_check(bn, (2, 2, 3, 3, 3), rng) < 1e-4

    def test_instancenorm(self, rng):
        assert layer_grad_check(nn.InstanceNorm3d(3), (2, 3, 3, 3, 3), rng) < 1e-4

    def test_spectral_norm_path(self, rng):
        sn = nn.SpectralNorm(nn.Conv3d(2, 3, 3, 1, 1, rng=rng), rng=rng)
        sn.power_iteration(5)
        sn.eval()  # fixed u, v so the forward is a pure function of the weight
        assert layer_grad_check(sn, (1, 2, 4, 4, 4), rng) < 1e-4

    def test_spectral_linear_path(self, rng):
        sn = nn.SpectralNorm(nn.Linear(5, 4, rng=rng), rng=rng)
        sn.eval()
        assert layer_grad_check(sn, (3, 5), rng) < 1e-4

    @pytest.mark.parametrize("act", [nn.GELU(), nn.LeakyReLU(0.2), nn.Sigmoid(), nn.ReLU()])
    def test_activations(self, rng, act):
        assert layer_grad_check(act, (2, 2, 3, 3, 3), rng) < 1e-4

    def test_residual_block(self, rng):
        block = nn.ResidualBlock(nn.Sequential(nn.Conv3d(2, 2, 3, 1, 1, rng=rng), nn.InstanceNorm3d(2), nn.ReLU()))
        assert layer_grad_check(block, (1, 2, 4, 4, 4), rng) < 1e-4


class TestNorms:
    def test_batchnorm_statistics(self, rng):
        bn = nn.BatchNorm3d(3)
        y = bn(Tensor(rng.standard_normal((4, 3, 5, 5, 5)) * 3 + 2)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)

    def test_instancenorm_statistics(self, rng):
        y = nn.InstanceNorm3d(3)(Tensor(rng.standard_normal((2, 3, 5, 5, 5)) * 5 - 1)).data
        np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(2, 3, 4)), 1, atol=1e-3)

    def test_batchnorm_eval_bit_identical(self, rng):
        bn = nn.BatchNorm3d(2)
        for _ in range(3):
            bn(Tensor(rng.standard_normal((2, 2, 3, 3, 3))))
        bn.eval()
        x = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
        a, b = bn(x).data, bn(x).data
        assert np.array_equal(a, b)
        rm = bn.running_mean.copy()
        bn(x)
        assert np.array_equal(rm, bn.running_mean)

    def test_running_stats_update(self, rng):
        bn = nn.BatchNorm3d(1, momentum=0.1)
        x = rng.standard_normal((2, 1, 3, 3, 3)) + 4
        bn(Tensor(x))
        assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


class TestSpectralNorm:
    def test_scaled_identity(self):
        lin = nn.Linear(2, 2, bias=False)
        lin.weight.data = 3 * np.eye(2)
        sn = nn.SpectralNorm(lin, rng=np.random.default_rng(0))
        sn.power_iteration(20)
        assert float(sn.sigma().data) == pytest.approx(3.0, abs=1e-12)
        sn.eval()
        np.testing.assert_allclose(nn.spectral_normalize(sn).data, np.eye(2), atol=1e-12)

    def test_random_matrix_against_svd(self, rng):
        for _ in range(10):
            lin = nn.Linear(8, 8, bias=False, rng=rng)
            sn = nn.SpectralNorm(lin, rng=rng)
            sn.power_iteration(50)
            exact = np.linalg.svd(lin.weight.data, compute_uv=False)[0]
            assert abs(float(sn.sigma().data) - exact) / exact < 0.01

    def test_normalized_top_singular_value(self, rng):
        conv = nn.Conv3d(3, 4, 3, rng=rng)
        sn = nn.SpectralNorm(conv, rng=rng)
        sn.power_iteration(30)
        w = nn.spectral_normalize(sn).data.reshape(4, -1)
        assert abs(np.linalg.svd(w, compute_uv=False)[0] - 1.0) < 0.05

    def test_zero_weight_warns(self):
        lin = nn.Linear(3, 2, bias=False)
        lin.weight.data = np.zeros((2, 3))
        sn = nn.SpectralNorm(lin, rng=np.random.default_rng(0))
        with pytest.warns(RuntimeWarning):
            w = nn.spectral_normalize(sn)
        assert np.array_equal(w.data, np.zeros((2, 3)))


class TestAdam:
    def test_first_step(self):
        p = nn.Parameter(np.array([1.0]))
        opt = nn.Adam([p], lr=0.1, betas=(0.9, 0.999))
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)
        assert p.grad is None

    def test_zero_grad_leaves_param(self):
        p = nn.Parameter(np.array([2.0, -1.0]))
        opt = nn.Adam([p])
        p.grad = np.zeros(2)
        opt.step()
        assert p.data.tolist() == [2.0, -1.0]

    def test_two_steps_reference_recurrence(self):
        lr, b1, b2, eps, g = 0.01, 0.5, 0.999, 1e-8, 0.3
        p = nn.Parameter(np.array([0.7]))
        opt = nn.Adam([p], lr, (b1, b2), eps)
        ref, m, v = 0.7, 0.0, 0.0
        for t in (1, 2):
            p.grad = np.array([g])
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert abs(p.data[0] - ref) < 1e-12

    def test_missing_grad(self):
        p, q = nn.Parameter(np.ones(1)), nn.Parameter(np.ones(1))
        opt = nn.Adam([p, q])
        p.grad = np.ones(1)
        with pytest.raises(nn.MissingGradError):
            opt.step()


def test_residual_identity_when_body_zero(rng):
    body = nn.Sequential(nn.Conv3d(2, 2, 3, 1, 1, rng=rng))
    nn.zero_parameters(body)
    block = nn.ResidualBlock(body)
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    assert np.array_equal(block(x).data, x.data)


def test_module_registry_and_state_roundtrip(rng):
    net = nn.Sequential(nn.Conv3d(1, 2, 3, rng=rng), nn.BatchNorm3d(2))
    names = [n for n, _ in net.named_parameters()]
    assert names == ["0.weight", "0.bias", "1.weight", "1.bias"]
    state = net.state_dict()
    assert "1.running_mean" in state
    other = nn.Sequential(nn.Conv3d(1, 2, 3, rng=np.random.default_rng(99)), nn.BatchNorm3d(2))
    other.load_state_dict(state)
    for (_, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_linear_xavier_bounds(rng):
    lin = nn.Linear(30, 20, rng=rng)
    assert np.abs(lin.weight.data).max() <= np.sqrt(6 / 50)
