"""Unit tests for the autodiff tensor core: forward oracles and gradients."""

import numpy as np
import pytest

from dyntex import tensor as T
from conftest import check_gradients


def conv2d_loop(x, k, b):
    """Direct-loop same-padding convolution oracle."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((h, w, cout), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += xp[i + di, j + dj, ci] * k[di, dj, ci, co]
                out[i, j, co] = acc + b[co]
    return out


def maxpool_loop(x, window, stride):
    h, w, c = x.shape
    p = window // 2 if stride == 1 else 0
    if stride == 1:
        oh, ow = h, w
        xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    else:
        oh, ow = h // stride, w // stride
        xp = x
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            patch = xp[i * stride:i * stride + window, j * stride:j * stride + window]
            out[i, j] = patch.reshape(-1, c).max(axis=0)
    return out


class TestConv2d:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 5, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b), rtol=1e-5, atol=1e-5)

    def test_matches_loop_oracle_large_fanin_path(self):
        # kh*kw*cin = 3*3*128 > 1024 exercises the slice-sum code path
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4, 128))
        k = rng.standard_normal((3, 3, 128, 2))
        b = rng.standard_normal(2)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b), rtol=1e-5, atol=1e-5)

    def test_one_by_one_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 5, 4))
        k = rng.standard_normal((1, 1, 4, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
        np.testing.assert_allclose(out.data, x @ k[0, 0] + b, rtol=1e-6, atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        arrays = [rng.standard_normal((5, 4, 2)),
                  rng.standard_normal((3, 3, 2, 3)),
                  rng.standard_normal(3)]

        def make(arrs):
            x, k, b = (T.Tensor(a) for a in arrs)
            return T.tsum(T.square(T.conv2d(x, k, b))), [x, k, b]

        assert check_gradients(make, arrays) < 1e-6

    def test_shape_error(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(T.Tensor(np.zeros((4, 4, 3))),
                     T.Tensor(np.zeros((3, 3, 2, 8))),
                     T.Tensor(np.zeros(8)))


class TestPooling:
    def test_maxpool_2x2_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 8, 3))
        out = T.maxpool2d(T.Tensor(x), window=2, stride=2)
        np.testing.assert_array_equal(out.data, maxpool_loop(x, 2, 2))

    def test_maxpool_5x5_stride1_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((7, 6, 2))
        out = T.maxpool2d(T.Tensor(x), window=5, stride=1)
        np.testing.assert_array_equal(out.data, maxpool_loop(x, 5, 1))

    def test_maxpool_gradient_routes_to_argmax(self):
        x = np.array([[[1.0], [4.0]], [[2.0], [3.0]]])
        xt = T.Tensor(x)
        out = T.maxpool2d(xt, window=2, stride=2)
        (g,) = T.backward(T.tsum(out), np.array(1.0), [xt])
        np.testing.assert_array_equal(g[..., 0], [[0, 1], [0, 0]])

    def test_maxpool_gradients_fd(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((6, 6, 2))

        def make(arrs):
            xt = T.Tensor(arrs[0])
            return T.tsum(T.square(T.maxpool2d(xt, window=5, stride=1))), [xt]

        assert check_gradients(make, [x]) < 1e-6

    def test_avgpool_oracle_and_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 6, 2))
        out = T.avgpool2d_2x2(T.Tensor(x))
        expect = 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])
        np.testing.assert_allclose(out.data, expect, rtol=1e-6)

        def make(arrs):
            xt = T.Tensor(arrs[0])
            return T.tsum(T.square(T.avgpool2d_2x2(xt))), [xt]

        assert check_gradients(make, [x]) < 1e-6


class TestNormalization:
    def test_normalize_pair_zero_mean_unit_var(self):
        rng = np.random.default_rng(8)
        pair = rng.uniform(0, 255, size=(2, 8, 8, 1))
        out = T.normalize_pair(T.Tensor(pair)).data
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1.0) < 1e-5

    def test_normalize_pair_shift_scale_invariance(self):
        rng = np.random.default_rng(9)
        pair = rng.uniform(0, 255, size=(2, 8, 8, 1)).astype(np.float64)
        base = T.normalize_pair(T.Tensor(pair)).data
        moved = T.normalize_pair(T.Tensor(pair * 1.7 + 40.0)).data
        np.testing.assert_allclose(moved, base, atol=1e-8)

    def test_normalize_pair_gradient(self):
        rng = np.random.default_rng(10)
        pair = rng.standard_normal((2, 5, 5, 1))
        probe = rng.standard_normal((2, 5, 5, 1))

        def make_weighted(arrs):
            p = T.Tensor(arrs[0])
            n = T.normalize_pair(p)
            return T.fro_mse(n, probe), [p]

        assert check_gradients(make_weighted, [pair]) < 1e-5

    def test_l1_divisive_normalize_channel_sums(self):
        rng = np.random.default_rng(11)
        x = np.abs(rng.standard_normal((4, 4, 6)))
        out = T.l1_divisive_normalize(T.Tensor(x)).data
        sums = np.abs(out).sum(axis=-1)
        assert np.all(sums <= 1.0 + 1e-6)

    def test_l1_divisive_normalize_gradient(self):
        rng = np.random.default_rng(12)
        x = np.abs(rng.standard_normal((3, 3, 4))) + 0.1
        probe = rng.standard_normal((3, 3, 4))

        def make(arrs):
            xt = T.Tensor(arrs[0])
            return T.fro_mse(T.l1_divisive_normalize(xt), probe), [xt]

        assert check_gradients(make, [x], step=1e-4) < 1e-5


class TestResampling:
    def test_pyramid_shapes_and_constant(self):
        x = np.full((16, 32), 3.0)
        levels = T.gaussian_pyramid(T.Tensor(x), 3)
        assert [l.data.shape for l in levels] == [(16, 32), (8, 16), (4, 8)]
        # interior of a constant image stays constant under binomial blur
        assert abs(levels[1].data[2:-2, 2:-2].mean() - 3.0) < 1e-6

    def test_pyramid_divisibility_error(self):
        with pytest.raises(T.ShapeError):
            T.gaussian_pyramid(T.Tensor(np.zeros((6, 8))), 3)

    def test_pyramid_gradient(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((8, 8))

        def make(arrs):
            xt = T.Tensor(arrs[0])
            levels = T.gaussian_pyramid(xt, 3)
            return T.tsum(T.square(levels[-1])), [xt]

        assert check_gradients(make, [x]) < 1e-6

    def test_upsample_identity_and_constant(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((5, 7, 2))
        same = T.bilinear_upsample(T.Tensor(x), (5, 7))
        np.testing.assert_allclose(same.data, x, atol=1e-12)
        const = T.bilinear_upsample(T.Tensor(np.full((3, 3, 1), 2.5)), (9, 11))
        np.testing.assert_allclose(const.data, 2.5, atol=1e-12)

    def test_upsample_gradient(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 4, 2))

        def make(arrs):
            xt = T.Tensor(arrs[0])
            return T.tsum(T.square(T.bilinear_upsample(xt, (7, 9)))), [xt]

        assert check_gradients(make, [x]) < 1e-6


class TestReductionsAndElementwise:
    def test_relu_square_affine_gradients(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((4, 4)) + 0.05  # keep away from the relu kink

        def make(arrs):
            xt = T.Tensor(arrs[0])
            y = T.affine_const(T.square(T.relu(xt)), scale=2.0, offset=1.0)
            return T.tsum(y), [xt]

        assert check_gradients(make, [x]) < 1e-6

    def test_to_grey_weights(self):
        frame = np.zeros((2, 2, 3))
        frame[..., 0] = 1.0
        assert np.allclose(T.to_grey(T.Tensor(frame)).data, 0.299)

    def test_gram_oracle_and_symmetry(self):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((10, 4))
        g = T.gram(T.Tensor(a), normalizer=10.0)
        np.testing.assert_allclose(g.data, a.T @ a / 10.0, rtol=1e-6)
        assert np.array_equal(g.data, g.data.T)  # exact symmetry

    def test_gram_gradient(self):
        rng = np.random.default_rng(18)
        a = rng.standard_normal((6, 3))
        probe = rng.standard_normal((3, 3))

        def make(arrs):
            at = T.Tensor(arrs[0])
            return T.fro_mse(T.gram(at, normalizer=6.0), probe), [at]

        assert check_gradients(make, [a]) < 1e-6

    def test_fro_mse_oracle(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((3, 3))
        t = rng.standard_normal((3, 3))
        out = T.fro_mse(T.Tensor(x), t)
        np.testing.assert_allclose(float(out.data), np.sum((x - t) ** 2), rtol=1e-10)

    def test_weighted_sum(self):
        a = T.Tensor(np.array(2.0))
        b = T.Tensor(np.array(3.0))
        out = T.weighted_sum([a, b], [0.5, 2.0])
        assert float(out.data) == pytest.approx(7.0)

    def test_aepe_oracle(self):
        # single 3-4-5 displacement error
        flow = np.zeros((1, 1, 2))
        flow[0, 0] = [3.0, 4.0]
        out = T.aepe(T.Tensor(flow), 0.0, 0.0, np.ones((1, 1), dtype=bool))
        assert float(out.data) == pytest.approx(5.0, rel=1e-6)

    def test_aepe_respects_valid_mask(self):
        flow = np.zeros((2, 2, 2))
        flow[0, 0] = [100.0, 0.0]
        valid = np.ones((2, 2), dtype=bool)
        valid[0, 0] = False
        out = T.aepe(T.Tensor(flow), 1.0, 0.0, valid)
        assert float(out.data) == pytest.approx(1.0, rel=1e-5)

    def test_aepe_gradient(self):
        rng = np.random.default_rng(20)
        flow = rng.standard_normal((4, 4, 2))
        valid = np.ones((4, 4), dtype=bool)
        valid[0, :] = False

        def make(arrs):
            ft = T.Tensor(arrs[0])
            return T.aepe(ft, 0.3, -0.7, valid), [ft]

        assert check_gradients(make, [flow]) < 1e-5


class TestBackward:
    def test_bit_identical_repeat(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((8, 8, 3)).astype(np.float32)
        k = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)

        def run():
            xt, kt, bt = T.Tensor(x), T.Tensor(k), T.Tensor(b)
            root = T.tsum(T.square(T.conv2d(xt, kt, bt)))
            return T.backward(root, np.array(1.0, dtype=np.float32), [xt, kt, bt])

        g1, g2 = run(), run()
        for a, c in zip(g1, g2):
            assert np.array_equal(a, c)

    def test_unreachable_leaf_raises(self):
        x = T.Tensor(np.zeros((2, 2)))
        other = T.Tensor(np.zeros((2, 2)))
        root = T.tsum(T.square(x))
        with pytest.raises(T.GraphError):
            T.backward(root, np.array(1.0), [other])

    def test_seed_shape_mismatch_raises(self):
        x = T.Tensor(np.zeros((2, 2)))
        root = T.square(x)
        with pytest.raises(T.GraphError):
            T.backward(root, np.array(1.0), [x])

    def test_shared_subgraph_accumulates(self):
        x = T.Tensor(np.array([2.0]))
        s = T.square(x)
        root = T.tsum(T.weighted_sum([T.tsum(s), T.tsum(s)], [1.0, 1.0]))
        (g,) = T.backward(root, np.array(1.0), [x])
        assert g[0] == pytest.approx(8.0)  # d/dx of 2*x^2 at x=2

    def test_float32_leaves_default(self):
        t = T.Tensor([1, 2, 3])
        assert t.data.dtype == np.float32
        t64 = T.Tensor(np.array([1.0], dtype=np.float64))
        assert t64.data.dtype == np.float64
