"""Tests for the dynamics-stream motion-energy network."""

import numpy as np
import pytest

from dyntex import msoe
from dyntex import tensor as T
from conftest import check_gradients


def random_pair(seed, hw=32):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 255, size=(2, hw, hw, 1))


def forward(pair, weights):
    concat, flow = msoe.msoe_forward_pair(T.Tensor(np.asarray(pair)), weights)
    return concat.data, flow.data


class TestForward:
    def test_output_shapes(self, msoe_weights_small):
        pair = random_pair(0)
        concat, flow = forward(pair, msoe_weights_small)
        assert concat.shape == (32, 32, msoe.CONCAT_CHANNELS)
        assert flow.shape == (32, 32, 2)

    def test_concat_channel_count_is_levels_times_width(self):
        assert msoe.CONCAT_CHANNELS == msoe.LEVELS * 64

    def test_brightness_invariance(self, msoe_weights_small):
        pair = random_pair(1)
        shifted = np.clip(pair + 30.0, 0, 255)
        # keep the comparison exact by shifting without clipping
        shifted = pair + 30.0
        a, _ = forward(pair, msoe_weights_small)
        b, _ = forward(shifted, msoe_weights_small)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_contrast_invariance(self, msoe_weights_small):
        pair = random_pair(2)
        a, _ = forward(pair, msoe_weights_small)
        b, _ = forward(pair * 1.8, msoe_weights_small)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_concat_nonnegative_with_nonnegative_combine(self):
        w = msoe.MsoeWeights.random(seed=3, nonneg_combine=True)
        pair = random_pair(3)
        concat, _ = forward(pair, w)
        assert concat.min() >= 0.0

    def test_divisive_normalization_bounds_channel_sums(self, msoe_weights_small):
        pair = random_pair(4)
        concat, _ = forward(pair, msoe_weights_small)
        # each level's 64 channels are L1-normalized before upsampling;
        # bilinear upsampling is an average so the bound survives
        sums = np.abs(concat).reshape(32, 32, msoe.LEVELS, 64).sum(axis=-1)
        assert sums.max() <= 1.0 + 1e-3

    def test_requires_pyramid_compatible_size(self, msoe_weights_small):
        pair = np.zeros((2, 24, 24, 1))  # not divisible by 2**(levels-1)
        with pytest.raises(T.ShapeError):
            msoe.msoe_forward_pair(T.Tensor(pair), msoe_weights_small)


class TestFlow:
    def test_estimate_flow_pair_count(self, msoe_weights_small):
        rng = np.random.default_rng(5)
        video = rng.uniform(0, 255, size=(4, 32, 32, 3))
        flows = msoe.estimate_flow(video, msoe_weights_small)
        assert len(flows) == 3
        assert all(f.shape == (32, 32, 2) for f in flows)

    def test_greyscale_projection(self):
        frame = np.zeros((4, 4, 3))
        frame[..., 1] = 1.0
        grey = msoe.to_greyscale(frame)
        np.testing.assert_allclose(grey.data[..., 0], 0.587, atol=1e-6)


class TestWeights:
    def test_named_round_trip(self):
        w = msoe.MsoeWeights.random(seed=6)
        named = w.named_tensors()
        w2 = msoe.MsoeWeights.from_named(named)
        for k, v in w2.named_tensors().items():
            assert np.array_equal(v, named[k])

    def test_flatten_unflatten_round_trip(self):
        w = msoe.MsoeWeights.random(seed=7)
        flat = w.flatten()
        w2 = w.unflatten(flat)
        for k, v in w2.named_tensors().items():
            assert np.array_equal(v, w.named_tensors()[k])

    def test_shapes(self):
        w = msoe.MsoeWeights.random(seed=8)
        named = w.named_tensors()
        assert named["conv1.kernel"].shape == (11, 11, 2, 32)
        assert named["combine.kernel"].shape == (1, 1, 32, 64)
        assert named["decode1.kernel"].shape == (3, 3, msoe.CONCAT_CHANNELS, 64)
        assert named["decode2.kernel"].shape == (1, 1, 64, 2)


class TestGradients:
    def test_concat_gradient_wrt_pixels(self, msoe_weights_small):
        w64 = msoe_weights_small.astype(np.float64)
        rng = np.random.default_rng(9)
        pair = rng.uniform(0, 255, size=(2, 16, 16, 1))
        probe = rng.standard_normal((16, 16, msoe.CONCAT_CHANNELS))

        def make(arrs):
            pt = T.Tensor(arrs[0])
            concat, _ = msoe.msoe_forward_pair(pt, w64)
            return T.fro_mse(concat, probe), [pt]

        assert check_gradients(make, [pair], n_coords=10, step=1e-3) < 1e-4
