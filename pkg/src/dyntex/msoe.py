"""Dynamics stream: multiscale spacetime-oriented energy network.

Pipeline per frame pair: joint normalization, a 5-level spatial
pyramid, and per level an 11x11x2 spacetime convolution, squaring,
5x5 stride-1 max pooling, a 1x1 energy-combining convolution and L1
divisive normalization. All levels are bilinearly upsampled to the
input resolution and concatenated into a 320-channel representation;
a small decode head (3x3 conv + ReLU + 1x1 conv) predicts flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LEVELS = 5
CONCAT_CHANNELS = 64 * LEVELS

MSOE_SHAPES = {
    "conv1.kernel": (11, 11, 2, 32),
    "conv1.bias": (32,),
    "combine.kernel": (1, 1, 32, 64),
    "combine.bias": (64,),
    "decode1.kernel": (3, 3, CONCAT_CHANNELS, 64),
    "decode1.bias": (64,),
    "decode2.kernel": (1, 1, 64, 2),
    "decode2.bias": (2,),
}


@dataclass
class MsoeWeights:
    conv1_k: np.ndarray
    conv1_b: np.ndarray
    combine_k: np.ndarray
    combine_b: np.ndarray
    decode1_k: np.ndarray
    decode1_b: np.ndarray
    decode2_k: np.ndarray
    decode2_b: np.ndarray
    epsilon: float = 1e-6
    levels: int = LEVELS

    def __post_init__(self):
        for name, arr in self.named_tensors().items():
            if arr.shape != MSOE_SHAPES[name]:
                raise ValueError(
                    f"MSOE tensor {name}: shape {arr.shape} != {MSOE_SHAPES[name]}"
                )
        if self.levels != LEVELS:
            raise ValueError(f"MSOE weights expect {LEVELS} pyramid levels")

    def named_tensors(self):
        return {
            "conv1.kernel": self.conv1_k,
            "conv1.bias": self.conv1_b,
            "combine.kernel": self.combine_k,
            "combine.bias": self.combine_b,
            "decode1.kernel": self.decode1_k,
            "decode1.bias": self.decode1_b,
            "decode2.kernel": self.decode2_k,
            "decode2.bias": self.decode2_b,
        }

    @classmethod
    def from_named(cls, tensors, epsilon=1e-6, levels=LEVELS):
        return cls(
            conv1_k=tensors["conv1.kernel"],
            conv1_b=tensors["conv1.bias"],
            combine_k=tensors["combine.kernel"],
            combine_b=tensors["combine.bias"],
            decode1_k=tensors["decode1.kernel"],
            decode1_b=tensors["decode1.bias"],
            decode2_k=tensors["decode2.kernel"],
            decode2_b=tensors["decode2.bias"],
            epsilon=epsilon,
            levels=levels,
        )

    @classmethod
    def random(cls, seed=0, nonneg_combine=False):
        """Gaussian init with std 1/sqrt(fan-in), zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in MSOE_SHAPES.items():
            if name.endswith(".bias"):
                tensors[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                tensors[name] = rng.normal(
                    0.0, 1.0 / np.sqrt(fan_in), size=shape
                ).astype(np.float32)
        if nonneg_combine:
            tensors["combine.kernel"] = np.abs(tensors["combine.kernel"])
        return cls.from_named(tensors)

    def astype(self, dtype):
        return MsoeWeights.from_named(
            {k: v.astype(dtype) for k, v in self.named_tensors().items()},
            epsilon=self.epsilon,
            levels=self.levels,
        )

    def flatten(self):
        """Pack all parameters into one flat vector (fixed order)."""
        return np.concatenate([v.ravel() for v in self.named_tensors().values()])

    @classmethod
    def unflatten(cls, vec, epsilon=1e-6):
        tensors = {}
        pos = 0
        for name, shape in MSOE_SHAPES.items():
            n = int(np.prod(shape))
            tensors[name] = np.asarray(vec[pos : pos + n], dtype=np.float32).reshape(shape)
            pos += n
        return cls.from_named(tensors, epsilon=epsilon)


def to_greyscale(frame):
    """Luma conversion, differentiable when given a Tensor node."""
    node = frame if isinstance(frame, T.Tensor) else T.Tensor(frame)
    return T.to_grey(node)


def msoe_forward_pair(pair, weights, with_flow=True, param_nodes=None):
    """Forward a (2, H, W, 1) greyscale pair through the energy model.

    Returns (concat, flow) nodes; `flow` is None when the decode head
    is skipped. H and W must be divisible by 16 (5 pyramid levels).
    `param_nodes` (name -> leaf Tensor) lets the flow trainer share
    weight leaves across a batch and take their gradients.
    """
    node = pair if isinstance(pair, T.Tensor) else T.Tensor(pair)
    if node.data.ndim != 4 or node.shape[0] != 2 or node.shape[3] != 1:
        raise T.ShapeError(f"msoe_forward_pair expects (2,H,W,1), got {node.shape}")
    h, w = node.shape[1], node.shape[2]
    if h % 16 or w % 16:
        raise T.ShapeError(
            f"MSOE input extents must be divisible by 16, got {h}x{w}"
        )
    dtype = node.dtype
    if param_nodes is None:
        param_nodes = {
            name: T.Tensor(arr.astype(dtype, copy=False))
            for name, arr in weights.named_tensors().items()
        }

    normalized = T.normalize_pair(node)
    levels = T.gaussian_pyramid(normalized, weights.levels)
    upsampled = []
    for level in levels:
        e = T.conv_temporal_pair(
            level, param_nodes["conv1.kernel"], param_nodes["conv1.bias"]
        )
        e = T.square(e)
        e = T.maxpool2d(e, window=5, stride=1)
        e = T.conv2d(e, param_nodes["combine.kernel"], param_nodes["combine.bias"])
        e = T.l1_divisive_normalize(e, weights.epsilon)
        upsampled.append(T.bilinear_upsample(e, (h, w)))
    concat = T.concat_channels(upsampled)
    if not with_flow:
        return concat, None
    d = T.relu(
        T.conv2d(concat, param_nodes["decode1.kernel"], param_nodes["decode1.bias"])
    )
    flow = T.conv2d(d, param_nodes["decode2.kernel"], param_nodes["decode2.bias"])
    return concat, flow


def estimate_flow(video, weights):
    """Predicted flow for every consecutive frame pair of a (T, H, W, 3)
    volume; returns a list of (H, W, 2) arrays in pixels per frame."""
    vol = np.asarray(video)
    if vol.ndim != 4 or vol.shape[0] < 2:
        raise T.ShapeError("estimate_flow needs a video with at least 2 frames")
    greys = [to_greyscale(vol[t]).data for t in range(vol.shape[0])]
    fields = []
    for t in range(vol.shape[0] - 1):
        pair = np.stack([greys[t], greys[t + 1]], axis=0)
        _, flow = msoe_forward_pair(T.Tensor(pair), weights)
        fields.append(flow.data)
    return fields
