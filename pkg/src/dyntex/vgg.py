"""Appearance stream: VGG-19 prefix through pool4.

Only the layers feeding the five statistic layers (conv1_1 and the
four pools) are kept. Weights come from a weight file or, for tests,
from a seeded random constructor of identical shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

# Canonical VGG-19 prefix: (name, kind, in_channels, out_channels).
VGG_LAYERS = (
    ("conv1_1", "conv", 3, 64),
    ("conv1_2", "conv", 64, 64),
    ("pool1", "pool", 64, 64),
    ("conv2_1", "conv", 64, 128),
    ("conv2_2", "conv", 128, 128),
    ("pool2", "pool", 128, 128),
    ("conv3_1", "conv", 128, 256),
    ("conv3_2", "conv", 256, 256),
    ("conv3_3", "conv", 256, 256),
    ("conv3_4", "conv", 256, 256),
    ("pool3", "pool", 256, 256),
    ("conv4_1", "conv", 256, 512),
    ("conv4_2", "conv", 512, 512),
    ("conv4_3", "conv", 512, 512),
    ("conv4_4", "conv", 512, 512),
    ("pool4", "pool", 512, 512),
)

VGG_CONV_NAMES = tuple(n for n, k, _, _ in VGG_LAYERS if k == "conv")

# Layers whose activations feed Gram matrices, with channel widths.
STATISTIC_LAYERS = ("conv1_1", "pool1", "pool2", "pool3", "pool4")
STATISTIC_WIDTHS = {"conv1_1": 64, "pool1": 64, "pool2": 128, "pool3": 256, "pool4": 512}

# BGR-order channel means of the usual VGG preprocessing, kept as data
# in the weight file; these are the defaults for randomly built weights.
DEFAULT_MEANS = np.array([123.68, 116.779, 103.939], dtype=np.float32)


def conv_shape_table():
    """Expected kernel/bias shapes per conv layer name."""
    table = {}
    for name, kind, cin, cout in VGG_LAYERS:
        if kind == "conv":
            table[name] = ((3, 3, cin, cout), (cout,))
    return table


@dataclass
class VggWeights:
    """Parameters of the VGG-19 prefix plus the preprocessing means."""

    kernels: dict  # name -> np.ndarray (3, 3, cin, cout)
    biases: dict  # name -> np.ndarray (cout,)
    means: np.ndarray = field(default_factory=lambda: DEFAULT_MEANS.copy())
    avg_pool: bool = False

    def __post_init__(self):
        table = conv_shape_table()
        for name, (kshape, bshape) in table.items():
            if name not in self.kernels:
                raise ValueError(f"VGG weights missing layer {name}")
            if self.kernels[name].shape != kshape:
                raise ValueError(
                    f"VGG layer {name}: kernel shape {self.kernels[name].shape} != {kshape}"
                )
            if self.biases[name].shape != bshape:
                raise ValueError(
                    f"VGG layer {name}: bias shape {self.biases[name].shape} != {bshape}"
                )
        if np.asarray(self.means).shape != (3,):
            raise ValueError("VGG channel means must have 3 entries")

    @classmethod
    def random(cls, seed=0, scale=1.0, zero_bias=True):
        """Seeded random weights of canonical shape (for tests and the
        gradient suite; no converter required)."""
        rng = np.random.default_rng(seed)
        kernels, biases = {}, {}
        for name, (kshape, bshape) in conv_shape_table().items():
            fan_in = kshape[0] * kshape[1] * kshape[2]
            kernels[name] = rng.normal(
                0.0, scale / np.sqrt(fan_in), size=kshape
            ).astype(np.float32)
            biases[name] = (
                np.zeros(bshape, dtype=np.float32)
                if zero_bias
                else rng.normal(0.0, 0.1, size=bshape).astype(np.float32)
            )
        return cls(kernels=kernels, biases=biases)

    def astype(self, dtype):
        return VggWeights(
            kernels={k: v.astype(dtype) for k, v in self.kernels.items()},
            biases={k: v.astype(dtype) for k, v in self.biases.items()},
            means=self.means.astype(dtype),
            avg_pool=self.avg_pool,
        )


def preprocess_frame(frame, means):
    """Subtract the stored channel means from an (H, W, 3) frame node."""
    fd = frame.data if isinstance(frame, T.Tensor) else np.asarray(frame)
    if fd.ndim != 3 or fd.shape[2] != 3:
        raise T.ShapeError(f"preprocess_frame expects (H,W,3), got {fd.shape}")
    node = frame if isinstance(frame, T.Tensor) else T.Tensor(frame)
    return T.affine_const(node, 1.0, -np.asarray(means, dtype=fd.dtype))


def vgg_forward(frame, weights):
    """Forward pass of a preprocessed frame, returning the statistic-layer
    activation nodes {conv1_1, pool1, pool2, pool3, pool4}.

    The input must have both extents divisible by 16 (four stride-2
    pools). conv1_1 activations are taken post-ReLU.
    """
    node = frame if isinstance(frame, T.Tensor) else T.Tensor(frame)
    h, w = node.shape[0], node.shape[1]
    if h % 16 or w % 16:
        raise T.ShapeError(
            f"VGG input extents must be divisible by 16, got {h}x{w}"
        )
    dtype = node.dtype
    acts = {}
    for name, kind, _, _ in VGG_LAYERS:
        if kind == "conv":
            k = T.Tensor(weights.kernels[name].astype(dtype, copy=False))
            b = T.Tensor(weights.biases[name].astype(dtype, copy=False))
            node = T.relu(T.conv2d(node, k, b))
        else:
            node = (
                T.avgpool2d_2x2(node)
                if weights.avg_pool
                else T.maxpool2d(node, window=2, stride=2)
            )
        if name in STATISTIC_LAYERS:
            acts[name] = node
    return acts


def appearance_activations(frame_array, weights):
    """Forward pass on a plain array; returns plain activation arrays."""
    pre = preprocess_frame(np.asarray(frame_array), weights.means)
    return {k: v.data for k, v in vgg_forward(pre, weights).items()}
