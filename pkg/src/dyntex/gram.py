"""Gram-matrix texture statistics and the synthesis losses.

Targets are plain symmetric PSD matrices averaged over frames (or
frame pairs); synthesized statistics are per-frame Gram nodes on the
graph so the loss differentiates back to the pixels. All loss values
accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

APPEARANCE_LAYERS = ("conv1_1", "pool1", "pool2", "pool3", "pool4")
DYNAMICS_LAYERS = ("concat", "flow-decode")


@dataclass
class GramMatrix:
    """Channel correlation statistic with its averaging divisor."""

    values: np.ndarray  # (N, N), symmetric
    layer_name: str
    normalizer: float


@dataclass
class LossConfig:
    """Weights and layer selections of the combined texture loss."""

    alpha: float = 1.0
    beta: float = 1.0
    appearance_layers: tuple = APPEARANCE_LAYERS
    dynamics_layer: str = "concat"
    t_out: int = 12

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one of alpha, beta must be positive")
        if self.dynamics_layer not in DYNAMICS_LAYERS:
            raise ValueError(
                f"dynamics layer must be one of {DYNAMICS_LAYERS}, got {self.dynamics_layer!r}"
            )


def _flatten(act):
    arr = act.data if isinstance(act, T.Tensor) else np.asarray(act)
    return arr.reshape(-1, arr.shape[-1])


def _sym_gram(a):
    g = a.T.astype(np.float64) @ a.astype(np.float64)
    return np.triu(g) + np.triu(g, 1).T


def gram_frame(activation, layer_name="", normalizer=None):
    """Per-frame Gram: X^T X / (N*M) for an (M locations, N channels) map."""
    a = _flatten(activation)
    m, n = a.shape
    norm = float(n * m) if normalizer is None else normalizer
    return GramMatrix(values=_sym_gram(a) / norm, layer_name=layer_name, normalizer=norm)


def gram_target_appearance(frame_activations, layer_name=""):
    """Target appearance Gram averaged over frames: divisor T*N*M."""
    if not frame_activations:
        raise ValueError("gram_target_appearance needs at least one frame")
    mats = [_flatten(a) for a in frame_activations]
    m, n = mats[0].shape
    for a in mats[1:]:
        if a.shape != (m, n):
            raise ValueError("all frames must share activation shape")
    norm = float(len(mats) * n * m)
    total = np.zeros((n, n), dtype=np.float64)
    for a in mats:
        total += _sym_gram(a)
    return GramMatrix(values=total / norm, layer_name=layer_name, normalizer=norm)


def gram_target_dynamics(pair_activations, layer_name=""):
    """Target dynamics Gram averaged over frame pairs: divisor (T-1)*N*M."""
    if len(pair_activations) < 1:
        raise ValueError("gram_target_dynamics needs at least one frame pair (T >= 2)")
    return gram_target_appearance(pair_activations, layer_name=layer_name)


def gram_node(act_node, normalizer=None):
    """Per-frame Gram as a graph node (divisor N*M unless overridden)."""
    arr = act_node.data
    n = arr.shape[-1]
    m = arr.size // n
    return T.gram(act_node, float(n * m) if normalizer is None else normalizer)


def appearance_loss(targets, frame_act_nodes, config):
    """Appearance loss node over all frames and layers: mean over
    (layer, frame) of the squared Frobenius Gram distance.

    `targets` maps layer name -> GramMatrix; `frame_act_nodes` is a list
    (one entry per output frame) of {layer name -> activation node}.
    """
    layers = config.appearance_layers
    for layer in layers:
        if layer not in targets:
            raise ValueError(f"missing appearance target for layer {layer}")
    t_out = len(frame_act_nodes)
    terms = []
    for acts in frame_act_nodes:
        for layer in layers:
            if layer not in acts:
                raise ValueError(f"missing synthesized activations for layer {layer}")
            terms.append(T.fro_mse(gram_node(acts[layer]), targets[layer].values))
    w = 1.0 / (len(layers) * t_out)
    return T.weighted_sum(terms, [w] * len(terms))


def dynamics_loss(target, pair_act_nodes, n_pairs=None):
    """Dynamics loss node: mean squared Frobenius Gram distance over
    frame pairs (single dynamics layer, so L_dyn = 1). `n_pairs`
    overrides the averaging denominator (endless mode uses T_out)."""
    if len(pair_act_nodes) < 1:
        raise ValueError("dynamics loss needs at least one frame pair (T_out >= 2)")
    terms = [T.fro_mse(gram_node(a), target.values) for a in pair_act_nodes]
    denom = len(terms) if n_pairs is None else n_pairs
    return T.weighted_sum(terms, [1.0 / denom] * len(terms))


def total_loss(config, appearance_term, dynamics_term):
    """alpha * appearance + beta * dynamics, as a scalar node."""
    terms, weights = [], []
    if appearance_term is not None:
        terms.append(appearance_term)
        weights.append(config.alpha)
    if dynamics_term is not None:
        terms.append(dynamics_term)
        weights.append(config.beta)
    return T.weighted_sum(terms, weights)
