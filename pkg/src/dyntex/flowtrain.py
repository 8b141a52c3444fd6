"""Desk-scale supervised flow training for the dynamics network.

Samples are synthetic: a smoothed-noise pattern translated by a known
constant (u, v) with bilinear subpixel warping, plus photometric
jitter and flips. Ground truth is exact by construction, so the
network can be trained and evaluated without external data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import media, optim
from . import tensor as T
from .msoe import MsoeWeights, msoe_forward_pair

MAX_SHIFT = 3.0
BORDER = 4  # invalid band: ceil(max shift) + 1
HOLDOUT_SIZE = 64
HOLDOUT_SEED_OFFSET = 900_000


@dataclass
class FlowSample:
    pair: np.ndarray  # (2, H, W, 1) float32
    flow: tuple  # (u, v) pixels/frame, u rightward, v downward
    valid: np.ndarray  # (H, W) bool, border band excluded
    brightness: float
    contrast: float
    flip_h: bool
    flip_v: bool


@dataclass
class TrainRun:
    steps: int
    batch: int
    seed: int
    aepe_trace: list  # rows (step, train_aepe, holdout_aepe)
    checkpoint_path: str | None
    status: str = "ok"


def _smooth_noise(rng, height, width, passes):
    base = rng.normal(127.5, 50.0, size=(height, width, 1)).astype(np.float32)
    for _ in range(passes):
        base = T.blur_axis_np(T.blur_axis_np(base, 0), 1)
    return base


def _warp(frame, u, v):
    """Sample `frame` at (x - u, y - v) with bilinear interpolation, so
    the returned image is the input translated by (u, v)."""
    h, w, _ = frame.shape
    ys = np.arange(h)[:, None] - v
    xs = np.arange(w)[None, :] - u
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = (ys - np.floor(ys)).astype(np.float32)
    fx = (xs - np.floor(xs)).astype(np.float32)
    f = frame[..., 0]
    top = f[y0, x0] * (1 - fx) + f[y0, x1] * fx
    bot = f[y1, x0] * (1 - fx) + f[y1, x1] * fx
    return (top * (1 - fy) + bot * fy)[..., None]


def make_sample(seed, height, width):
    """One synthetic training sample with exact constant ground truth."""
    if height % 16 or width % 16:
        raise ValueError("sample extents must be divisible by 16")
    rng = np.random.default_rng(seed)
    pattern = _smooth_noise(rng, height, width, passes=int(rng.integers(0, 3)))
    u, v = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2)
    frame2 = _warp(pattern, u, v)
    pair = np.stack([pattern, frame2], axis=0)

    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    if flip_h:
        pair = pair[:, :, ::-1]
        u = -u
    if flip_v:
        pair = pair[:, ::-1]
        v = -v

    brightness = float(rng.uniform(-20.0, 20.0))
    contrast = float(rng.uniform(0.8, 1.25))
    pair = pair * contrast + brightness

    valid = np.zeros((height, width), dtype=bool)
    valid[BORDER:-BORDER, BORDER:-BORDER] = True
    return FlowSample(
        pair=np.ascontiguousarray(pair, dtype=np.float32),
        flow=(float(u), float(v)),
        valid=valid,
        brightness=brightness,
        contrast=contrast,
        flip_h=flip_h,
        flip_v=flip_v,
    )


def aepe(predicted, truth, valid):
    """Mean endpoint error of an (H, W, 2) flow against constant truth."""
    pred = np.asarray(predicted)
    m = np.asarray(valid, dtype=bool)
    if m.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {m.shape} != flow shape {pred.shape[:2]}")
    if not m.any():
        raise ValueError("empty validity mask")
    d = pred - np.asarray(truth, dtype=pred.dtype)
    return float(np.sqrt((d * d).sum(axis=-1))[m].mean(dtype=np.float64))


def zero_predictor_baseline(n=200_000, seed=0):
    """Monte-Carlo aEPE of always predicting zero flow: the expected
    norm of a uniform [-3, 3]^2 flow (~2.30 px)."""
    rng = np.random.default_rng(seed)
    uv = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=(n, 2))
    return float(np.linalg.norm(uv, axis=1).mean())


def _batch_loss(samples, weights, need_grad=True):
    """Mean aEPE node over a batch, with gradients wrt the weights."""
    params = {name: T.Tensor(arr) for name, arr in weights.named_tensors().items()}
    # shared leaf nodes so one backward covers the whole batch
    terms = []
    for sample in samples:
        node = T.Tensor(sample.pair)
        _, flow = msoe_forward_pair(node, weights, param_nodes=params)
        terms.append(T.aepe(flow, sample.flow[0], sample.flow[1], sample.valid))
    loss = T.weighted_sum(terms, [1.0 / len(terms)] * len(terms))
    if not need_grad:
        return float(loss.data), None
    leaves = list(params.values())
    grads = T.backward(loss, np.float64(1.0), leaves)
    flat = np.concatenate([g.astype(np.float64).ravel() for g in grads])
    return float(loss.data), flat


def holdout_aepe(weights, size, seed_base, sample_hw):
    """Forward-only aEPE over a fixed set of fresh samples."""
    total = 0.0
    for i in range(size):
        sample = make_sample(seed_base + i, sample_hw, sample_hw)
        _, flow = msoe_forward_pair(T.Tensor(sample.pair), weights)
        total += aepe(flow.data, sample.flow, sample.valid)
    return total / size


def train(
    steps,
    batch=8,
    lr=1e-3,
    seed=0,
    sample_hw=64,
    checkpoint_path=None,
    trace_path=None,
    eval_every=100,
    log=None,
):
    """Adam training on synthetic flow; returns (weights, TrainRun).

    Held-out aEPE over 64 fresh samples is evaluated at `eval_every`
    intervals and at the end. On a non-finite loss, training aborts and
    the last checkpointed weights are returned with status "nan_abort".
    """
    weights = MsoeWeights.random(seed)
    x = weights.flatten().astype(np.float64)
    state = optim.AdamState(lr=lr)
    rng = np.random.default_rng(seed + 1)
    trace = []
    status = "ok"
    last_good = x.copy()
    holdout_seed = seed + HOLDOUT_SEED_OFFSET

    def evaluate(step, train_val):
        w = MsoeWeights.unflatten(x)
        h = holdout_aepe(w, HOLDOUT_SIZE, holdout_seed, sample_hw)
        trace.append((step, train_val, h))
        if log:
            log(f"step {step}: train aEPE {train_val:.4f}, holdout aEPE {h:.4f}")
        return h

    # baseline row before any update
    w0 = MsoeWeights.unflatten(x)
    base_holdout = holdout_aepe(w0, HOLDOUT_SIZE, holdout_seed, sample_hw)
    trace.append((0, float("nan"), base_holdout))
    if log:
        log(f"step 0: holdout aEPE {base_holdout:.4f} (untrained baseline)")

    for step in range(1, steps + 1):
        samples = [
            make_sample(int(rng.integers(0, 2**31 - 1)), sample_hw, sample_hw)
            for _ in range(batch)
        ]
        w = MsoeWeights.unflatten(x)
        loss, grad = _batch_loss(samples, w)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            status = "nan_abort"
            x = last_good
            break
        x = optim.adam_step(grad, state, x)
        if step % eval_every == 0 or step == steps:
            evaluate(step, loss)
            last_good = x.copy()
        else:
            trace.append((step, loss, trace[-1][2]))

    final = MsoeWeights.unflatten(x)
    if checkpoint_path is not None:
        media.save_weights(final, checkpoint_path)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "train_aepe", "holdout_aepe"])
            writer.writerows(trace)
    run = TrainRun(
        steps=steps,
        batch=batch,
        seed=seed,
        aepe_trace=trace,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
        status=status,
    )
    return final, run
