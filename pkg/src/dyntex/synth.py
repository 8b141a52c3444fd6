"""Texture generation: noise init, loss assembly over both streams,
and the L-BFGS pixel optimization modes (batch, incremental, endless,
transfer, animate).

Pixels are unconstrained floats during optimization; clamping to
[0, 255] happens only at export (media.save_frames).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import gram, msoe, optim
from . import tensor as T
from . import vgg as vggmod

NOISE_MEAN = 127.5
NOISE_STD = 27.5


class SynthesisError(RuntimeError):
    """Optimization diverged; carries the last finite iterate."""

    def __init__(self, message, volume=None):
        super().__init__(message)
        self.volume = volume


@dataclass
class SynthesisConfig:
    alpha: float = 1.0
    beta: float = 1.0
    t_out: int = 12
    height: int = 256
    width: int = 256
    iters: int = 1000
    seed: int = 0
    dynamics_layer: str = "concat"  # or "flow-decode"
    endless: bool = False
    # absolute gradient tolerances are meaningless across the two streams
    # (their loss scales differ by orders of magnitude), so synthesis stops
    # on the iteration budget or relative loss change only
    lbfgs: optim.LbfgsOptions = field(
        default_factory=lambda: optim.LbfgsOptions(grad_tol=0.0)
    )

    def loss_config(self, t_out=None):
        return gram.LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            dynamics_layer=self.dynamics_layer,
            t_out=self.t_out if t_out is None else t_out,
        )


@dataclass
class SynthesisTargets:
    """Target Gram statistics; either stream may be disabled (None)."""

    appearance: dict | None  # layer name -> GramMatrix
    dynamics: gram.GramMatrix | None


@dataclass
class SynthesisResult:
    volume: np.ndarray  # (T, H, W, 3) float, unclamped
    trace: list  # rows (iteration, appearance, dynamics, total)
    status: str
    initial_loss: float
    final_loss: float


def init_noise(t_out, height, width, seed):
    """Seeded IID Gaussian init, mean 127.5, std 27.5, clamped to [0, 255]."""
    rng = np.random.default_rng(seed)
    vol = rng.normal(NOISE_MEAN, NOISE_STD, size=(t_out, height, width, 3))
    return np.clip(vol, 0.0, 255.0).astype(np.float32)


def compute_targets(appearance_source, dynamics_source, vgg_w, msoe_w, config):
    """Gram targets from source videos (which may differ per stream).

    The appearance source may be a single (H, W, 3) frame; the dynamics
    source needs at least two frames. Streams with zero weight are
    skipped entirely.
    """
    app = None
    if config.alpha > 0:
        if appearance_source is None:
            raise ValueError("appearance stream enabled but no appearance source")
        src = np.asarray(appearance_source)
        if src.ndim == 3:
            src = src[None]
        per_layer = {name: [] for name in gram.APPEARANCE_LAYERS}
        for t in range(src.shape[0]):
            acts = vggmod.appearance_activations(src[t], vgg_w)
            for name in gram.APPEARANCE_LAYERS:
                per_layer[name].append(acts[name])
        app = {
            name: gram.gram_target_appearance(mats, layer_name=name)
            for name, mats in per_layer.items()
        }
    dyn = None
    if config.beta > 0:
        if dynamics_source is None:
            raise ValueError("dynamics stream enabled but no dynamics source")
        src = np.asarray(dynamics_source)
        if src.ndim != 4 or src.shape[0] < 2:
            raise ValueError("dynamics source must have at least 2 frames")
        use_flow = config.dynamics_layer == "flow-decode"
        acts = []
        greys = [msoe.to_greyscale(src[t]).data for t in range(src.shape[0])]
        for t in range(src.shape[0] - 1):
            pair = T.Tensor(np.stack([greys[t], greys[t + 1]]))
            concat, flow = msoe.msoe_forward_pair(pair, msoe_w, with_flow=use_flow)
            acts.append((flow if use_flow else concat).data)
        dyn = gram.gram_target_dynamics(acts, layer_name=config.dynamics_layer)
    return SynthesisTargets(appearance=app, dynamics=dyn)


def _dynamics_pairs(t_out, endless):
    pairs = [(t, t + 1) for t in range(t_out - 1)]
    if endless:
        pairs.append((t_out - 1, 0))
    return pairs


def build_loss(video, targets, vgg_w, msoe_w, config, t_out):
    """Assemble the total loss node for a (T, H, W, 3) video leaf.

    Returns (total, appearance, dynamics) scalar nodes; disabled terms
    are None.
    """
    cfg = config.loss_config(t_out)
    frames = [T.take_frame(video, t) for t in range(t_out)]
    app_term = None
    if cfg.alpha > 0:
        frame_acts = []
        for frame in frames:
            pre = vggmod.preprocess_frame(frame, vgg_w.means)
            frame_acts.append(vggmod.vgg_forward(pre, vgg_w))
        app_term = gram.appearance_loss(targets.appearance, frame_acts, cfg)
    dyn_term = None
    if cfg.beta > 0:
        if t_out < 2:
            raise ValueError("dynamics stream needs t_out >= 2")
        use_flow = cfg.dynamics_layer == "flow-decode"
        greys = [T.to_grey(f) for f in frames]
        pairs = _dynamics_pairs(t_out, config.endless)
        nodes = []
        for a, b in pairs:
            pair = T.stack_pair(greys[a], greys[b])
            concat, flow = msoe.msoe_forward_pair(pair, msoe_w, with_flow=use_flow)
            nodes.append(flow if use_flow else concat)
        dyn_term = gram.dynamics_loss(targets.dynamics, nodes, n_pairs=len(pairs))
    total = gram.total_loss(cfg, app_term, dyn_term)
    return total, app_term, dyn_term


def make_loss_fn(targets, vgg_w, msoe_w, config, t_out, shape, dtype=np.float32):
    """Flat-vector loss callback for the optimizer.

    Also memoizes the per-stream loss parts of recent evaluations so
    accepted iterates can be traced without re-evaluating.
    """
    parts_cache = {}
    cache_keys = []

    def fn(x):
        vol = np.asarray(x, dtype=dtype).reshape(shape)
        video = T.Tensor(vol)
        total, app, dyn = build_loss(video, targets, vgg_w, msoe_w, config, t_out)
        g = T.backward(total, np.float64(1.0), [video])[0]
        key = hash(x.tobytes())
        parts_cache[key] = (
            float(app.data) if app is not None else 0.0,
            float(dyn.data) if dyn is not None else 0.0,
        )
        cache_keys.append(key)
        if len(cache_keys) > 8:
            parts_cache.pop(cache_keys.pop(0), None)
        return float(total.data), g.astype(np.float64).ravel()

    fn.parts_for = lambda x: parts_cache.get(hash(x.tobytes()))
    return fn


def synthesize(targets, vgg_w, msoe_w, config, init=None, pinned_frames=()):
    """Optimize a noise volume to match the target statistics.

    `pinned_frames` lists frame indices held bit-exactly fixed (the
    optimizer only sees the free pixels). Returns the optimized volume
    and the accepted-loss trace.
    """
    t_out = config.t_out
    if config.beta > 0 and t_out < 2:
        raise ValueError("dynamics-weighted synthesis needs t_out >= 2")
    shape = (t_out, config.height, config.width, 3)
    if init is None:
        init = init_noise(t_out, config.height, config.width, config.seed)
    else:
        init = np.asarray(init, dtype=np.float32)
        if init.shape != shape:
            raise ValueError(f"init shape {init.shape} != {shape}")

    free = np.ones(shape, dtype=bool)
    for t in pinned_frames:
        free[t] = False
    free_flat = free.ravel()
    base = init.astype(np.float64).ravel()

    loss_fn = make_loss_fn(targets, vgg_w, msoe_w, config, t_out, shape)

    def masked_fn(z):
        x = base.copy()
        x[free_flat] = z
        f, g = loss_fn(x)
        masked_fn.last_full = x
        return f, g[free_flat]

    trace = []

    def on_accept(it, z, f):
        x = base.copy()
        x[free_flat] = z
        parts = loss_fn.parts_for(x)
        if parts is None:
            app, dyn = float("nan"), float("nan")
        else:
            app, dyn = parts
        trace.append((it, app, dyn, f))

    z0 = base[free_flat]
    try:
        f0, _ = loss_fn(base)
        p0 = loss_fn.parts_for(base)
        trace.append((0, p0[0], p0[1], f0))
        result = optim.lbfgs_minimize(
            masked_fn, z0, max_iters=config.iters, options=config.lbfgs, callback=on_accept
        )
    except optim.NanLossError as exc:
        last = base.copy()
        if exc.best_x is not None:
            last[free_flat] = exc.best_x
        raise SynthesisError(
            f"synthesis diverged: {exc}", volume=last.reshape(shape).astype(np.float32)
        ) from exc

    out = base.copy()
    out[free_flat] = result.x
    volume = out.reshape(shape).astype(np.float32)
    return SynthesisResult(
        volume=volume,
        trace=trace,
        status=result.status,
        initial_loss=f0,
        final_loss=result.fx,
    )


def synthesize_incremental(targets, vgg_w, msoe_w, config, subseq_len):
    """Generate a long sequence subsequence-by-subsequence.

    Consecutive subsequences overlap by exactly one frame: the first
    frame of each later subsequence is the previous one's last frame,
    pinned bit-exactly during its optimization.
    """
    n = subseq_len
    t_out = config.t_out
    if n < 2:
        raise ValueError("subsequence length must be >= 2")
    if t_out <= n:
        raise ValueError("incremental mode needs t_out > subsequence length")

    frames = []
    traces = []
    seg_index = 0
    while len(frames) < t_out:
        if seg_index == 0:
            seg_len = n
            pinned = ()
            seg_init = None
        else:
            remaining = t_out - len(frames)
            seg_len = min(n, remaining + 1)
            pinned = (0,)
            seg_init = init_noise(
                seg_len, config.height, config.width, config.seed + seg_index
            )
            seg_init[0] = frames[-1]
        seg_cfg = replace(config, t_out=seg_len, seed=config.seed + seg_index)
        result = synthesize(
            targets, vgg_w, msoe_w, seg_cfg, init=seg_init, pinned_frames=pinned
        )
        start = 1 if seg_index > 0 else 0
        frames.extend(result.volume[t] for t in range(start, seg_len))
        traces.append(result.trace)
        seg_index += 1

    volume = np.stack(frames[:t_out], axis=0)
    flat_trace = [row for tr in traces for row in tr]
    return SynthesisResult(
        volume=volume,
        trace=flat_trace,
        status="segments_done",
        initial_loss=traces[0][0][3],
        final_loss=traces[-1][-1][3],
    )


def synthesize_endless(targets, vgg_w, msoe_w, config):
    """Batch synthesis whose dynamics loss includes the wraparound pair
    (last frame, first frame); the pair average runs over T_out pairs."""
    return synthesize(targets, vgg_w, msoe_w, replace(config, endless=True))


def transfer(appearance_source, dynamics_source, vgg_w, msoe_w, config):
    """Synthesis with appearance Grams from one source (possibly a
    single frame) and the dynamics Gram from another."""
    targets = compute_targets(appearance_source, dynamics_source, vgg_w, msoe_w, config)
    return targets, synthesize(targets, vgg_w, msoe_w, config)


def animate(image, dynamics_source, vgg_w, msoe_w, config):
    """Animate a single still image with the dynamics of a video."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError("animate expects a single (H, W, 3) image")
    return transfer(img, dynamics_source, vgg_w, msoe_w, config)
