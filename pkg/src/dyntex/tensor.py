"""Dense float tensors plus a small reverse-mode graph.

Every operation builds a node that stores its inputs and a closure
computing vector-Jacobian products. The op set is deliberately small:
exactly what the appearance and dynamics streams need. Leaves default
to float32; float64 graphs are supported for gradient verification.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped inputs."""


class GraphError(ValueError):
    """Raised on invalid backward requests (bad seed, leaf not in graph)."""


# Luma weights for RGB -> greyscale (ITU-R BT.601).
GREY_WEIGHTS = (0.299, 0.587, 0.114)

# 5-tap binomial blur used by the spatial pyramid.
BLUR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class Tensor:
    """N-dimensional float array, optionally produced by an op.

    Leaf tensors wrap a plain array. Op outputs additionally carry the
    input nodes and a VJP closure so `backward` can traverse the graph.
    """

    __slots__ = ("data", "inputs", "_vjp", "op")

    def __init__(self, data, inputs=(), vjp=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.inputs = tuple(inputs)
        self._vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"


def _node(data, inputs, vjp, op):
    t = Tensor(np.asarray(data), inputs=inputs, vjp=vjp, op=op)
    return t


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order  # inputs precede consumers


def backward(root, seed, leaves):
    """Reverse-mode sweep from `root`, returning gradients of `leaves`.

    `seed` must match the root's shape. Gradients are accumulated in a
    fixed topological order, so repeated runs are bit-identical. Nodes
    that cannot reach a requested leaf are skipped entirely.
    """
    seed = np.asarray(seed, dtype=root.dtype)
    if seed.shape != root.data.shape:
        raise GraphError(
            f"seed shape {seed.shape} does not match root shape {root.data.shape}"
        )
    order = _toposort(root)
    in_graph = {id(n) for n in order}
    leaf_ids = [id(l) for l in leaves]
    for leaf in leaves:
        if id(leaf) not in in_graph:
            raise GraphError("requested leaf is not part of the graph")

    # A node needs a gradient only if some requested leaf is reachable
    # from it through the input edges.
    needed = {}
    leaf_set = set(leaf_ids)
    for node in order:  # inputs come first
        needed[id(node)] = id(node) in leaf_set or any(
            needed[id(i)] for i in node.inputs
        )

    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        if id(node) not in leaf_set:
            del grads[id(node)]
        mask = tuple(needed[id(i)] for i in node.inputs)
        if not any(mask):
            continue
        input_grads = node._vjp(g, mask)
        for inp, ig, m in zip(node.inputs, input_grads, mask):
            if not m or ig is None:
                continue
            # keep each cotangent in its primal's dtype so a wider loss
            # head does not silently promote the whole sweep
            ig = np.asarray(ig, dtype=inp.dtype)
            acc = grads.get(id(inp))
            grads[id(inp)] = ig if acc is None else acc + ig

    out = []
    for leaf, lid in zip(leaves, leaf_ids):
        g = grads.get(lid)
        out.append(np.zeros_like(leaf.data) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernel, bias):
    """Same-padded 2D cross-correlation over an HWC tensor.

    Kernel layout is (kh, kw, Cin, Cout) with odd spatial extents; zero
    padding keeps the spatial size. Bias is added per output channel.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 3 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects HWC input and 4D kernel, got {xd.shape} / {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {xd.shape[2]}, kernel expects {cin}")
    if bd.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bd.shape} != ({cout},)")

    h, w, _ = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((ph, ph), (pw, pw), (0, 0)))
    kflat = kd.reshape(kh * kw * cin, cout)

    if kh * kw * cin <= 1024:
        win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (h, w, cin, kh, kw)
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, -1)
        out = cols @ kflat
    else:
        out = np.zeros((h * w, cout), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[i : i + h, j : j + w].reshape(h * w, cin) @ kd[i, j]
    out += bd
    out = out.reshape(h, w, cout)

    def vjp(g, mask):
        gm = g.reshape(h * w, cout)
        gx = gk = gb = None
        if mask[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + h, j : j + w] += (gm @ kd[i, j].T).reshape(h, w, cin)
            gx = gxp[ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        if mask[1]:
            gk = np.empty_like(kd)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = xp[i : i + h, j : j + w].reshape(h * w, cin).T @ gm
        if mask[2]:
            gb = gm.sum(axis=0)
        return gx, gk, gb

    return _node(out, (x, kernel, bias), vjp, "conv2d")


def conv_temporal_pair(pair, kernel, bias):
    """Spacetime convolution of a 2-frame greyscale pair.

    The temporal extent is fully consumed: the two frames act as the
    input channels of a spatial same-padded convolution, producing one
    map per filter.
    """
    pd = pair.data
    if pd.ndim != 4 or pd.shape[0] != 2 or pd.shape[3] != 1:
        raise ShapeError(f"conv_temporal_pair expects (2,H,W,1), got {pd.shape}")
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[2] != 2:
        raise ShapeError(f"temporal kernel must have temporal extent 2, got {kd.shape}")
    merged = _pair_to_channels(pair)
    return conv2d(merged, kernel, bias)


def _pair_to_channels(pair):
    pd = pair.data
    out = np.concatenate([pd[0], pd[1]], axis=-1)  # (H, W, 2)

    def vjp(g, mask):
        return (np.stack([g[..., :1], g[..., 1:]], axis=0),)

    return _node(out, (pair,), vjp, "pair_to_channels")


# ---------------------------------------------------------------------------
# pointwise


def square(x):
    xd = x.data

    def vjp(g, mask):
        return (2.0 * xd * g,)

    return _node(xd * xd, (x,), vjp, "square")


def relu(x):
    xd = x.data
    pos = xd > 0

    def vjp(g, mask):
        return (np.where(pos, g, 0),)

    return _node(np.where(pos, xd, 0), (x,), vjp, "relu")


def affine_const(x, scale=1.0, offset=0.0):
    """y = x * scale + offset with constant (non-differentiated) terms."""
    out = x.data * scale + offset

    def vjp(g, mask):
        return (g * scale,)

    return _node(out, (x,), vjp, "affine_const")


def to_grey(frame):
    """Differentiable luma conversion of an (H, W, 3) frame to (H, W, 1)."""
    fd = frame.data
    if fd.ndim != 3 or fd.shape[2] != 3:
        raise ShapeError(f"to_grey expects (H,W,3), got {fd.shape}")
    w = np.asarray(GREY_WEIGHTS, dtype=fd.dtype)
    out = (fd @ w)[..., None]

    def vjp(g, mask):
        return (g * w,)

    return _node(out, (frame,), vjp, "to_grey")


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x, window, stride):
    """Spatial max pooling over HWC input.

    Supported configurations: 5x5 stride 1 (same-zero padding) and
    2x2 stride 2 (no padding, even extents). Backward routes the
    gradient to the first (row-major) argmax of each window.
    """
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"maxpool2d expects HWC input, got {xd.shape}")
    h, w, c = xd.shape
    if window == 5 and stride == 1:
        p = 2
        xp = np.pad(xd, ((p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (5, 5), axis=(0, 1))  # (h, w, c, 5, 5)
        flat = win.reshape(h, w, c, 25)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        hp, wp = h + 2 * p, w + 2 * p

        def vjp(g, mask):
            rows = arg // 5 + np.arange(h).reshape(h, 1, 1)
            cols = arg % 5 + np.arange(w).reshape(1, w, 1)
            idx = (rows * wp + cols) * c + np.arange(c)
            gp = np.bincount(
                idx.ravel(), weights=g.ravel(), minlength=hp * wp * c
            ).astype(g.dtype)
            gp = gp.reshape(hp, wp, c)
            return (gp[p : p + h, p : p + w],)

        return _node(out, (x,), vjp, "maxpool5")
    if window == 2 and stride == 2:
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 stride-2 pooling needs even extents, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        win = xd.reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h2, w2, c, 4)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def vjp(g, mask):
            rows = arg // 2 + 2 * np.arange(h2).reshape(h2, 1, 1)
            cols = arg % 2 + 2 * np.arange(w2).reshape(1, w2, 1)
            idx = (rows * w + cols) * c + np.arange(c)
            gx = np.bincount(
                idx.ravel(), weights=g.ravel(), minlength=h * w * c
            ).astype(g.dtype)
            return (gx.reshape(h, w, c),)

        return _node(out, (x,), vjp, "maxpool2")
    raise ShapeError(f"unsupported pooling: window={window}, stride={stride}")


def avgpool2d_2x2(x):
    """2x2 stride-2 average pooling (VGG average-pool variant)."""
    xd = x.data
    h, w, c = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 stride-2 pooling needs even extents, got {h}x{w}")
    out = xd.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def vjp(g, mask):
        gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * g.dtype.type(0.25)
        return (gx,)

    return _node(out, (x,), vjp, "avgpool2")


# ---------------------------------------------------------------------------
# normalization


def l1_divisive_normalize(x, epsilon=1e-6):
    """Divide each channel by the per-pixel L1 sum across channels."""
    xd = x.data
    s = np.abs(xd).sum(axis=-1, keepdims=True) + epsilon
    out = xd / s

    def vjp(g, mask):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return (g / s - dot / (s * s) * np.sign(xd),)

    return _node(out, (x,), vjp, "l1_divisive_normalize")


def normalize_pair(pair):
    """Standardize a 2-frame pair to joint zero mean and unit variance.

    One mean and one variance over all 2*H*W values; 1e-8 is added
    under the square root so a constant pair maps to zeros.
    """
    pd = pair.data
    if pd.ndim != 4 or pd.shape[0] != 2:
        raise ShapeError(f"normalize_pair expects (2,H,W,1), got {pd.shape}")
    n = pd.size
    mu = pd.mean(dtype=np.float64)
    var = np.square(pd - mu, dtype=np.float64).mean(dtype=np.float64)
    s = np.sqrt(var + 1e-8)
    out = ((pd - mu) / s).astype(pd.dtype)

    def vjp(g, mask):
        gm = g.mean(dtype=np.float64)
        gy = (g * out).mean(dtype=np.float64)
        return (((g - gm - out * gy) / s).astype(pd.dtype),)

    return _node(out, (pair,), vjp, "normalize_pair")


# ---------------------------------------------------------------------------
# resampling


def _resize_axis(x, axis, new):
    """Linear interpolation along one axis with half-pixel centers."""
    xd = x.data
    n = xd.shape[axis]
    src = (np.arange(new) + 0.5) * (n / new) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, n - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n - 1).astype(np.intp)
    w1 = frac.astype(xd.dtype)
    w0 = (1.0 - frac).astype(xd.dtype)
    # dense (new, n) interpolation matrix: two taps per output row, so
    # both directions are plain matrix products
    weight = np.zeros((new, n), dtype=xd.dtype)
    rows = np.arange(new)
    np.add.at(weight, (rows, i0), w0)
    np.add.at(weight, (rows, i1), w1)

    xm = np.moveaxis(xd, axis, 0)
    rest = xm.shape[1:]
    out_m = weight @ np.ascontiguousarray(xm).reshape(n, -1)
    out = np.moveaxis(out_m.reshape((new,) + rest), 0, axis)

    def vjp(g, mask):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, 0)).reshape(new, -1)
        gx = (weight.T @ gm).reshape((n,) + rest)
        return (np.moveaxis(gx, 0, axis),)

    return _node(np.ascontiguousarray(out), (x,), vjp, "resize_axis")


def bilinear_upsample(x, target):
    """Bilinearly upsample an (H, W, C) tensor to `target` = (H', W')."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects HWC input, got {xd.shape}")
    th, tw = target
    h, w, _ = xd.shape
    if th < h or tw < w:
        raise ShapeError(f"cannot downsample {h}x{w} to {th}x{tw}")
    out = x
    if th != h:
        out = _resize_axis(out, 0, th)
    if tw != w:
        out = _resize_axis(out, 1, tw)
    return out


def blur_axis_np(a, axis):
    """Plain-array separable binomial blur along one axis (zero padded)."""
    m = np.moveaxis(a, axis, 0)
    n = m.shape[0]
    pad = np.zeros((n + 4,) + m.shape[1:], dtype=a.dtype)
    pad[2 : 2 + n] = m
    out = np.zeros_like(m)
    for j, wj in enumerate(BLUR_KERNEL):
        out += a.dtype.type(wj) * pad[j : j + n]
    return np.moveaxis(out, 0, axis)


def _pyr_down(x, ax_h, ax_w):
    """Binomial blur over both spatial axes followed by 2x decimation."""
    xd = x.data
    blurred = blur_axis_np(blur_axis_np(xd, ax_h), ax_w)
    sl = [slice(None)] * xd.ndim
    sl[ax_h] = slice(None, None, 2)
    sl[ax_w] = slice(None, None, 2)
    out = blurred[tuple(sl)]

    def vjp(g, mask):
        up = np.zeros_like(xd)
        up[tuple(sl)] = g
        return (blur_axis_np(blur_axis_np(up, ax_h), ax_w),)

    return _node(np.ascontiguousarray(out), (x,), vjp, "pyr_down")


def gaussian_pyramid(x, levels):
    """Spatial pyramid: level 0 is the input, each next level is
    blur-then-decimate. Works on (H, W, C) and on frame pairs
    (2, H, W, 1), where both frames are decimated jointly.
    """
    if levels < 1:
        raise ShapeError("pyramid needs at least one level")
    xd = x.data
    ax_h, ax_w = xd.ndim - 3, xd.ndim - 2
    h, w = xd.shape[ax_h], xd.shape[ax_w]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ShapeError(
            f"pyramid with {levels} levels needs extents divisible by {div}, got {h}x{w}"
        )
    out = [x]
    for _ in range(levels - 1):
        out.append(_pyr_down(out[-1], ax_h, ax_w))
    return out


# ---------------------------------------------------------------------------
# structural


def take_frame(video, t):
    """Select frame t of a (T, ...) tensor; backward scatters into zeros."""
    vd = video.data
    out = vd[t]

    def vjp(g, mask):
        gv = np.zeros_like(vd)
        gv[t] = g
        return (gv,)

    return _node(out, (video,), vjp, "take_frame")


def stack_pair(a, b):
    """Stack two (H, W, 1) frames into a (2, H, W, 1) pair."""
    if a.shape != b.shape:
        raise ShapeError(f"stack_pair shape mismatch: {a.shape} vs {b.shape}")
    out = np.stack([a.data, b.data], axis=0)

    def vjp(g, mask):
        return (g[0] if mask[0] else None, g[1] if mask[1] else None)

    return _node(out, (a, b), vjp, "stack_pair")


def concat_channels(parts):
    """Concatenate HWC tensors along the channel axis."""
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    splits = np.cumsum(widths)[:-1]

    def vjp(g, mask):
        gs = np.split(g, splits, axis=-1)
        return tuple(gi if m else None for gi, m in zip(gs, mask))

    return _node(out, tuple(parts), vjp, "concat_channels")


# ---------------------------------------------------------------------------
# reductions / losses


def tsum(x):
    """Sum of all elements, as a scalar node."""
    out = x.data.sum(dtype=np.float64)

    def vjp(g, mask):
        return (np.full_like(x.data, g),)

    return _node(np.float64(out), (x,), vjp, "sum")


def gram(x, normalizer):
    """Channel Gram matrix of an (..., C) tensor: G = A^T A / normalizer
    with A the (locations x channels) flattening. Exactly symmetric by
    construction (upper triangle mirrored).
    """
    xd = x.data
    c = xd.shape[-1]
    a = xd.reshape(-1, c)
    g = a.T @ a
    g = np.triu(g) + np.triu(g, 1).T
    g /= normalizer

    def vjp(gg, mask):
        da = a @ ((gg + gg.T) / normalizer)
        return (da.reshape(xd.shape).astype(xd.dtype),)

    return _node(g, (x,), vjp, "gram")


def fro_mse(x, target):
    """Squared Frobenius distance to a constant target, in float64."""
    d = x.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
    out = np.float64((d * d).sum())

    def vjp(g, mask):
        return ((2.0 * g * d).astype(x.dtype),)

    return _node(out, (x,), vjp, "fro_mse")


def weighted_sum(terms, weights):
    """Weighted sum of scalar nodes (float64 accumulation)."""
    out = np.float64(sum(float(t.data) * w for t, w in zip(terms, weights)))

    def vjp(g, mask):
        return tuple(
            np.float64(g * w) if m else None for w, m in zip(weights, mask)
        )

    return _node(out, tuple(terms), vjp, "weighted_sum")


def aepe(flow, u, v, valid):
    """Average endpoint error of a predicted (H, W, 2) flow against a
    constant ground-truth (u, v), over the valid-pixel mask."""
    fd = flow.data
    if fd.ndim != 3 or fd.shape[-1] != 2:
        raise ShapeError(f"aepe expects (H,W,2) flow, got {fd.shape}")
    m = np.asarray(valid, dtype=bool)
    if m.shape != fd.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} != flow spatial shape {fd.shape[:2]}")
    count = int(m.sum())
    if count == 0:
        raise ShapeError("aepe mask selects no pixels")
    d = fd - np.asarray([u, v], dtype=fd.dtype)
    e = np.sqrt((d * d).sum(axis=-1) + 1e-8)
    out = np.float64(e[m].sum(dtype=np.float64) / count)

    def vjp(g, mask):
        scale = (m / (e * count)).astype(fd.dtype)
        return ((g * d * scale[..., None]).astype(fd.dtype),)

    return _node(out, (flow,), vjp, "aepe")
