"""Frame-sequence and weight-file I/O.

Frames live in a directory of numbered PNGs (frame_0000.png, ...);
raw PPM is accepted as an input fallback. Weights use a little-endian
binary format: magic "DTWB", version, stream kind (1 = VGG, 2 = MSOE),
header flags (bit 0: VGG average pooling), then named float32 tensors.
"""

from __future__ import annotations

import io
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .msoe import MSOE_SHAPES, MsoeWeights
from .vgg import VGG_CONV_NAMES, VggWeights, conv_shape_table

MAGIC = b"DTWB"
FORMAT_VERSION = 1
KIND_VGG = 1
KIND_MSOE = 2
FLAG_AVG_POOL = 1

_FRAME_RE = re.compile(r"frame_(\d{4})\.(png|ppm)$")


class MediaError(ValueError):
    """Raised on malformed frame sequences or weight files."""


# ---------------------------------------------------------------------------
# frame sequences


def load_frames(path):
    """Load a numbered frame directory into a float32 (T, H, W, 3) volume.

    Numbering must be contiguous from 0 and all frames the same size;
    violations are reported with the offending filename.
    """
    d = Path(path)
    if not d.is_dir():
        raise MediaError(f"not a frame directory: {d}")
    found = {}
    for f in d.iterdir():
        m = _FRAME_RE.match(f.name)
        if m:
            found[int(m.group(1))] = f
    if not found:
        raise MediaError(f"no frame_NNNN.png files in {d}")
    frames = []
    for t in range(len(found)):
        if t not in found:
            raise MediaError(f"missing frame frame_{t:04d} in {d}")
        try:
            img = Image.open(found[t]).convert("RGB")
        except Exception as exc:
            raise MediaError(f"unreadable frame {found[t].name}: {exc}") from exc
        arr = np.asarray(img, dtype=np.float32)
        if frames and arr.shape != frames[0].shape:
            raise MediaError(
                f"frame {found[t].name} has size {arr.shape[:2]}, "
                f"expected {frames[0].shape[:2]}"
            )
        frames.append(arr)
    return np.stack(frames, axis=0)


def load_image(path):
    """Load a single image as a float32 (H, W, 3) frame."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32)


def quantize_frame(frame):
    """Clamp to [0, 255] and round half up to 8 bits."""
    return np.floor(np.clip(frame, 0.0, 255.0) + 0.5).clip(0, 255).astype(np.uint8)


def save_frames(volume, path):
    """Write a (T, H, W, 3) float volume as numbered 8-bit PNGs."""
    vol = np.asarray(volume)
    if vol.ndim != 4 or vol.shape[-1] != 3:
        raise MediaError(f"expected (T,H,W,3) volume, got shape {vol.shape}")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(vol.shape[0]):
        Image.fromarray(quantize_frame(vol[t])).save(d / f"frame_{t:04d}.png")


# ---------------------------------------------------------------------------
# weight files


def _write_tensor(buf, name, arr):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def serialize_weights(weights):
    """Serialize VggWeights or MsoeWeights to the weight-file bytes."""
    buf = io.BytesIO()
    if isinstance(weights, VggWeights):
        kind = KIND_VGG
        flags = FLAG_AVG_POOL if weights.avg_pool else 0
        tensors = {"mean": weights.means}
        for name in VGG_CONV_NAMES:
            tensors[f"{name}.kernel"] = weights.kernels[name]
            tensors[f"{name}.bias"] = weights.biases[name]
    elif isinstance(weights, MsoeWeights):
        kind = KIND_MSOE
        flags = 0
        tensors = dict(weights.named_tensors())
        tensors["epsilon"] = np.array([weights.epsilon], dtype=np.float32)
        tensors["levels"] = np.array([weights.levels], dtype=np.float32)
    else:
        raise MediaError(f"cannot serialize {type(weights).__name__}")
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, kind, flags, len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_weights(weights, path):
    Path(path).write_bytes(serialize_weights(weights))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise MediaError(
                f"truncated weight file: needed {n} bytes for {what} at offset {self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def parse_weight_bytes(data):
    """Parse weight-file bytes into (kind, flags, ordered name->array)."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise MediaError("bad magic at offset 0 (not a DTWB weight file)")
    version, kind, flags, count = struct.unpack("<IIII", r.take(16, "header"))
    if version != FORMAT_VERSION:
        raise MediaError(f"unsupported format version {version} at offset 4")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        if name in tensors:
            raise MediaError(f"duplicate tensor name {name!r} at offset {r.pos}")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(data):
        raise MediaError(f"trailing bytes at offset {r.pos}")
    return kind, flags, tensors


def load_weights(path):
    """Load and validate a weight file; returns VggWeights or MsoeWeights."""
    kind, flags, tensors = parse_weight_bytes(Path(path).read_bytes())
    if kind == KIND_VGG:
        table = conv_shape_table()
        kernels, biases = {}, {}
        for name, (kshape, bshape) in table.items():
            kkey, bkey = f"{name}.kernel", f"{name}.bias"
            if kkey not in tensors or bkey not in tensors:
                raise MediaError(f"VGG weight file missing layer {name}")
            if tensors[kkey].shape != kshape:
                raise MediaError(
                    f"VGG layer {name}: kernel shape {tensors[kkey].shape} != {kshape}"
                )
            kernels[name] = tensors[kkey]
            biases[name] = tensors[bkey]
        if "mean" not in tensors or tensors["mean"].shape != (3,):
            raise MediaError("VGG weight file missing 3-entry channel mean")
        return VggWeights(
            kernels=kernels,
            biases=biases,
            means=tensors["mean"],
            avg_pool=bool(flags & FLAG_AVG_POOL),
        )
    if kind == KIND_MSOE:
        named = {}
        for name, shape in MSOE_SHAPES.items():
            if name not in tensors:
                raise MediaError(f"MSOE weight file missing tensor {name}")
            if tensors[name].shape != shape:
                raise MediaError(
                    f"MSOE tensor {name}: shape {tensors[name].shape} != {shape}"
                )
            named[name] = tensors[name]
        epsilon = float(tensors.get("epsilon", np.array([1e-6]))[0])
        levels = int(tensors.get("levels", np.array([5.0]))[0])
        return MsoeWeights.from_named(named, epsilon=epsilon, levels=levels)
    raise MediaError(f"unknown stream kind {kind} at offset 8")
