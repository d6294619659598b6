"""Dense NHWC float32 kernels, graph execution and tensor file I/O.

Convolutions are cross-correlations with TF-style "same" padding. The
``*_reference`` functions are direct per-output-pixel loops and serve as the
ground truth for the vectorized kernels used by :func:`execute`.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import BinaryIO, Mapping, Optional

import numpy as np

from .graph import BN_EPSILON, ComputeGraph

TENSOR_MAGIC = b"TNSR"

WeightStore = dict  # slot name -> np.ndarray


class ExecutionError(RuntimeError):
    pass


def _same_padding(size: int, kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """Output size and leading pad for "same" padding."""
    out = -(-size // stride)
    extent = (kernel - 1) * dilation + 1
    total = max((out - 1) * stride + extent - size, 0)
    return out, total // 2


def _tap_range(offset: int, stride: int, out: int, size: int) -> tuple[int, int]:
    """Output index range [lo, hi) whose input index offset + stride*o lies in [0, size)."""
    lo = max(0, -(-(-offset) // stride)) if offset < 0 else 0
    hi = min(out, (size - 1 - offset) // stride + 1) if size - 1 - offset >= 0 else 0
    return lo, max(lo, hi)


def _check_kernel(k: np.ndarray):
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k.shape[:2]}")


def _taps(x_shape, k_shape, stride, dilation):
    """Yield (i, j, in_slice_h, in_slice_w, out_slice_h, out_slice_w) for each in-bounds kernel tap."""
    _, H, W, _ = x_shape
    kh, kw = k_shape[:2]
    oh, top = _same_padding(H, kh, stride, dilation)
    ow, left = _same_padding(W, kw, stride, dilation)
    for i in range(kh):
        r0 = i * dilation - top
        ylo, yhi = _tap_range(r0, stride, oh, H)
        if ylo >= yhi:
            continue
        for j in range(kw):
            c0 = j * dilation - left
            xlo, xhi = _tap_range(c0, stride, ow, W)
            if xlo >= xhi:
                continue
            src_h = slice(r0 + stride * ylo, r0 + stride * (yhi - 1) + 1, stride)
            src_w = slice(c0 + stride * xlo, c0 + stride * (xhi - 1) + 1, stride)
            yield i, j, src_h, src_w, slice(ylo, yhi), slice(xlo, xhi)


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, dilation: int = 1,
           bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense convolution. ``x``: (N, H, W, Cin); ``k``: (kh, kw, Cin, Cout)."""
    if x.shape[3] != k.shape[2]:
        raise ValueError(f"channel mismatch: input has {x.shape[3]}, kernel expects {k.shape[2]}")
    _check_kernel(k)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    N, H, W, _ = x.shape
    oh, _ = _same_padding(H, k.shape[0], stride, dilation)
    ow, _ = _same_padding(W, k.shape[1], stride, dilation)
    out = np.zeros((N, oh, ow, k.shape[3]), dtype=np.float32)
    for i, j, sh, sw, oh_s, ow_s in _taps(x.shape, k.shape, stride, dilation):
        out[:, oh_s, ow_s, :] += x[:, sh, sw, :] @ k[i, j]
    if bias is not None:
        out += bias
    return out


def depthwise_conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Per-channel convolution. ``k``: (kh, kw, C, 1)."""
    if k.ndim != 4 or k.shape[2] != x.shape[3] or k.shape[3] != 1:
        raise ValueError(f"channel mismatch: input has {x.shape[3]} channels, kernel shape {k.shape}")
    _check_kernel(k)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    N, H, W, C = x.shape
    oh, _ = _same_padding(H, k.shape[0], stride, dilation)
    ow, _ = _same_padding(W, k.shape[1], stride, dilation)
    out = np.zeros((N, oh, ow, C), dtype=np.float32)
    for i, j, sh, sw, oh_s, ow_s in _taps(x.shape, k.shape, stride, dilation):
        out[:, oh_s, ow_s, :] += x[:, sh, sw, :] * k[i, j, :, 0]
    return out


def max_pool(x: np.ndarray, kernel: int = 3, stride: int = 2) -> np.ndarray:
    N, H, W, C = x.shape
    oh, _ = _same_padding(H, kernel, stride, 1)
    ow, _ = _same_padding(W, kernel, stride, 1)
    out = np.full((N, oh, ow, C), -np.inf, dtype=np.float32)
    for _, _, sh, sw, oh_s, ow_s in _taps(x.shape, (kernel, kernel), stride, 1):
        np.maximum(out[:, oh_s, ow_s, :], x[:, sh, sw, :], out=out[:, oh_s, ow_s, :])
    return out


def batchnorm_inference(x, scale, offset, mean, var, epsilon: float = BN_EPSILON) -> np.ndarray:
    c = x.shape[-1]
    for name, v in (("scale", scale), ("offset", offset), ("mean", mean), ("var", var)):
        if np.shape(v) != (c,):
            raise ValueError(f"batchnorm {name} has shape {np.shape(v)}, expected ({c},)")
    inv = (scale / np.sqrt(var + np.float32(epsilon))).astype(np.float32)
    return ((x - mean) * inv + offset).astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0))


def resize_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"resize factor must be a positive integer, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def _bilinear_axis(in_size: int, out_size: int):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = (src - i0).astype(np.float32)
    return i0, i1, w1


def resize_bilinear(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"invalid target size {target_hw}")
    i0, i1, wy = _bilinear_axis(x.shape[1], th)
    y = x[:, i0] * (1 - wy)[None, :, None, None] + x[:, i1] * wy[None, :, None, None]
    j0, j1, wx = _bilinear_axis(x.shape[2], tw)
    y = y[:, :, j0] * (1 - wx)[None, None, :, None] + y[:, :, j1] * wx[None, None, :, None]
    return y.astype(np.float32)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(np.float32)


# -- reference loops -------------------------------------------------------------


def conv2d_reference(x, k, stride=1, dilation=1, bias=None) -> np.ndarray:
    N, H, W, C = x.shape
    kh, kw, ci, co = k.shape
    if C != ci:
        raise ValueError("channel mismatch")
    oh, top = _same_padding(H, kh, stride, dilation)
    ow, left = _same_padding(W, kw, stride, dilation)
    out = np.zeros((N, oh, ow, co), dtype=np.float64)
    for n in range(N):
        for oy in range(oh):
            for ox in range(ow):
                acc = np.zeros(co)
                for i in range(kh):
                    iy = oy * stride + i * dilation - top
                    if not 0 <= iy < H:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j * dilation - left
                        if not 0 <= ix < W:
                            continue
                        for c in range(C):
                            acc += float(x[n, iy, ix, c]) * k[i, j, c].astype(np.float64)
                out[n, oy, ox] = acc
    if bias is not None:
        out += bias
    return out.astype(np.float32)


def depthwise_conv2d_reference(x, k, stride=1, dilation=1) -> np.ndarray:
    N, H, W, C = x.shape
    kh, kw = k.shape[:2]
    oh, top = _same_padding(H, kh, stride, dilation)
    ow, left = _same_padding(W, kw, stride, dilation)
    out = np.zeros((N, oh, ow, C), dtype=np.float64)
    for n in range(N):
        for oy in range(oh):
            for ox in range(ow):
                for c in range(C):
                    acc = 0.0
                    for i in range(kh):
                        iy = oy * stride + i * dilation - top
                        for j in range(kw):
                            ix = ox * stride + j * dilation - left
                            if 0 <= iy < H and 0 <= ix < W:
                                acc += float(x[n, iy, ix, c]) * float(k[i, j, c, 0])
                    out[n, oy, ox, c] = acc
    return out.astype(np.float32)


# -- execution ---------------------------------------------------------------------


def init_random_weights(graph: ComputeGraph, seed: int = 0) -> WeightStore:
    """Fan-in scaled uniform kernels; batch norm as identity (scale 1, var 1)."""
    store: WeightStore = {}
    for name, shape in sorted(graph.weight_slots.items()):
        kind = name.rsplit("/", 1)[1]
        if kind == "kernel":
            fan_in = shape[0] * shape[1] * shape[2] if shape[3] != 1 else shape[0] * shape[1]
            bound = math.sqrt(6.0 / fan_in)
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            store[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind in ("scale", "var"):
            store[name] = np.ones(shape, dtype=np.float32)
        else:  # offset, mean, bias
            store[name] = np.zeros(shape, dtype=np.float32)
    return store


def check_weights(graph: ComputeGraph, weights: Mapping[str, np.ndarray]) -> None:
    for name, shape in graph.weight_slots.items():
        if name not in weights:
            raise ExecutionError(f"missing weight slot {name!r}")
        if tuple(weights[name].shape) != tuple(shape):
            raise ExecutionError(f"weight slot {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")


def _run_node(node, args, weights):
    a = node.attrs
    w = [weights[s] for s in node.weights]
    op = node.op
    if op == "conv2d":
        return conv2d(args[0], w[0], a["stride"], a["dilation"], w[1] if a.get("bias") else None)
    if op == "depthwise_conv2d":
        return depthwise_conv2d(args[0], w[0], a["stride"], a["dilation"])
    if op == "batchnorm":
        return batchnorm_inference(args[0], *w, epsilon=a.get("epsilon", BN_EPSILON))
    if op == "activation":
        return relu(args[0])
    if op == "max_pool":
        return max_pool(args[0], a["kernel"], a["stride"])
    if op == "resize_nearest":
        return resize_nearest(args[0], a["factor"])
    if op == "resize_bilinear":
        return resize_bilinear(args[0], a["target"])
    if op == "global_avg_pool":
        return global_avg_pool(args[0])
    if op == "add":
        return args[0] + args[1]
    if op == "concat":
        return np.concatenate(args, axis=3)
    raise ExecutionError(f"node {node.id}: unsupported op {op!r}")


def _execute_one(graph: ComputeGraph, x: np.ndarray, weights) -> np.ndarray:
    remaining = {n.id: 0 for n in graph.nodes}
    for n in graph.nodes:
        for i in n.inputs:
            remaining[i] += 1
    values: dict[int, np.ndarray] = {}
    for n in graph.nodes:
        if n.op == "input":
            values[n.id] = x
            continue
        try:
            y = _run_node(n, [values[i] for i in n.inputs], weights)
        except ValueError as exc:
            raise ExecutionError(f"node {n.id} ({n.name}): {exc}") from None
        if y.shape[1:] != n.shape:
            raise ExecutionError(f"node {n.id} ({n.name}): produced shape {y.shape[1:]}, expected {n.shape}")
        values[n.id] = y
        for i in n.inputs:
            remaining[i] -= 1
            if remaining[i] == 0:
                del values[i]
    return values[graph.output_node]


def execute(graph: ComputeGraph, x: np.ndarray, weights: Mapping[str, np.ndarray], workers: int = 1) -> np.ndarray:
    """Run ``graph`` forward on the NHWC batch ``x``.

    Samples are evaluated independently, so the result is bitwise identical
    for any ``workers`` value.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ExecutionError(f"input shape {x.shape} does not match graph input (N, {', '.join(map(str, graph.input_shape))})")
    check_weights(graph, weights)
    x = x.astype(np.float32, copy=False)
    samples = [x[i:i + 1] for i in range(x.shape[0])]
    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda s: _execute_one(graph, s, weights), samples))
    else:
        outs = [_execute_one(graph, s, weights) for s in samples]
    return np.concatenate(outs, axis=0)


# -- file formats ------------------------------------------------------------------


def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = np.ascontiguousarray(t, dtype="<f4")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
    f.write(t.tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    raw = f.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ValueError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    count = math.prod(dims)
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise ValueError(f"truncated tensor data: expected {count} floats")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def save_weights(path, weights: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor(f, weights[name])


def load_weights(path) -> WeightStore:
    store: WeightStore = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (length,) = struct.unpack("<I", f.read(4))
            name = f.read(length).decode("utf-8")
            store[name] = read_tensor(f)
    return store
