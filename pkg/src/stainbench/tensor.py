"""Rank-4 tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays of shape (n, c, h, w). Training and inference
run in float32; float64 is used for gradient checking. Every kernel returns a
fresh array and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a kernel needs.

    ``dim`` names the offending dimension so callers can report it.
    """

    def __init__(self, message: str, dim: str | None = None, expected=None, got=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.got = got


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as an (n, c, h, w) tensor and return it as an array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got rank {arr.ndim}",
                         dim="rank", expected=4, got=arr.ndim)
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}", dim="shape", got=arr.shape)
    return arr


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return x


@dataclass
class ConvParams:
    """Weights and geometry of a convolution layer.

    For ordinary convolutions ``weight`` is (out_ch, in_ch, kh, kw). For the
    2x2 transposed convolution it is (in_ch, out_ch, 2, 2), which makes
    ``conv2d_forward(y, ConvParams(weight, ..., stride=2))`` its adjoint.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError("conv weight must be rank 4", dim="weight", got=self.weight.shape)
        if self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError("only square kernels are supported", dim="kernel", got=self.weight.shape[2:])
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride/padding {self.stride}/{self.padding}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def _out_size(size: int, k: int, stride: int, padding: int, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{dim}={size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give a positive integer output size",
            dim=dim, got=size)
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (n, c, k*k, ho, wo); column index is c*k*k + i*k + j, matching weight.reshape(o, -1)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d_forward(x, p: ConvParams) -> np.ndarray:
    """Cross-correlation of ``x`` with ``p.weight`` plus bias (im2col + GEMM)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    o, ci, k, _ = p.weight.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}", dim="c", expected=ci, got=c)
    ho = _out_size(h, k, p.stride, p.padding, "h")
    wo = _out_size(w, k, p.stride, p.padding, "w")
    if k == 1 and p.stride == 1 and p.padding == 0:
        out = np.matmul(p.weight.reshape(o, c), x.reshape(n, c, h * w))
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p.padding,) * 2, (p.padding,) * 2)) if p.padding else x
        cols = _im2col(xp, k, p.stride, ho, wo).reshape(n, c * k * k, ho * wo)
        out = np.matmul(p.weight.reshape(o, -1), cols)
    out = out.reshape(n, o, ho, wo)
    out += p.bias.reshape(1, o, 1, 1)
    return _check_finite(out, "conv2d_forward")


def conv2d_backward(grad_out, cached_input, p: ConvParams):
    """Return (grad_input, grad_weight, grad_bias) for ``conv2d_forward``."""
    x = as_tensor(cached_input)
    g = as_tensor(grad_out)
    n, c, h, w = x.shape
    o, _, k, _ = p.weight.shape
    ho = _out_size(h, k, p.stride, p.padding, "h")
    wo = _out_size(w, k, p.stride, p.padding, "w")
    if g.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {g.shape} does not match forward output {(n, o, ho, wo)}",
                         dim="grad_out", expected=(n, o, ho, wo), got=g.shape)
    gm = g.reshape(n, o, ho * wo)
    grad_b = g.sum(axis=(0, 2, 3))
    wm = p.weight.reshape(o, -1)
    if k == 1 and p.stride == 1 and p.padding == 0:
        xm = x.reshape(n, c, h * w)
        grad_w = np.einsum("nop,ncp->oc", gm, xm).reshape(p.weight.shape)
        grad_x = np.matmul(wm.T, gm).reshape(x.shape)
        return grad_x, grad_w, grad_b
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad,) * 2, (pad,) * 2)) if pad else x
    cols = _im2col(xp, k, p.stride, ho, wo).reshape(n, c * k * k, ho * wo)
    grad_w = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
    gcols = np.matmul(wm.T, gm).reshape(n, c, k * k, ho, wo)
    gxp = np.zeros(xp.shape, dtype=np.result_type(g, p.weight))
    s = p.stride
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i * k + j]
    grad_x = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d_forward_direct(x, p: ConvParams) -> np.ndarray:
    """Loop-over-kernel-taps convolution; same contract as ``conv2d_forward``.

    Kept for performance comparison against the im2col path.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    o, ci, k, _ = p.weight.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}", dim="c", expected=ci, got=c)
    ho = _out_size(h, k, p.stride, p.padding, "h")
    wo = _out_size(w, k, p.stride, p.padding, "w")
    pad, s = p.padding, p.stride
    xp = np.pad(x, ((0, 0), (0, 0), (pad,) * 2, (pad,) * 2)) if pad else x
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, p.weight))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            out += np.einsum("oc,nchw->nohw", p.weight[:, :, i, j], patch)
    out += p.bias.reshape(1, o, 1, 1)
    return _check_finite(out, "conv2d_forward_direct")


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling.

    Returns (output, mask) where ``mask`` holds the row-major index (0..3)
    of the winning element in each window; ties go to the first position.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}; pad the input first",
                         dim="h" if h % 2 else "w", got=(h, w))
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    mask = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, mask[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, mask


def maxpool2x2_backward(grad_out, mask) -> np.ndarray:
    g = as_tensor(grad_out)
    if g.shape != mask.shape:
        raise ShapeError(f"grad_out shape {g.shape} does not match pooling mask {mask.shape}",
                         dim="grad_out", expected=mask.shape, got=g.shape)
    n, c, h2, w2 = g.shape
    onehot = mask[..., None] == np.arange(4, dtype=np.int8)
    win = np.where(onehot, g[..., None], np.zeros((), dtype=g.dtype))
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def _check_upconv(x: np.ndarray, p: ConvParams):
    n, c, h, w = x.shape
    ci, o, k, _ = p.weight.shape
    if k != 2:
        raise ShapeError(f"up-convolution needs a 2x2 kernel, got {k}x{k}", dim="kernel", got=k)
    if c != ci:
        raise ShapeError(f"input has {c} channels, up-convolution expects {ci}", dim="c", expected=ci, got=c)
    if c % 2 or o != c // 2:
        raise ShapeError(f"up-convolution must halve an even channel count, got {c}->{o}",
                         dim="c", expected=c // 2, got=o)
    return n, c, h, w, o


def upconv2x2_forward(x, p: ConvParams) -> np.ndarray:
    """2x2 stride-2 transposed convolution that halves the channel count."""
    x = as_tensor(x)
    n, c, h, w, o = _check_upconv(x, p)
    y = np.matmul(p.weight.reshape(c, o * 4).T, x.reshape(n, c, h * w))
    y = y.reshape(n, o, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * w)
    y += p.bias.reshape(1, o, 1, 1)
    return _check_finite(y, "upconv2x2_forward")


def upconv2x2_backward(grad_out, cached_input, p: ConvParams):
    x = as_tensor(cached_input)
    g = as_tensor(grad_out)
    n, c, h, w, o = _check_upconv(x, p)
    if g.shape != (n, o, 2 * h, 2 * w):
        raise ShapeError(f"grad_out shape {g.shape} does not match forward output {(n, o, 2 * h, 2 * w)}",
                         dim="grad_out", expected=(n, o, 2 * h, 2 * w), got=g.shape)
    gm = g.reshape(n, o, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * w)
    wm = p.weight.reshape(c, o * 4)
    grad_x = np.matmul(wm, gm).reshape(x.shape)
    grad_w = np.matmul(x.reshape(n, c, h * w), gm.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
    grad_b = g.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def concat_channels(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    for i, name in ((0, "n"), (2, "h"), (3, "w")):
        if a.shape[i] != b.shape[i]:
            raise ShapeError(f"cannot concatenate: {name} differs ({a.shape[i]} vs {b.shape[i]})",
                             dim=name, expected=a.shape[i], got=b.shape[i])
    return np.concatenate([a, b], axis=1)


def split_channels(x, at: int):
    """Inverse of ``concat_channels``; also its backward pass."""
    x = as_tensor(x)
    return x[:, :at].copy(), x[:, at:].copy()


def relu_forward(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0, dtype=x.dtype) if x.dtype.kind == "f" else np.maximum(x, 0)


def relu_backward(grad_out, cached_input) -> np.ndarray:
    """Gradient of ReLU; the subgradient at exactly 0 is taken as 0."""
    g = np.asarray(grad_out)
    return np.where(np.asarray(cached_input) > 0, g, np.zeros((), dtype=g.dtype))
