"""Dense float64 array kernels underneath every layer.

All math in this package runs on C-contiguous float64 numpy arrays
(row-major, last index fastest). Single-sample signatures take a
channel-first image (C, H, W); the batched variants used by the layers
prepend a batch axis. Convolution means cross-correlation (no kernel
flip), the convention the rest of the stack assumes.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray


def tensor(data) -> Tensor:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def zeros(shape) -> Tensor:
    return np.zeros(shape, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m, k) and b (k, n)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, pad: int = 0) -> Tensor:
    """Cross-correlate one image x (C, H, W) with kernels (O, C, kh, kw).

    Zero padding of `pad` pixels on each spatial edge; output is
    (O, H + 2*pad - kh + 1, W + 2*pad - kw + 1).
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {x.shape}")
    return conv2d_batch(x[None], kernels, bias, pad)[0]


def conv2d_batch(x: Tensor, kernels: Tensor, bias: Tensor, pad: int = 0) -> Tensor:
    """Batched conv2d: x (B, C, H, W) -> (B, O, H', W')."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d_batch needs x (B,C,H,W) and kernels (O,C,kh,kw), got {x.shape}, {kernels.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernels expect {ck}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias must be ({o},), got {bias.shape}")
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output extent {oh}x{ow} not positive for input {h}x{w}, kernel {kh}x{kw}, pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # Accumulate in (B, oh, ow, O) layout so each tap is one GEMM-like tensordot.
    acc = np.zeros((b, oh, ow, o), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(xp[:, :, i:i + oh, j:j + ow], kernels[:, :, i, j], axes=([1], [1]))
    acc += bias
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_backward_batch(x: Tensor, kernels: Tensor, pad: int, dout: Tensor):
    """Gradients of conv2d_batch: returns (dx, dkernels, dbias).

    dkernels is a correlation of the padded input with dout; dx is the
    transposed correlation routing dout back through every tap.
    """
    b, c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    _, _, oh, ow = dout.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dbias = dout.sum(axis=(0, 2, 3))
    dk = np.empty_like(kernels)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + oh, j:j + ow]
            dk[:, :, i, j] = np.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, i:i + oh, j:j + ow] += np.tensordot(
                dout, kernels[:, :, i, j], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dk, dbias


def maxpool2d(x: Tensor, window: int = 2):
    """Max over disjoint window x window tiles of one image (C, H, W).

    Returns (pooled, idx) where idx holds the row-major position of the
    winner inside each window (0 .. window**2 - 1), as needed to route
    gradients back. Ties go to the first (lowest) position.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d input must be (C, H, W), got {x.shape}")
    out, idx = maxpool2d_batch(x[None], window)
    return out[0], idx[0]


def maxpool2d_batch(x: Tensor, window: int = 2):
    x = np.asarray(x)
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d needs extents divisible by {window}, got {h}x{w}")
    oh, ow = h // window, w // window
    tiles = x.reshape(b, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(b, c, oh, ow, window * window)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward_batch(idx: Tensor, dout: Tensor, window: int, in_shape) -> Tensor:
    """Scatter dout back to the argmax positions recorded by maxpool2d_batch."""
    b, c, h, w = in_shape
    oh, ow = h // window, w // window
    tiles = np.zeros((b, c, oh, ow, window * window), dtype=np.float64)
    np.put_along_axis(tiles, idx[..., None], dout[..., None], axis=-1)
    tiles = tiles.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(tiles.reshape(b, c, h, w))


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x), 0.0)


def relu_backward(upstream: Tensor, x: Tensor) -> Tensor:
    """Pass upstream where x > 0, zero elsewhere (gradient at 0 is 0)."""
    return np.where(np.asarray(x) > 0.0, upstream, 0.0)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max subtracted before exponentiation)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def norm2(t: Tensor) -> float:
    """Euclidean norm of the flattened array."""
    t = np.asarray(t)
    return float(np.sqrt(np.sum(t * t)))


def axpy(alpha: float, x: Tensor, y: Tensor) -> Tensor:
    """alpha * x + y, elementwise."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"axpy shapes differ: {x.shape} vs {y.shape}")
    return alpha * x + y
