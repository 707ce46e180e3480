"""Dense float64 kernels: matrix product, valid-padding 2D convolution, ReLU.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Convolutions accept a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, stride: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (K,C,kh,kw), got {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    _, c, h, w = x.shape
    _, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} channels, input has {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of shape ``(N*Ho*Wo, C*kh*kw)`` for a batch ``(N, C, H, W)``."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input grid."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride)
    wo = conv_output_size(w, kw, stride)
    patches = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(x_shape)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hspan:stride, j:j + wspan:stride] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Cross-correlation with valid padding.

    Output spatial size is ``(H - kh) // stride + 1`` in each dimension.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv(x, kernel, stride)
    n, _, h, w = x.shape
    k, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride)
    wo = conv_output_size(w, kw, stride)
    out = im2col(x, kh, kw, stride) @ kernel.reshape(k, -1).T
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (k,):
            raise DimensionError(f"bias shape {bias.shape} does not match {k} filters")
        out = out + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                    need_input_grad: bool = True):
    """Gradients of a conv2d output w.r.t. input, kernel and bias.

    ``dout`` and ``x`` must be batched. Returns ``(dx, dkernel, dbias)``;
    ``dx`` is None when ``need_input_grad`` is false.
    """
    n = x.shape[0]
    k, c, kh, kw = kernel.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    cols = im2col(x, kh, kw, stride)
    dkernel = (dmat.T @ cols).reshape(kernel.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        dx = col2im(dmat @ kernel.reshape(k, -1), x.shape, kh, kw, stride)
    return dx, dkernel, dbias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad_mask(x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return (np.asarray(x) > 0).astype(np.float64)
