"""Dense numpy kernels with hand-written backward passes.

Every kernel accepts an optional leading batch axis: convolution and pooling
take ``[C, H, W]`` or ``[B, C, H, W]``; ``dense`` takes ``[N]`` or ``[B, N]``.
Backward functions are stateless and receive the forward operands explicitly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError, ShapeError

DEBUG_FINITE = False


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or Inf")
    return arr


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim}-D input (optionally batched), got shape {x.shape}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [B, C, H', W', kH, kW] view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding (no kernel flip)."""
    xb, squeeze = _batched(x, 3)
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be [C_out, C_in, kH, kW], got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernels expect {c_in}")
    if kh > xb.shape[2] + 2 * padding or kw > xb.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xb.shape[2:]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    cols = _windows(_pad(xb, padding), kh, kw, stride)
    out = np.tensordot(cols, kernels, axes=([1, 4, 5], [1, 2, 3]))  # [B, H', W', C_out]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    if DEBUG_FINITE:
        check_finite(out, "conv2d output")
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    stride: int = 1, padding: int = 0, need_input_grad: bool = True):
    """Return ``(grad_input, grad_kernels, grad_bias)`` of :func:`conv2d`.

    ``grad_kernels`` and ``grad_bias`` are summed over the batch axis.
    """
    xb, squeeze = _batched(x, 3)
    gb, _ = _batched(grad_out, 3)
    c_out, c_in, kh, kw = kernels.shape
    xp = _pad(xb, padding)
    cols = _windows(xp, kh, kw, stride)
    if gb.shape[0] != xb.shape[0] or gb.shape[1] != c_out or gb.shape[2:] != cols.shape[2:4]:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output")
    grad_k = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))  # [C_out, C_in, kH, kW]
    grad_b = gb.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_k, grad_b

    h_out, w_out = gb.shape[2:]
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            # [B, H', W', C_in]
            contrib = np.tensordot(gb, kernels[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += contrib.transpose(0, 3, 1, 2)
    gx = gxp[:, :, padding:gxp.shape[2] - padding, padding:gxp.shape[3] - padding] if padding else gxp
    gx = np.ascontiguousarray(gx)
    return (gx[0] if squeeze else gx), grad_k, grad_b


def avgpool2d(x: np.ndarray, k: int) -> np.ndarray:
    xb, squeeze = _batched(x, 3)
    B, C, H, W = xb.shape
    if k < 1 or H % k or W % k:
        raise ShapeError(f"spatial size {H}x{W} is not divisible by pool size {k}")
    out = xb.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    return out[0] if squeeze else out


def avgpool2d_backward(grad_out: np.ndarray, k: int) -> np.ndarray:
    gb, squeeze = _batched(grad_out, 3)
    g = np.repeat(np.repeat(gb, k, axis=2), k, axis=3) / (k * k)
    return g[0] if squeeze else g


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``weights @ x`` (+ bias) for ``x`` of shape ``[N_in]`` or ``[B, N_in]``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"cannot apply weights {weights.shape} to input {x.shape}")
    out = x @ weights.T
    if bias is not None:
        out = out + bias
    return out


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(W^T grad, grad_W, grad_b)``; weight terms are summed over batch."""
    if grad_out.shape[-1] != weights.shape[0]:
        raise ShapeError(f"grad {grad_out.shape} does not match weights {weights.shape}")
    grad_x = grad_out @ weights
    if grad_out.ndim == 1:
        return grad_x, np.outer(grad_out, x), grad_out.copy()
    return grad_x, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0)


def dropout_mask(shape, rate: float, seed, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask with entries in ``{0, 1/(1-rate)}``."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)
