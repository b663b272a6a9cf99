"""Dense numerics used by every layer above: convolution, gate nonlinearities,
Adam and a central-difference gradient checker.

Tensors are plain ``numpy.ndarray`` values. Operations never mutate their
arguments. Convolutions accept either a single ``C x H x W`` tensor or a
batch ``N x C x H x W``; the batch axis is carried through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h - k + 1 + 2 * pad, w - k + 1 + 2 * pad
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} with pad {pad} does not fit a {h}x{w} input")
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernels`` (no kernel flip) and add a per-channel bias.

    Output spatial size is ``H - K + 1 + 2*pad``.
    """
    xb, squeeze = _as_batch(np.asarray(x))
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be O x C x K x K, got {kernels.shape}")
    o, c, k, _ = kernels.shape
    if xb.shape[1] != c:
        raise DimensionError(f"input has {xb.shape[1]} channels but kernels expect {c}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} output channels")
    n = xb.shape[0]
    cols, ho, wo = _im2col(xb, k, pad)
    out = cols @ kernels.reshape(o, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, pad: int = 0,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d` with respect to input, kernels and bias."""
    gb, squeeze = _as_batch(np.asarray(grad_out))
    xb, _ = _as_batch(np.asarray(x))
    o, c, k, _ = kernels.shape
    n, _, ho, wo = gb.shape
    cols, _, _ = _im2col(xb, k, pad)
    g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    d_kernels = (g2.T @ cols).reshape(kernels.shape)
    d_bias = gb.sum(axis=(0, 2, 3))
    d_x = None
    if need_input_grad:
        flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        back_pad = k - 1 - pad
        if back_pad >= 0:
            d_x = conv2d(gb, flipped, None, back_pad)
        else:
            h, w = xb.shape[2:]
            d_x = conv2d(gb, flipped, None, k - 1)[:, :, pad:pad + h, pad:pad + w]
        if squeeze:
            d_x = d_x[0]
    return d_x, d_kernels, d_bias


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form keeps sigmoid(x) + sigmoid(-x) == 1 to rounding and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"hadamard needs identical shapes, got {np.shape(a)} and {np.shape(b)}")
    return np.multiply(a, b)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              name: str = "param") -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns the new parameter and state."""
    if not (param.shape == grad.shape == state.first_moment.shape == state.second_moment.shape):
        raise DimensionError(
            f"{name}: shapes differ (param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape})")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * (m_hat / (np.sqrt(v_hat) + eps))
    return new_param.astype(param.dtype, copy=False), AdamState(
        m.astype(param.dtype, copy=False), v.astype(param.dtype, copy=False), t)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale every gradient by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads.values())
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
