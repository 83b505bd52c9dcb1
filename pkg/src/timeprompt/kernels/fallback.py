"""Pure-NumPy implementations of the hot kernels.

Same signatures and the same accumulation semantics as the compiled
backend in ``_ckernels``; used when the extension is unavailable or when
forced via ``TIMEPROMPT_KERNELS=python``. All arrays are float64 and
C-contiguous; row-wise kernels treat input as (rows, cols).
"""

from __future__ import annotations

import numpy as np

NAME = "python"

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU, elementwise."""
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """d/dx of tanh-approximation GELU, times upstream gy."""
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_rows_fwd(x: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """Row-wise stable softmax on (R, C); entries with keep==0 get exactly 0."""
    if keep is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        keep_b = keep.astype(bool)
        masked = np.where(keep_b, x, -np.inf)
        m = masked.max(axis=1, keepdims=True)
        e = np.where(keep_b, np.exp(x - m), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Row-wise softmax backward: y * (gy - sum(y * gy))."""
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_rows_fwd(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise layer norm on (R, C); returns (y, mean (R,), rstd (R,))."""
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layernorm_rows_bwd(
    gy: np.ndarray,
    x: np.ndarray,
    gamma: np.ndarray,
    mean: np.ndarray,
    rstd: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise layer norm backward; returns (gx, dgamma, dbeta)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, dgamma, dbeta


def adam_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step: int,
) -> None:
    """In-place bias-corrected Adam update on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
