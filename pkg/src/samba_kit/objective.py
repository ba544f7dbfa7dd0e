"""Time-frequency reconstruction loss and the ACMSE metric.

Channels are folded into the batch axis, so (B, C, T) inputs are treated as
B*C independent rows of length T.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # L1 term
    beta: float = 1.0  # spectral term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one loss weight must be positive")


def _check(yhat, y) -> tuple[Tensor, Tensor]:
    yhat, y = tn.as_tensor(yhat), tn.as_tensor(y)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return yhat, y


def l1_loss(yhat, y) -> Tensor:
    yhat, y = _check(yhat, y)
    return tn.mean(tn.tabs(y - yhat))


def spectral_loss(yhat, y) -> Tensor:
    """Sum of squared rFFT coefficient differences divided by rows * T."""
    yhat, y = _check(yhat, y)
    T = y.shape[-1]
    rows = int(np.prod(y.shape[:-1]))
    mag = tn.rfft_mag2_diff(tn.reshape(y, (rows, T)), tn.reshape(yhat, (rows, T)))
    return tn.tsum(mag) * (1.0 / (rows * T))


def tf_loss(yhat, y, weights: LossWeights = LossWeights()) -> Tensor:
    yhat, y = _check(yhat, y)
    terms = []
    if weights.alpha:
        terms.append(l1_loss(yhat, y) * weights.alpha)
    if weights.beta:
        terms.append(spectral_loss(yhat, y) * weights.beta)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def acmse(yhat, y) -> float:
    """Mean over channels of the per-channel MSE across batch and time."""
    yhat = np.asarray(yhat.data if isinstance(yhat, Tensor) else yhat, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    if y.ndim == 2:
        y, yhat = y[None], yhat[None]
    per_channel = np.mean((y - yhat) ** 2, axis=(0, 2))
    return float(per_channel.mean())
