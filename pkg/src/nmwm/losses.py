"""Training objectives: BCE message loss, spectral MSE, and their combination.

The combined objective mixes a distortion term (NMR, or MSE as a baseline)
with the message BCE through a transparency weight alpha in [0, 1]:
alpha = 0 cares only about extraction, alpha = 1 only about transparency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import psycho
from .psycho import EarModelTables

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def _check_lengths(predicted, target):
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"message length mismatch: {p.size} vs {t.size}")
    return p, t


def bce(predicted, target) -> float:
    """Mean binary cross-entropy, probabilities clipped to [eps, 1-eps]."""
    p, t = _check_lengths(predicted, target)
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def bce_gradient(predicted, target) -> np.ndarray:
    """d bce / d predicted; zero where the clip is active."""
    p, t = _check_lengths(predicted, target)
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    g = (-t / pc + (1.0 - t) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def mse_spec(host, marked) -> float:
    """Mean squared difference over all real spectrogram entries."""
    h = np.asarray(host, dtype=np.float64)
    m = np.asarray(marked, dtype=np.float64)
    if h.shape != m.shape:
        raise ValueError("spectrogram shape mismatch")
    return float(np.mean((h - m) ** 2))


def mse_spec_gradient(host, marked) -> np.ndarray:
    """d mse_spec / d marked."""
    h = np.asarray(host, dtype=np.float64)
    m = np.asarray(marked, dtype=np.float64)
    if h.shape != m.shape:
        raise ValueError("spectrogram shape mismatch")
    return 2.0 * (m - h) / h.size


def combined_loss(host, marked, predicted, target, weights: LossWeights,
                  mode: str, tables: EarModelTables | None = None,
                  masking: np.ndarray | None = None):
    """alpha * distortion + (1 - alpha) * bce, with both gradients.

    Returns (value, gradient w.r.t. marked spectrogram, gradient w.r.t.
    predicted probabilities). ``mode`` selects "nmr" or "mse" for the
    distortion term; precomputed host masking patterns may be supplied to
    avoid recomputation.
    """
    if mode not in ("nmr", "mse"):
        raise ValueError(f"unknown distortion mode {mode!r}")
    alpha = weights.alpha
    h = np.asarray(host, dtype=np.float64)
    m = np.asarray(marked, dtype=np.float64)

    if alpha > 0.0:
        if mode == "nmr":
            if tables is None:
                raise ValueError("nmr mode requires ear-model tables")
            if masking is None:
                masking = psycho.masking_patterns(h, tables)
            distortion = psycho.nmr(h, m, tables, masking=masking)
            grad_marked = alpha * psycho.nmr_gradient(h, m, tables, masking=masking)
        else:
            distortion = mse_spec(h, m)
            grad_marked = alpha * mse_spec_gradient(h, m)
    else:
        distortion = 0.0
        grad_marked = np.zeros_like(m)

    msg_loss = bce(predicted, target)
    if alpha < 1.0:
        grad_predicted = (1.0 - alpha) * bce_gradient(predicted, target)
    else:
        grad_predicted = np.zeros(np.asarray(predicted).size)

    value = alpha * distortion + (1.0 - alpha) * msg_loss
    return value, grad_marked, grad_predicted
