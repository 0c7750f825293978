"""Temperature softmax, cross-entropy, KL divergence, and the combined
backbone self-distillation objective with analytic gradients.

All losses reduce with a batch mean so the distillation weight is
scale-free across batch sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12  # floor inside logs; softmax outputs can underflow to 0

DISTILL_SOFTMAX_KL = "softmax_kl"
DISTILL_MSE = "mse"
KL_FORWARD = "forward"   # D(teacher || student)
KL_REVERSE = "reverse"   # D(student || teacher)


@dataclass
class LossValue:
    total: float
    ce_part: float
    distill_part: float


def softmax_tau(logits: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax of logits/tau, stabilized by max subtraction."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"softmax_tau expects a 2-D array, got ndim={z.ndim}")
    shifted = (z - z.max(axis=1, keepdims=True)) / tau
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient (softmax - onehot)/batch."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    batch, m = z.shape
    if y.shape != (batch,):
        raise ValueError(f"labels shape {y.shape} does not match batch {batch}")
    if y.min() < 0 or y.max() >= m:
        raise ValueError(f"label out of range [0, {m}): {int(y.min())}..{int(y.max())}")
    probs = softmax_tau(z, 1.0)
    rows = np.arange(batch)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], PROB_FLOOR))))
    grad = probs.copy()
    grad[rows, y] -= 1.0
    return loss, grad / batch


def kl_divergence(p_teacher: np.ndarray, p_student: np.ndarray,
                  direction: str = KL_FORWARD) -> float:
    """Batch-mean KL divergence between row distributions.

    Forward direction is D(teacher || student): zero-probability teacher
    entries contribute nothing and student probabilities are floored
    inside the log.
    """
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise ValueError(f"shape mismatch: {p_t.shape} vs {p_s.shape}")
    if direction == KL_REVERSE:
        p_t, p_s = p_s, p_t
    ratio = np.log(np.maximum(p_t, PROB_FLOOR)) - np.log(np.maximum(p_s, PROB_FLOOR))
    terms = np.where(p_t > 0.0, p_t * ratio, 0.0)
    return float(terms.sum(axis=1).mean())


def _kl_grad_wrt_student_logits(p_t: np.ndarray, p_s: np.ndarray, tau: float,
                                direction: str) -> np.ndarray:
    """d/d(student logits) of the batch-mean KL at temperature tau."""
    batch = p_t.shape[0]
    if direction == KL_FORWARD:
        return (p_s - p_t) / (tau * batch)
    # reverse: d KL(p_s || p_t) / dz_j = p_s_j * (log(p_s_j/p_t_j) - KL_row) / tau
    log_ratio = np.log(np.maximum(p_s, PROB_FLOOR)) - np.log(np.maximum(p_t, PROB_FLOOR))
    row_kl = (np.where(p_s > 0.0, p_s * log_ratio, 0.0)).sum(axis=1, keepdims=True)
    return p_s * (log_ratio - row_kl) / (tau * batch)


def bsd_loss(global_features: np.ndarray, local_features: np.ndarray,
             logits: np.ndarray, labels: np.ndarray, tau: float, lam: float,
             mode: str = DISTILL_SOFTMAX_KL, kl_direction: str = KL_FORWARD,
             tau2_rescale: bool = False) -> tuple[LossValue, np.ndarray, np.ndarray]:
    """Combined objective: cross-entropy plus lam * feature distillation.

    The teacher (global) features are constants: no gradient is returned
    for them.  Returns (loss, dLoss/dLocalFeatures, dLoss/dLogits); the
    feature gradient carries only the distillation term (scaled by lam)
    and the logit gradient carries only the cross-entropy term.
    """
    g = np.asarray(global_features, dtype=np.float64)
    s = np.asarray(local_features, dtype=np.float64)
    if g.shape != s.shape:
        raise ValueError(f"feature shape mismatch: {g.shape} vs {s.shape}")
    if lam < 0:
        raise ValueError(f"distillation weight must be >= 0, got {lam}")
    if mode not in (DISTILL_SOFTMAX_KL, DISTILL_MSE):
        raise ValueError(f"unknown distillation mode: {mode!r}")
    if kl_direction not in (KL_FORWARD, KL_REVERSE):
        raise ValueError(f"unknown KL direction: {kl_direction!r}")

    batch = g.shape[0]
    ce, d_logits = cross_entropy(logits, labels)

    if mode == DISTILL_MSE:
        diff = s - g
        distill = float(0.5 * (diff * diff).sum(axis=1).mean())
        d_local = lam * diff / batch
    else:
        p_g = softmax_tau(g, tau)
        p_b = softmax_tau(s, tau)
        distill = kl_divergence(p_g, p_b, direction=kl_direction)
        d_local = lam * _kl_grad_wrt_student_logits(p_g, p_b, tau, kl_direction)
        if tau2_rescale:
            distill *= tau * tau
            d_local = d_local * (tau * tau)

    value = LossValue(total=ce + lam * distill, ce_part=ce, distill_part=distill)
    return value, d_local, d_logits
