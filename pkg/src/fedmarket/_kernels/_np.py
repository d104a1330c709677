"""NumPy implementations of the hot training kernels.

These are the reference semantics for the compiled extension in ``_ck.pyx``:
both modules expose identical signatures, and the selected backend is fixed
once per process (see ``fedmarket._kernels``). Everything operates on
float64 C-contiguous arrays.
"""
from __future__ import annotations

import numpy as np

# Floor applied to teacher probabilities before taking logs; weighted
# ensembling with clipped weights can produce exact zeros.
TEACHER_PROB_FLOOR = 1e-12


def softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of logits / temperature, max-subtracted for overflow safety."""
    shifted = (logits - logits.max(axis=1, keepdims=True)) / temperature
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def ce_loss_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits.

    grad = (softmax(logits) - onehot(labels)) / rows
    """
    rows = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(rows), labels]))
    grad = np.exp(shifted - logsumexp[:, None])
    grad[np.arange(rows), labels] -= 1.0
    grad /= rows
    return loss, grad


def kl_loss_grad(
    student_logits: np.ndarray, teacher_probs: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Mean row-wise KL(student softmax at temperature || teacher) and its gradient.

    The teacher is a constant: no gradient flows to it. Teacher entries are
    clamped below at TEACHER_PROB_FLOOR before the log. The returned loss is
    the plain KL mean; callers apply any temperature-squared weighting.
    """
    rows = student_logits.shape[0]
    shifted = (student_logits - student_logits.max(axis=1, keepdims=True)) / temperature
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - logsumexp
    p = np.exp(log_p)
    log_ratio = log_p - np.log(np.maximum(teacher_probs, TEACHER_PROB_FLOOR))
    row_kl = np.sum(p * log_ratio, axis=1)
    loss = float(np.mean(np.maximum(row_kl, 0.0)))
    grad = p * (log_ratio - row_kl[:, None]) / (rows * temperature)
    return loss, grad


def ensemble_probs(
    logits_stack: np.ndarray, weights: np.ndarray, temperature: float
) -> np.ndarray:
    """Weighted sum over j of softmax_rows(logits_stack[j], temperature).

    Accumulation runs in index order so that two calls with equal inputs are
    bit-identical regardless of how the stack was assembled.
    """
    members, rows, cols = logits_stack.shape
    out = np.zeros((rows, cols))
    for j in range(members):
        out += weights[j] * softmax_rows(logits_stack[j], temperature)
    return out


def sgd_update(params: np.ndarray, grads: np.ndarray, lr: float) -> None:
    params -= lr * grads


def adam_update(
    params: np.ndarray,
    grads: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """Bias-corrected Adam step; ``step`` is the 1-based step counter."""
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
