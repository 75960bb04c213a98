"""Training losses over Dirichlet evidence.

The classification loss is the closed form of the expected categorical
negative log-likelihood under the predicted Dirichlet,

    L(y, e) = sum_k y_k * (ln S - ln(e_k + 1)),   S = sum_k (e_k + 1),

with no extra regularizer on the Dirichlet itself.  An annealed
evidential-uncertainty calibration term pushes uncertainty down on correctly
predicted samples and up on mispredicted ones, ramping its accurate-side
weight from lambda0 to 1 over training.  Accuracy-versus-uncertainty (AvU) is
provided as a non-differentiable diagnostic only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .evidential import batch_probs_and_uncertainty, validate_evidence

__all__ = [
    "CLAMP_EPS",
    "AnnealingSchedule",
    "BatchPrediction",
    "LossWeights",
    "NonFiniteLossError",
    "annealing_lambda",
    "avu_utility",
    "edl_loss",
    "edl_loss_batch",
    "euc_loss",
    "euc_loss_grad_evidence",
    "softmax_ce_loss",
    "total_loss",
]

#: Probabilities and uncertainties are clamped into [CLAMP_EPS, 1 - CLAMP_EPS]
#: before any logarithm.
CLAMP_EPS = 1e-7


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN or infinity."""


@dataclass(frozen=True)
class AnnealingSchedule:
    """Exponential ramp lambda_t = lambda0 * exp(-(ln lambda0 / T) * t).

    Starts at lambda0 for t = 0 and reaches exactly 1 at t = total_epochs.
    """

    lambda0: float = 0.01
    total_epochs: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.lambda0 < 1.0:
            raise ValueError(f"lambda0 must be in (0, 1), got {self.lambda0}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


def annealing_lambda(t: float, schedule: AnnealingSchedule) -> float:
    """Evaluate the annealing weight at epoch t, clamping past the end."""
    if t < 0:
        raise ValueError(f"epoch index must be non-negative, got {t}")
    if t > schedule.total_epochs:
        warnings.warn(
            f"annealing evaluated at t={t} past total_epochs={schedule.total_epochs}; clamping to 1.0",
            stacklevel=2,
        )
        return 1.0
    if t == schedule.total_epochs:
        return 1.0  # lambda0 * exp(-ln lambda0) is exactly 1; skip the float round trip
    rate = math.log(schedule.lambda0) / schedule.total_epochs
    return schedule.lambda0 * math.exp(-rate * t)


def _validate_one_hot(y: np.ndarray, k: int) -> None:
    if y.shape[-1] != k:
        raise ValueError(f"label shape {y.shape} does not match {k} classes")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.allclose(y.sum(axis=-1), 1.0):
        raise ValueError("labels must be one-hot")


def edl_loss(y, e) -> tuple[float, np.ndarray]:
    """Per-sample evidential classification loss and its evidence gradient.

    Returns (sum_k y_k (ln S - ln(e_k + 1)), grad) with
    grad_j = 1/S - y_j / (e_j + 1).
    """
    ev = validate_evidence(e)
    if ev.ndim != 1:
        raise ValueError(f"expected a single evidence vector, got shape {ev.shape}")
    yy = np.asarray(y, dtype=np.float64)
    _validate_one_hot(yy, ev.shape[0])
    alpha = ev + 1.0
    strength = alpha.sum()
    loss = float(np.dot(yy, np.log(strength) - np.log(alpha)))
    grad = 1.0 / strength - yy / alpha
    return loss, grad


def edl_loss_batch(y, e) -> tuple[np.ndarray, np.ndarray]:
    """Batched evidential loss: (B,) per-sample losses and (B, K) gradients."""
    ev = validate_evidence(e)
    if ev.ndim != 2:
        raise ValueError(f"expected (batch, classes) evidence, got shape {ev.shape}")
    yy = np.asarray(y, dtype=np.float64)
    if yy.shape != ev.shape:
        raise ValueError(f"label shape {yy.shape} does not match evidence shape {ev.shape}")
    _validate_one_hot(yy, ev.shape[1])
    alpha = ev + 1.0
    strength = alpha.sum(axis=1, keepdims=True)
    losses = (yy * (np.log(strength) - np.log(alpha))).sum(axis=1)
    grads = 1.0 / strength - yy / alpha
    return losses, grads


@dataclass(frozen=True)
class BatchPrediction:
    """Evidence plus everything the calibration losses need per sample."""

    labels: np.ndarray  # (B,) integer class indices
    one_hot: np.ndarray  # (B, K)
    evidence: np.ndarray  # (B, K)
    probs: np.ndarray  # (B, K) expected probabilities alpha / S
    uncertainty: np.ndarray  # (B,)
    predicted: np.ndarray  # (B,) argmax of probs, lowest index on ties
    max_prob: np.ndarray  # (B,)
    accurate: np.ndarray  # (B,) bool, predicted == label

    @classmethod
    def from_evidence(cls, labels, evidence) -> "BatchPrediction":
        ev = validate_evidence(evidence)
        if ev.ndim != 2:
            raise ValueError(f"expected (batch, classes) evidence, got shape {ev.shape}")
        lab = np.asarray(labels)
        if lab.shape != (ev.shape[0],):
            raise ValueError(f"labels shape {lab.shape} does not match batch size {ev.shape[0]}")
        if np.any(lab < 0) or np.any(lab >= ev.shape[1]):
            raise ValueError("label index out of range")
        lab = lab.astype(np.int64)
        probs, u = batch_probs_and_uncertainty(ev)
        predicted = np.argmax(probs, axis=1)
        one_hot = np.zeros_like(ev)
        one_hot[np.arange(lab.size), lab] = 1.0
        return cls(
            labels=lab,
            one_hot=one_hot,
            evidence=ev,
            probs=probs,
            uncertainty=u,
            predicted=predicted,
            max_prob=probs[np.arange(lab.size), predicted],
            accurate=predicted == lab,
        )

    @property
    def batch_size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.evidence.shape[1])


def euc_loss(
    batch: BatchPrediction, lambda_t: float, clamp_eps: float = CLAMP_EPS
) -> tuple[float, np.ndarray, np.ndarray]:
    """Evidential uncertainty calibration loss with per-sample gradients.

    L = -lambda_t    * mean over accurate   of p_i * ln(1 - u_i)
        -(1-lambda_t)* mean over inaccurate of (1 - p_i) * ln(u_i)

    where p_i is the maximum expected class probability and u_i the
    uncertainty mass, both clamped into [clamp_eps, 1 - clamp_eps] before the
    logarithms.  Each subset term is a mean over that subset; an empty subset
    contributes zero.  Returns (loss, dL/dp (B,), dL/du (B,)); the clamp has
    zero derivative where it is active.
    """
    if not 0.0 <= lambda_t <= 1.0:
        raise ValueError(f"lambda_t must be in [0, 1], got {lambda_t}")
    p_raw = batch.max_prob
    u_raw = batch.uncertainty
    p = np.clip(p_raw, clamp_eps, 1.0 - clamp_eps)
    u = np.clip(u_raw, clamp_eps, 1.0 - clamp_eps)
    p_live = (p_raw > clamp_eps) & (p_raw < 1.0 - clamp_eps)
    u_live = (u_raw > clamp_eps) & (u_raw < 1.0 - clamp_eps)

    acc = batch.accurate
    inacc = ~acc
    grad_p = np.zeros_like(p)
    grad_u = np.zeros_like(u)
    loss = 0.0
    if acc.any():
        n = float(acc.sum())
        log_one_minus_u = np.log1p(-u[acc])
        loss -= lambda_t * float((p[acc] * log_one_minus_u).mean())
        grad_p[acc] = -lambda_t * log_one_minus_u / n
        grad_u[acc] = lambda_t * p[acc] / ((1.0 - u[acc]) * n)
    if inacc.any():
        m = float(inacc.sum())
        log_u = np.log(u[inacc])
        loss -= (1.0 - lambda_t) * float(((1.0 - p[inacc]) * log_u).mean())
        grad_p[inacc] = (1.0 - lambda_t) * log_u / m
        grad_u[inacc] = -(1.0 - lambda_t) * (1.0 - p[inacc]) / (u[inacc] * m)
    grad_p[~p_live] = 0.0
    grad_u[~u_live] = 0.0
    return float(loss), grad_p, grad_u


def euc_loss_grad_evidence(
    batch: BatchPrediction, lambda_t: float, clamp_eps: float = CLAMP_EPS
) -> tuple[float, np.ndarray]:
    """Calibration loss with the chain rule composed down to evidence.

    Both p_i = alpha_{k*} / S (k* the argmax, held fixed) and u_i = K / S are
    functions of the evidence, so

        dL/de_j = dL/dp * (1[j == k*]/S - alpha_{k*}/S^2) + dL/du * (-K/S^2).
    """
    loss, grad_p, grad_u = euc_loss(batch, lambda_t, clamp_eps)
    alpha = batch.evidence + 1.0
    strength = alpha.sum(axis=1)
    k = batch.num_classes
    rows = np.arange(batch.batch_size)
    alpha_star = alpha[rows, batch.predicted]
    # Shared component for all coordinates, then the argmax coordinate's extra.
    common = -(grad_p * alpha_star + grad_u * k) / strength**2
    grad_e = np.repeat(common[:, None], k, axis=1)
    grad_e[rows, batch.predicted] += grad_p / strength
    return loss, grad_e


def avu_utility(batch: BatchPrediction, u_threshold: float) -> float:
    """Accuracy-versus-uncertainty utility (n_AC + n_IU) / n.

    A sample counts as certain when its uncertainty is strictly below the
    threshold.  Diagnostic only; never differentiated.
    """
    n = batch.batch_size
    if n == 0:
        raise ValueError("empty batch")
    certain = batch.uncertainty < u_threshold
    n_ac = int(np.sum(batch.accurate & certain))
    n_iu = int(np.sum(~batch.accurate & ~certain))
    return (n_ac + n_iu) / n


@dataclass(frozen=True)
class LossWeights:
    """Weights combining the loss terms into the training objective."""

    w_euc: float = 1.0
    w_ced: float = 0.1
    lambda_hsic: float = 1.0

    def __post_init__(self) -> None:
        for field in ("w_euc", "w_ced", "lambda_hsic"):
            v = getattr(self, field)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{field} must be finite and >= 0, got {v}")


def total_loss(edl: float, euc: float, ced: float, weights: LossWeights) -> float:
    """Combine the three terms; rejects non-finite inputs."""
    for name, v in (("edl", edl), ("euc", euc), ("ced", ced)):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} loss is non-finite: {v}")
    return edl + weights.w_euc * euc + weights.w_ced * ced


def softmax_ce_loss(y, logits) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy with its logit gradient (baseline model)."""
    z = np.asarray(logits, dtype=np.float64)
    yy = np.asarray(y, dtype=np.float64)
    if z.ndim != 2 or yy.shape != z.shape:
        raise ValueError(f"expected matching (batch, classes) arrays, got {yy.shape} and {z.shape}")
    _validate_one_hot(yy, z.shape[1])
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    b = z.shape[0]
    loss = float(-(yy * log_probs).sum() / b)
    grad = (np.exp(log_probs) - yy) / b
    return loss, grad
