"""Teacher-student distillation loss and uniform label smoothing.

Distillation matches the student's per-frame output distribution to a frozen
teacher's by minimizing cross entropy (the KL divergence minus the teacher
entropy, whose gradient is zero). Label smoothing adds the KL divergence
from the prediction to the uniform distribution over all K+1 labels,
penalizing the blank-dominated low-entropy outputs CTC models drift into.
"""

from dataclasses import dataclass

import numpy as np

from .ctc import CtcResult, ctc_loss_and_grad
from .errors import UsageError
from .model import Posteriors
from .numerics import log_softmax_rows


@dataclass
class DistillBatch:
    """Frozen teacher posteriors paired with student posteriors+logits."""

    teacher_probs: np.ndarray  # (T, K+1)
    student: Posteriors

    def validate(self) -> None:
        if self.teacher_probs.shape != self.student.probs.shape:
            raise UsageError(
                f"teacher {self.teacher_probs.shape} and student "
                f"{self.student.probs.shape} shapes differ"
            )


def frame_kl(p, q) -> float:
    """KL(p || q) for one frame, with 0*ln(0/q) = 0 and +inf when q=0 < p."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError("frame_kl needs two equal-length vectors")
    mask = p > 0
    if np.any(q[mask] == 0.0):
        return float(np.inf)
    pm = p[mask]
    return float(np.sum(pm * (np.log(pm) - np.log(q[mask]))))


def distill_loss_and_grad(batch: DistillBatch):
    """Sum over frames of cross entropy H(P_t, Q_t); gradient is Q - P."""
    batch.validate()
    log_q = log_softmax_rows(batch.student.logits)
    loss = float(-np.sum(batch.teacher_probs * log_q))
    grad = batch.student.probs - batch.teacher_probs
    return loss, grad


def posterior_entropies(probs: np.ndarray) -> np.ndarray:
    """H(P_t) per frame, treating 0 ln 0 as 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


def uniform_kl_and_grad(posteriors: Posteriors):
    """Sum over frames of KL(P_t || uniform) = ln(K+1) - H(P_t), plus gradient."""
    probs = posteriors.probs
    n_labels = probs.shape[1]
    entropy = posterior_entropies(probs)
    loss = float(np.sum(np.log(n_labels) - entropy))
    log_p = log_softmax_rows(posteriors.logits)
    grad = np.where(probs > 0, probs * (log_p + entropy[:, None]), 0.0)
    return loss, grad


def smoothed_ctc_loss_and_grad(posteriors: Posteriors, target_ids, alpha: float) -> CtcResult:
    """(1-alpha) * CTC loss + alpha * uniform-KL regularizer, with gradient.

    alpha=0 reproduces the plain CTC result exactly; an impossible alignment
    keeps the +inf loss / zero gradient convention for alpha < 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return ctc_loss_and_grad(posteriors, target_ids)
    reg_loss, reg_grad = uniform_kl_and_grad(posteriors)
    if alpha == 1.0:
        return CtcResult(reg_loss, reg_grad)
    base = ctc_loss_and_grad(posteriors, target_ids)
    if not np.isfinite(base.loss):
        return CtcResult(np.inf, np.zeros_like(base.grad))
    return CtcResult(
        (1.0 - alpha) * base.loss + alpha * reg_loss,
        (1.0 - alpha) * base.grad + alpha * reg_grad,
    )
