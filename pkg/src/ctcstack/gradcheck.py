"""Finite-difference verification of every hand-derived gradient path.

Central differences with step 1e-5 in double precision. The error metric is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-4): a relative error for
healthy gradients that degrades gracefully into an absolute 1e-8 bound for
near-zero ones, keeping the check meaningful below the difference-quotient
noise floor.
"""

from dataclasses import dataclass

import numpy as np

from .ctc import ctc_loss_and_grad
from .labelset import LabelInventory
from .losses import DistillBatch, distill_loss_and_grad, smoothed_ctc_loss_and_grad
from .model import (
    BIDIRECTIONAL,
    UNIDIRECTIONAL,
    ModelConfig,
    Posteriors,
    backward,
    forward,
    init_model,
)
from .numerics import Rng, softmax_rows

FD_STEP = 1e-5
TOLERANCE = 1e-4
_ERR_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _ERR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check_model_through_loss(model, feats, loss_fn) -> float:
    """Compare BPTT parameter gradients against central differences.

    loss_fn maps Posteriors to (scalar loss, dLoss/dLogits).
    """
    posteriors, cache = forward(model, feats)
    _, d_logits = loss_fn(posteriors)
    grads, _ = backward(model, cache, d_logits)

    worst = 0.0
    for name, param in model.named_parameters():
        flat = param.reshape(-1)
        numeric = np.zeros_like(flat)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + FD_STEP
            plus, _ = loss_fn(forward(model, feats)[0])
            flat[idx] = original - FD_STEP
            minus, _ = loss_fn(forward(model, feats)[0])
            flat[idx] = original
            numeric[idx] = (plus - minus) / (2 * FD_STEP)
        worst = max(worst, relative_error(grads[name].reshape(-1), numeric))
    return worst


def fd_check_logit_grad(logits, loss_fn) -> float:
    """Compare a loss's dLoss/dLogits against central differences."""

    def evaluate(lg):
        return loss_fn(Posteriors(softmax_rows(lg), lg))

    _, analytic = evaluate(logits)
    flat = logits.reshape(-1)
    numeric = np.zeros_like(flat)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + FD_STEP
        plus, _ = evaluate(logits)
        flat[idx] = original - FD_STEP
        minus, _ = evaluate(logits)
        flat[idx] = original
        numeric[idx] = (plus - minus) / (2 * FD_STEP)
    return relative_error(analytic.reshape(-1), numeric.reshape(-1))


def _ctc_loss_fn(target):
    def fn(posteriors):
        result = ctc_loss_and_grad(posteriors, target)
        return result.loss, result.grad

    return fn


def _smoothed_loss_fn(target, alpha):
    def fn(posteriors):
        result = smoothed_ctc_loss_and_grad(posteriors, target, alpha)
        return result.loss, result.grad

    return fn


def run_suite(seed: int = 0) -> list:
    """The four standard checks; each returns its max relative error."""
    rng = Rng(seed)
    inventory = LabelInventory.reduced()  # K=3 keeps the output layer small
    t_len = 10
    input_dim = 5
    target = (1, 2, 1)
    results = []

    uni = init_model(
        ModelConfig(UNIDIRECTIONAL, input_dim=input_dim, layers=2, cells=8, projection=4),
        rng, inventory,
    )
    feats = rng.uniform(-1.0, 1.0, (t_len, input_dim))
    results.append(GradCheckResult(
        "unidirectional 2x8 model through CTC loss",
        fd_check_model_through_loss(uni, feats, _ctc_loss_fn(target)),
    ))

    bi = init_model(
        ModelConfig(BIDIRECTIONAL, input_dim=input_dim, layers=1, cells=8, projection=4),
        rng, inventory,
    )
    results.append(GradCheckResult(
        "bidirectional 1x8 model through CTC loss",
        fd_check_model_through_loss(bi, feats, _ctc_loss_fn(target)),
    ))

    n_labels = 5
    student_logits = rng.uniform(-1.0, 1.0, (t_len, n_labels))
    teacher_probs = softmax_rows(rng.uniform(-1.0, 1.0, (t_len, n_labels)))

    def distill_fn(posteriors):
        return distill_loss_and_grad(DistillBatch(teacher_probs, posteriors))

    results.append(GradCheckResult(
        "distillation CE wrt student logits",
        fd_check_logit_grad(student_logits, distill_fn),
    ))

    results.append(GradCheckResult(
        "smoothed CTC loss (alpha=0.05) through unidirectional model",
        fd_check_model_through_loss(uni, feats, _smoothed_loss_fn(target, 0.05)),
    ))
    return results
