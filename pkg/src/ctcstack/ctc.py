"""CTC objective: exact forward-backward loss/gradient, an enumeration
oracle, and greedy decoding.

All recursions run in the log domain with -inf encoding impossible states;
the gradient's alpha-beta products are formed by exponentiating differences
from the log-likelihood so nothing underflows on long utterances.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numerics import log_softmax_rows
from .model import Posteriors

BLANK_ID = 0
_BRUTE_FORCE_LIMIT = 10 ** 7


@dataclass
class CtcResult:
    """Negative log likelihood in nats and its gradient wrt the logits."""

    loss: float
    grad: np.ndarray  # (T, K+1); rows sum to 0


def extend_labels(target_ids) -> np.ndarray:
    """Blank-interleaved target y' of length 2U+1 (blanks at even indices)."""
    target_ids = list(target_ids)
    if not target_ids:
        raise UsageError("target must be non-empty")
    ext = np.full(2 * len(target_ids) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target_ids
    return ext


def min_path_length(target_ids) -> int:
    """Fewest frames any valid alignment needs: U plus forced blanks."""
    ids = list(target_ids)
    repeats = sum(1 for a, b in zip(ids, ids[1:]) if a == b)
    return len(ids) + repeats


def _unpack(posteriors):
    if isinstance(posteriors, Posteriors):
        return posteriors.probs, log_softmax_rows(posteriors.logits)
    probs = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return probs, np.log(probs)


def _validate_target(target_ids, n_labels: int) -> list:
    ids = [int(i) for i in (target_ids.ids if hasattr(target_ids, "ids") else target_ids)]
    if not ids:
        raise UsageError("target must be non-empty")
    for i in ids:
        if not 1 <= i < n_labels:
            raise UsageError(f"target id {i} invalid or blank for {n_labels} labels")
    return ids


def ctc_loss_and_grad(posteriors, target_ids) -> CtcResult:
    """Exact negative log likelihood over all alignments, with its gradient.

    Dynamic program over the blank-interleaved target: alpha starts at the
    first two positions, transitions allow stay, advance by one, or advance
    by two when skipping a blank between distinct symbols. The gradient wrt
    logit u_t(k) is P_t(k) - occupancy_t(k), where occupancy sums the
    alpha*beta mass of every extended position carrying label k. Impossible
    alignments yield +inf loss and a zero gradient.
    """
    probs, logp = _unpack(posteriors)
    t_len, n_labels = probs.shape
    ids = _validate_target(target_ids, n_labels)
    zero_grad = np.zeros_like(probs)
    if t_len < min_path_length(ids):
        return CtcResult(np.inf, zero_grad)

    ext = extend_labels(ids)
    s_len = ext.size
    # skip transition into s allowed when it crosses a blank between distinct symbols
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[3::2] = ext[3::2] != ext[1:-2:2]
    lp_ext = logp[:, ext]  # (T, S)

    neg = -np.inf
    log_alpha = np.full((t_len, s_len), neg)
    log_alpha[0, 0] = lp_ext[0, 0]
    log_alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, t_len):
        prev = log_alpha[t - 1]
        move = np.logaddexp(prev, np.concatenate(([neg], prev[:-1])))
        skip = np.where(can_skip, np.concatenate(([neg, neg], prev[:-2])), neg)
        log_alpha[t] = lp_ext[t] + np.logaddexp(move, skip)

    log_like = np.logaddexp(log_alpha[-1, -1], log_alpha[-1, -2])
    if log_like == neg:
        return CtcResult(np.inf, zero_grad)

    # beta excludes the emission at its own frame, so alpha_t * beta_t sums
    # to the total likelihood at every t and the gradient needs no division
    # by the frame posterior.
    log_beta = np.full((t_len, s_len), neg)
    log_beta[-1, -1] = 0.0
    log_beta[-1, -2] = 0.0
    from_skip = np.zeros(s_len, dtype=bool)
    from_skip[:-2] = can_skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = log_beta[t + 1] + lp_ext[t + 1]
        move = np.logaddexp(nxt, np.concatenate((nxt[1:], [neg])))
        skip = np.where(from_skip, np.concatenate((nxt[2:], [neg, neg])), neg)
        log_beta[t] = np.logaddexp(move, skip)

    occupancy = np.exp(log_alpha + log_beta - log_like)  # (T, S)
    grad = probs.copy()
    for s in range(s_len):
        grad[:, ext[s]] -= occupancy[:, s]
    return CtcResult(float(-log_like), grad)


def collapse_path(path, blank_id: int = BLANK_ID) -> list:
    """Remove consecutive repeats, then blanks."""
    out = []
    prev = None
    for label in path:
        if label != prev:
            out.append(label)
        prev = label
    return [label for label in out if label != blank_id]


def ctc_brute_force(posteriors, target_ids) -> float:
    """Direct evaluation of the loss by enumerating every frame-label path.

    Exists as the independent oracle for the dynamic program; guarded to
    (K+1)^T <= 1e7 paths.
    """
    probs, _ = _unpack(posteriors)
    t_len, n_labels = probs.shape
    ids = _validate_target(target_ids, n_labels)
    if n_labels ** t_len > _BRUTE_FORCE_LIMIT:
        raise UsageError(
            f"brute force guard exceeded: {n_labels}^{t_len} paths"
        )
    total = 0.0
    for path in itertools.product(range(n_labels), repeat=t_len):
        if collapse_path(path) == ids:
            p = 1.0
            for t, label in enumerate(path):
                p *= probs[t, label]
            total += p
    if total == 0.0:
        return np.inf
    return float(-np.log(total))


def greedy_decode(posteriors) -> list:
    """Per-frame argmax (ties -> lowest id), collapse repeats, drop blanks."""
    probs = posteriors.probs if isinstance(posteriors, Posteriors) else np.asarray(posteriors)
    best = np.argmax(probs, axis=1)  # argmax returns the first (lowest) id on ties
    return collapse_path(best.tolist())
