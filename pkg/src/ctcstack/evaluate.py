"""Error-rate scoring, manifest-level decoding, and posterior dumps."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .corpus import load_manifest, read_feature_file, stack_frames
from .ctc import greedy_decode
from .errors import UsageError
from .labelset import postprocess
from .losses import posterior_entropies
from .model import forward


@dataclass
class ErrorCounts:
    """Levenshtein alignment counts against a reference token sequence."""

    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_count: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        """(S+D+I)/N; NaN when the reference is empty (flagged in reports)."""
        if self.reference_count == 0:
            return float("nan")
        return self.total / self.reference_count

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_count + other.reference_count,
        )


def edit_distance(reference, hypothesis) -> ErrorCounts:
    """Minimal S+D+I alignment via dynamic programming.

    Ties between equal-cost alignments prefer substitutions over insertions
    over deletions; with total and S fixed, D and I follow from the length
    difference, so the decomposition is deterministic and symmetric.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    n, m = len(ref), len(hyp)
    # dp rows hold (total, subs) per hypothesis prefix; minimize total, then
    # maximize matches+subs on the diagonal (equivalently maximize S at the end)
    prev_total = list(range(m + 1))
    prev_subs = [0] * (m + 1)
    for i in range(1, n + 1):
        cur_total = [i] + [0] * m
        cur_subs = [0] * (m + 1)
        ref_tok = ref[i - 1]
        for j in range(1, m + 1):
            diag_cost = 0 if ref_tok == hyp[j - 1] else 1
            best_total = prev_total[j - 1] + diag_cost
            best_subs = prev_subs[j - 1] + diag_cost
            ins_total = cur_total[j - 1] + 1
            if ins_total < best_total or (ins_total == best_total and cur_subs[j - 1] > best_subs):
                best_total, best_subs = ins_total, cur_subs[j - 1]
            del_total = prev_total[j] + 1
            if del_total < best_total or (del_total == best_total and prev_subs[j] > best_subs):
                best_total, best_subs = del_total, prev_subs[j]
            cur_total[j] = best_total
            cur_subs[j] = best_subs
        prev_total, prev_subs = cur_total, cur_subs
    total = prev_total[m]
    subs = prev_subs[m]
    deletions = (total - subs + (n - m)) // 2
    insertions = total - subs - deletions
    return ErrorCounts(subs, deletions, insertions, n)


def tokenize(text: str, unit: str) -> list:
    """Word tokens split on spaces, or character tokens including spaces."""
    if unit == "word":
        return text.split(" ") if text else []
    if unit == "char":
        return list(text)
    raise UsageError(f"unknown unit {unit!r} (expected 'word' or 'char')")


@dataclass
class UtteranceScore:
    utt_id: str
    reference: str
    hypothesis: str
    counts: ErrorCounts


@dataclass
class EvalResult:
    unit: str
    counts: ErrorCounts = field(default_factory=ErrorCounts)
    utterances: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.counts.rate


def decode_utterance(model, feats: np.ndarray, stack_factor: int) -> str:
    """Features -> stacked frames -> greedy decode -> text."""
    stacked = stack_frames(feats, stack_factor)
    posteriors, _ = forward(model, stacked)
    return postprocess(model.inventory, greedy_decode(posteriors))


def evaluate_manifest(model, manifest_path, unit: str, stack_factor: int) -> EvalResult:
    """Aggregate WER/CER over a manifest: sum(S+D+I) / sum(reference tokens)."""
    if model.inventory.mode != "full":
        raise UsageError("evaluation requires a full-inventory model")
    result = EvalResult(unit=unit)
    for rec in load_manifest(manifest_path):
        feats = read_feature_file(rec.feature_path)
        hyp = decode_utterance(model, feats, stack_factor)
        counts = edit_distance(tokenize(rec.transcript, unit), tokenize(hyp, unit))
        result.counts = result.counts + counts
        result.utterances.append(UtteranceScore(rec.utt_id, rec.transcript, hyp, counts))
    return result


def mean_posterior_entropy(model, manifest_path, stack_factor: int) -> float:
    """Mean per-frame entropy of the model's posteriors over a manifest."""
    total = 0.0
    frames = 0
    for rec in load_manifest(manifest_path):
        stacked = stack_frames(read_feature_file(rec.feature_path), stack_factor)
        posteriors, _ = forward(model, stacked)
        total += float(posterior_entropies(posteriors.probs).sum())
        frames += stacked.shape[0]
    return total / frames


def dump_posteriors(model, feats: np.ndarray, out_path) -> None:
    """Write one "frame,symbol,probability" row per frame x symbol."""
    posteriors, _ = forward(model, feats)
    symbols = model.inventory.symbols
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "symbol", "probability"])
        for t in range(posteriors.probs.shape[0]):
            for k, sym in enumerate(symbols):
                writer.writerow([t, sym, f"{posteriors.probs[t, k]:.12g}"])
