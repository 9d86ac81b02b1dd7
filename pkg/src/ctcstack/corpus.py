"""Utterance storage, manifests, frame stacking, and synthetic corpora.

Feature files hold precomputed acoustic features (no audio DSP here); the
synthetic generator renders each transcript character as a run of noisy
copies of a fixed per-character prototype vector, giving a deterministic
desk-scale stand-in for a real corpus.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, UsageError
from .labelset import APOSTROPHE, LOWERCASE, validate_transcript
from .numerics import Rng, uniform_fill

FEATURE_MAGIC = b"CTCF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# Small fixed vocabulary for synthetic transcripts: common words plus a few
# with double letters and apostrophes so every encoding rule gets exercised.
DEFAULT_WORDS = (
    "the a is it to of and in that you he she we they this at on for with "
    "his her them go see all will well call tell little letter kitten hello "
    "good need been seen soon look book took keep free tree green snow "
    "tonight supposed don't it's can't i'm what's"
).split()


@dataclass(frozen=True)
class UtteranceRecord:
    """One manifest entry: an utterance id, its feature file, its transcript."""

    utt_id: str
    feature_path: Path
    transcript: str


def stack_frames(feats: np.ndarray, factor: int) -> np.ndarray:
    """Concatenate groups of `factor` consecutive frames (stride = factor).

    Output has ceil(T/factor) frames of dimension D*factor; an incomplete
    final group is padded by repeating the last input frame. factor=1 is the
    identity.
    """
    if factor < 1:
        raise UsageError("stack factor must be >= 1")
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise UsageError("feature matrix must be T x D with T, D >= 1")
    if factor == 1:
        return feats.copy()
    t, d = feats.shape
    t_out = -(-t // factor)
    pad = t_out * factor - t
    if pad:
        feats = np.vstack([feats, np.repeat(feats[-1:], pad, axis=0)])
    return feats.reshape(t_out, d * factor)


def unstack_frames(stacked: np.ndarray, factor: int) -> np.ndarray:
    """Invert stack_frames when the original frame count was divisible."""
    if factor < 1:
        raise UsageError("stack factor must be >= 1")
    t, d = stacked.shape
    if d % factor:
        raise UsageError("stacked dimension not divisible by factor")
    return np.asarray(stacked, dtype=np.float64).reshape(t * factor, d // factor)


def write_feature_file(path, feats: np.ndarray) -> None:
    """Write a T x D matrix as little-endian float32 with a CTCF header."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise UsageError("feature matrix must be T x D with T, D >= 1")
    if not np.isfinite(feats).all():
        raise UsageError("feature values must be finite")
    t, d = feats.shape
    payload = feats.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    """Read a CTCF feature file back as a float64 T x D matrix."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if t < 1 or d < 1:
        raise DataFormatError(f"{path}: invalid shape {t}x{d}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {4 * t * d}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return values.reshape(t, d).astype(np.float64)


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse "feature-path<TAB>transcript" lines; paths are manifest-relative."""
    path = Path(path)
    base = path.parent
    records = []
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataFormatError(
                f"{path}:{lineno}: expected 'path<TAB>transcript', got {len(fields)} fields"
            )
        rel, transcript = fields
        try:
            validate_transcript(transcript)
        except DataFormatError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        feature_path = base / rel
        records.append(UtteranceRecord(Path(rel).stem, feature_path, transcript))
    return records


@dataclass
class SynthConfig:
    """Recipe for a deterministic synthetic corpus."""

    utterance_count: int = 100
    alphabet: str = LOWERCASE + APOSTROPHE
    proto_dim: int = 80
    frames_per_char: tuple = (2, 4)
    noise_stddev: float = 0.3
    words: tuple = tuple(DEFAULT_WORDS)
    words_per_utt: tuple = (1, 5)
    seed: int = 0

    def validate(self) -> None:
        if self.utterance_count < 1:
            raise UsageError("utterance count must be >= 1")
        if self.proto_dim < 1:
            raise UsageError("prototype dimension must be >= 1")
        lo, hi = self.frames_per_char
        if lo < 1 or hi < lo:
            raise UsageError("frames-per-character range must satisfy 1 <= min <= max")
        if self.noise_stddev < 0:
            raise UsageError("noise stddev must be >= 0")
        wlo, whi = self.words_per_utt
        if wlo < 1 or whi < wlo:
            raise UsageError("words-per-utterance range must satisfy 1 <= min <= max")
        if not self.words:
            raise UsageError("word list must be non-empty")
        if len(set(self.alphabet)) < 26:
            raise UsageError("alphabet must cover at least the 26 letters")
        for word in self.words:
            validate_transcript(word)
            if set(word) - set(self.alphabet):
                raise UsageError(f"word {word!r} uses characters outside the alphabet")


def character_prototypes(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """The fixed per-character prototype vectors a corpus seed implies.

    Drawn first from the corpus stream, one per alphabet character in order
    and then one for space, each uniform in [-1, 1).
    """
    cfg.validate()
    return _draw_prototypes(cfg, Rng(cfg.seed))


def _draw_prototypes(cfg: SynthConfig, rng: Rng) -> dict[str, np.ndarray]:
    protos = {}
    for ch in cfg.alphabet:
        protos[ch] = uniform_fill(rng, cfg.proto_dim, -1.0, 1.0)
    protos[" "] = uniform_fill(rng, cfg.proto_dim, -1.0, 1.0)
    return protos


def synth_corpus(cfg: SynthConfig, out_dir) -> Path:
    """Generate feature files plus a manifest; a pure function of the config."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed)
    protos = _draw_prototypes(cfg, rng)
    flo, fhi = cfg.frames_per_char
    wlo, whi = cfg.words_per_utt
    lines = []
    for i in range(cfg.utterance_count):
        n_words = wlo + rng.randint(whi - wlo + 1)
        transcript = " ".join(
            cfg.words[rng.randint(len(cfg.words))] for _ in range(n_words)
        )
        blocks = []
        for ch in transcript:
            run = flo + rng.randint(fhi - flo + 1)
            block = np.repeat(protos[ch][None, :], run, axis=0)
            if cfg.noise_stddev > 0:
                block = block + rng.normal(cfg.noise_stddev, (run, cfg.proto_dim))
            blocks.append(block)
        name = f"utt_{i:05d}.feat"
        write_feature_file(out_dir / name, np.vstack(blocks))
        lines.append(f"{name}\t{transcript}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
