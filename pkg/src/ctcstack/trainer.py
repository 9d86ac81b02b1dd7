"""Optimization, curriculum scheduling, and the three-stage pipeline.

Stages: an offline bidirectional teacher trained with CTC, a unidirectional
student distilled from it by frame-level cross entropy, and a CTC fine-tune
of the student with optional label smoothing and curriculum. Training is
per-sample SGD with momentum; the learning rate decays by 0.7 whenever the
dev criterion degrades. Runs are bitwise reproducible for a fixed seed in
single-worker mode.
"""

import dataclasses
import hashlib
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report as report_mod
from .corpus import load_manifest, read_feature_file, stack_frames
from .errors import DataFormatError, NumericError, UsageError
from .labelset import LabelInventory, encode_reduced, encode_transcript
from .losses import DistillBatch, distill_loss_and_grad, smoothed_ctc_loss_and_grad
from .model import (
    BIDIRECTIONAL,
    UNIDIRECTIONAL,
    BlstmLayerParams,
    LstmLayerParams,
    Model,
    ModelConfig,
    forward,
    init_model,
    replace_output_layer,
)
from .numerics import Rng
from . import model as model_mod

log = logging.getLogger(__name__)

STAGE_TEACHER = "teacher-ctc"
STAGE_DISTILL = "distill-kl"
STAGE_FINETUNE = "finetune-ctc"
STAGES = (STAGE_TEACHER, STAGE_DISTILL, STAGE_FINETUNE)

CURRICULUM_NONE = "none"
CURRICULUM_SHORT = "short-first"
CURRICULUM_REDUCED = "reduced-labels"
CURRICULA = (CURRICULUM_NONE, CURRICULUM_SHORT, CURRICULUM_REDUCED)

CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    """Full recipe for one stage; every field has a config-file key."""

    stage: str = STAGE_FINETUNE
    train_manifest: str = ""
    dev_manifest: str = ""
    out_dir: str = "runs"
    checkpoint_name: str = ""
    seed: int = 0
    layers: int = 2
    cells: int = 64
    projection: int = 32
    feature_dim: int = 80
    stack_factor: int = 3
    learning_rate: float = 1e-4
    momentum: float = 0.9
    lr_decay: float = 0.7
    lr_floor: float = 1e-7
    max_epochs: int = 30
    alpha: float = 0.0
    curriculum: str = CURRICULUM_NONE
    curriculum_epochs: int = 0
    curriculum_percentile: float = 50.0
    grad_clip: float = 10.0
    workers: int = 1
    teacher_checkpoint: str = ""
    init_checkpoint: str = ""

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise UsageError(f"unknown stage {self.stage!r}")
        if not self.train_manifest or not self.dev_manifest:
            raise UsageError("train and dev manifests are required")
        if self.learning_rate <= 0 or self.momentum < 0 or self.lr_floor <= 0:
            raise UsageError("learning rate and floor must be positive, momentum >= 0")
        if not 0.0 < self.lr_decay < 1.0:
            raise UsageError("lr decay must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError("alpha must lie in [0, 1]")
        if self.max_epochs < 1:
            raise UsageError("max epochs must be >= 1")
        if self.curriculum not in CURRICULA:
            raise UsageError(f"unknown curriculum {self.curriculum!r}")
        if self.curriculum != CURRICULUM_NONE:
            if not 1 <= self.curriculum_epochs < self.max_epochs:
                raise UsageError("curriculum epochs must satisfy 1 <= n < max epochs")
        if not 0.0 < self.curriculum_percentile <= 100.0:
            raise UsageError("curriculum percentile must lie in (0, 100]")
        if self.grad_clip <= 0:
            raise UsageError("gradient clip must be positive")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.stack_factor < 1 or self.feature_dim < 1:
            raise UsageError("stack factor and feature dim must be >= 1")
        if self.stage == STAGE_DISTILL and not self.teacher_checkpoint:
            raise UsageError("distill-kl requires a teacher checkpoint")

    def model_config(self) -> ModelConfig:
        direction = BIDIRECTIONAL if self.stage == STAGE_TEACHER else UNIDIRECTIONAL
        return ModelConfig(
            direction=direction,
            input_dim=self.feature_dim * self.stack_factor,
            layers=self.layers,
            cells=self.cells,
            projection=self.projection,
        )

    def default_checkpoint_name(self) -> str:
        return self.checkpoint_name or f"{self.stage}.ckpt"

    def canonical_text(self) -> str:
        """Deterministic key=value rendering of everything that affects training."""
        skip = {"out_dir", "checkpoint_name"}
        lines = []
        for f in dataclasses.fields(self):
            if f.name in skip:
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()


def parse_kv_file(path) -> dict:
    """Read a UTF-8 "key = value" config file; blank and # lines are skipped."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def apply_config_values(cfg, values: dict):
    """Set dataclass fields from string values with type coercion."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, raw in values.items():
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        kind = fields[key].type
        current = getattr(cfg, key)
        if isinstance(current, bool) or kind is bool:
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int) and not isinstance(current, bool):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            value = tuple(int(p) if p.lstrip("-").isdigit() else p for p in parts)
        else:
            value = raw
        setattr(cfg, key, value)
    return cfg


def load_training_config(path=None, overrides: dict | None = None) -> TrainingConfig:
    cfg = TrainingConfig()
    if path:
        apply_config_values(cfg, parse_kv_file(path))
    if overrides:
        apply_config_values(cfg, {k: str(v) for k, v in overrides.items()})
    return cfg


# ---------------------------------------------------------------------------
# Optimizer and annealing


def sgd_momentum_step(model: Model, grads: dict, velocities: dict,
                      lr: float, momentum: float) -> None:
    """v <- momentum*v - lr*g; p <- p + v, in the frozen parameter order."""
    for name, param in model.named_parameters():
        g = grads[name]
        if g.shape != param.shape:
            raise UsageError(f"gradient shape mismatch for {name}")
        v = velocities[name]
        v *= momentum
        v -= lr * g
        param += v


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AnnealState:
    """Learning-rate schedule state: decay on dev degradation, stop at floor."""

    lr: float
    decay: float = 0.7
    floor: float = 1e-7
    best: float = math.inf

    def end_of_epoch(self, dev_criterion: float) -> bool:
        """Update LR from a finished epoch's dev criterion; True means stop."""
        if not math.isfinite(dev_criterion):
            raise NumericError("dev criterion must be finite")
        if dev_criterion > self.best:
            self.lr *= self.decay
        else:
            self.best = dev_criterion
        return self.lr < self.floor


def end_of_epoch(state: AnnealState, dev_criterion: float) -> bool:
    return state.end_of_epoch(dev_criterion)


# ---------------------------------------------------------------------------
# Curriculum


@dataclass
class Phase:
    first_epoch: int
    last_epoch: int
    indices: list
    mode: str  # inventory mode for the output layer: "full" | "reduced"


def curriculum_plan(stacked_lengths, curriculum: str, curriculum_epochs: int,
                    percentile: float, max_epochs: int) -> list:
    """Phases as (epoch range, utterance subset, inventory mode)."""
    everything = list(range(len(stacked_lengths)))
    if not everything:
        raise UsageError("training set is empty")
    if curriculum == CURRICULUM_NONE:
        return [Phase(1, max_epochs, everything, "full")]
    if not 1 <= curriculum_epochs < max_epochs:
        raise UsageError("curriculum epochs must satisfy 1 <= n < max epochs")
    if curriculum == CURRICULUM_SHORT:
        threshold = float(np.percentile(np.asarray(stacked_lengths, dtype=float), percentile))
        subset = [i for i in everything if stacked_lengths[i] <= threshold]
        if not subset:
            raise UsageError("short-first phase selected no utterances")
        return [
            Phase(1, curriculum_epochs, subset, "full"),
            Phase(curriculum_epochs + 1, max_epochs, everything, "full"),
        ]
    if curriculum == CURRICULUM_REDUCED:
        return [
            Phase(1, curriculum_epochs, everything, "reduced"),
            Phase(curriculum_epochs + 1, max_epochs, everything, "full"),
        ]
    raise UsageError(f"unknown curriculum {curriculum!r}")


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """A serialized training snapshot: parameters, optimizer state, counters."""

    model: Model
    velocities: dict
    learning_rate: float
    best_dev: float
    epoch: int
    fingerprint: bytes
    stack_factor: int
    feature_dim: int


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataFormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def block(self):
        name = self.take(self.u32()).decode("utf-8")
        ndim = self.u32()
        if ndim > 4:
            raise DataFormatError(f"{self.path}: implausible block rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4")
        return name, data.reshape(shape).astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: magic, fingerprint, inventory, arch, float32 blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(ckpt.fingerprint)
        symbols = model.inventory.symbols
        fh.write(struct.pack("<I", len(symbols)))
        for sym in symbols:
            encoded = sym.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        fh.write(struct.pack(
            "<BIIIIII",
            1 if cfg.direction == BIDIRECTIONAL else 0,
            cfg.layers, cfg.cells, cfg.projection, cfg.input_dim,
            ckpt.stack_factor, ckpt.feature_dim,
        ))
        params = list(model.named_parameters())
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params:
            _write_block(fh, name, arr)
        fh.write(struct.pack("<I", len(params)))
        for name, _ in params:
            _write_block(fh, name, ckpt.velocities[name])
        fh.write(struct.pack("<dd", ckpt.learning_rate, ckpt.best_dev))
        fh.write(struct.pack("<I", ckpt.epoch))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic")
    if reader.u32() != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version")
    fingerprint = reader.take(32)
    symbols = [reader.take(reader.u32()).decode("utf-8") for _ in range(reader.u32())]
    inventory = LabelInventory.from_symbols(symbols)
    direction_flag, layers, cells, projection, input_dim, stack_factor, feature_dim = (
        struct.unpack("<BIIIIII", reader.take(1 + 24))
    )
    cfg = ModelConfig(
        direction=BIDIRECTIONAL if direction_flag else UNIDIRECTIONAL,
        input_dim=input_dim, layers=layers, cells=cells, projection=projection,
    )
    param_blocks = {}
    order = []
    for _ in range(reader.u32()):
        name, arr = reader.block()
        param_blocks[name] = arr
        order.append(name)
    vel_blocks = {}
    for _ in range(reader.u32()):
        name, arr = reader.block()
        vel_blocks[name] = arr
    lr = reader.f64()
    best = reader.f64()
    epoch = reader.u32()
    if reader.pos != len(reader.raw):
        raise DataFormatError(f"{path}: trailing bytes after checkpoint payload")

    model = _assemble_model(cfg, inventory, param_blocks, path)
    expected = [name for name, _ in model.named_parameters()]
    if order != expected or set(vel_blocks) != set(expected):
        raise DataFormatError(f"{path}: parameter blocks do not match architecture")
    for name, arr in model.named_parameters():
        if vel_blocks[name].shape != arr.shape:
            raise DataFormatError(f"{path}: velocity shape mismatch for {name}")
    return Checkpoint(model, vel_blocks, lr, best, epoch, fingerprint,
                      stack_factor, feature_dim)


def _assemble_model(cfg: ModelConfig, inventory, blocks: dict, path) -> Model:
    def grab(name, shape):
        if name not in blocks:
            raise DataFormatError(f"{path}: missing parameter block {name}")
        arr = blocks[name]
        if arr.shape != shape:
            raise DataFormatError(
                f"{path}: block {name} has shape {arr.shape}, expected {shape}"
            )
        return arr

    layers = []
    in_dim = cfg.input_dim
    for l in range(cfg.layers):
        def cell(prefix):
            return LstmLayerParams(
                w_in=grab(f"{prefix}.w_in", (4 * cfg.cells, in_dim)),
                w_rec=grab(f"{prefix}.w_rec", (4 * cfg.cells, cfg.projection)),
                bias=grab(f"{prefix}.bias", (4 * cfg.cells,)),
                proj=grab(f"{prefix}.proj", (cfg.projection, cfg.cells)),
            )

        if cfg.direction == BIDIRECTIONAL:
            layers.append(BlstmLayerParams(
                fwd=cell(f"layer{l}.fwd"),
                bwd=cell(f"layer{l}.bwd"),
                comb_fw=grab(f"layer{l}.comb_fw", (cfg.projection, cfg.projection)),
                comb_bw=grab(f"layer{l}.comb_bw", (cfg.projection, cfg.projection)),
                comb_b=grab(f"layer{l}.comb_b", (cfg.projection,)),
            ))
        else:
            layers.append(cell(f"layer{l}"))
        in_dim = cfg.projection
    out_w = grab("out.w", (inventory.size, cfg.projection))
    out_b = grab("out.b", (inventory.size,))
    return Model(cfg, layers, out_w, out_b, inventory)


# ---------------------------------------------------------------------------
# Stage execution


@dataclass
class EpochStats:
    epoch: int
    phase: int
    train_loss: float
    dev_loss: float
    learning_rate: float
    updates: int
    skipped: int
    seconds: float


@dataclass
class StageReport:
    stage: str
    config_text: str
    entries: list = field(default_factory=list)
    wall_seconds: float = 0.0


class _StageData:
    """Features and encoded targets loaded once per stage."""

    def __init__(self, manifest_path, stack_factor: int, need_reduced: bool):
        self.records = load_manifest(manifest_path)
        inventory = LabelInventory.full()
        self.features = []
        self.targets_full = []
        self.targets_reduced = []
        for rec in self.records:
            feats = stack_frames(read_feature_file(rec.feature_path), stack_factor)
            self.features.append(feats)
            self.targets_full.append(encode_transcript(inventory, rec.transcript).ids)
            if need_reduced:
                self.targets_reduced.append(encode_reduced(rec.transcript).ids)
        self.lengths = [f.shape[0] for f in self.features]

    def target(self, index: int, mode: str):
        return self.targets_full[index] if mode == "full" else self.targets_reduced[index]


def _utterance_loss_and_grads(model, feats, target, stage, alpha, teacher, want_grads):
    """One utterance's stage loss, and parameter gradients when training."""
    posteriors, cache = forward(model, feats)
    if stage == STAGE_DISTILL:
        teacher_post, _ = forward(teacher, feats)
        loss, d_logits = distill_loss_and_grad(DistillBatch(teacher_post.probs, posteriors))
    else:
        result = smoothed_ctc_loss_and_grad(posteriors, target, alpha)
        loss, d_logits = result.loss, result.grad
    if not want_grads or not math.isfinite(loss):
        return loss, None
    grads, _ = model_mod.backward(model, cache, d_logits)
    return loss, grads


def run_stage(config: TrainingConfig, init: Checkpoint | None = None):
    """Train one stage; returns (Checkpoint, StageReport) and persists both."""
    config.validate()
    stage_start = time.monotonic()
    need_reduced = config.curriculum == CURRICULUM_REDUCED
    train = _StageData(config.train_manifest, config.stack_factor, need_reduced)
    dev = _StageData(config.dev_manifest, config.stack_factor, need_reduced)
    full_inventory = LabelInventory.full()
    rng = Rng(config.seed)
    model_cfg = config.model_config()

    phases = curriculum_plan(
        train.lengths, config.curriculum, config.curriculum_epochs,
        config.curriculum_percentile, config.max_epochs,
    )

    teacher = None
    if config.stage == STAGE_DISTILL:
        teacher_ckpt = load_checkpoint(config.teacher_checkpoint)
        teacher = teacher_ckpt.model
        if teacher.config.input_dim != model_cfg.input_dim:
            raise UsageError("teacher input dim does not match stage features")

    warm = init
    if warm is None and config.init_checkpoint:
        warm = load_checkpoint(config.init_checkpoint)
    if warm is not None:
        model = warm.model.copy()
        got = model.config
        if (got.direction, got.input_dim, got.layers, got.cells, got.projection) != (
            model_cfg.direction, model_cfg.input_dim, model_cfg.layers,
            model_cfg.cells, model_cfg.projection,
        ):
            raise UsageError("initial checkpoint architecture does not match config")
        if phases[0].mode == "reduced":
            raise UsageError("reduced-label curriculum cannot warm-start a full model")
    else:
        start_inventory = full_inventory if phases[0].mode == "full" else LabelInventory.reduced()
        model = init_model(model_cfg, rng, start_inventory)

    velocities = {name: np.zeros_like(arr) for name, arr in model.named_parameters()}
    anneal = AnnealState(config.learning_rate, config.lr_decay, config.lr_floor)
    report = StageReport(stage=config.stage, config_text=config.canonical_text())
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None

    def block_results(indices, mode, want_grads):
        jobs = [
            (model, train.features[i], train.target(i, mode), config.stage,
             config.alpha, teacher, want_grads)
            for i in indices
        ]
        if pool is None:
            return [_utterance_loss_and_grads(*job) for job in jobs]
        return list(pool.map(lambda job: _utterance_loss_and_grads(*job), jobs))

    try:
        current_phase = 0
        stopped = False
        for epoch in range(1, config.max_epochs + 1):
            epoch_start = time.monotonic()
            while epoch > phases[current_phase].last_epoch:
                current_phase += 1
            phase = phases[current_phase]
            if epoch == phase.first_epoch and current_phase > 0:
                prev = phases[current_phase - 1]
                if prev.mode != phase.mode:
                    # new objective: fresh output layer, optimizer state, and best
                    new_inv = full_inventory if phase.mode == "full" else LabelInventory.reduced()
                    replace_output_layer(model, new_inv, rng)
                    velocities = {
                        name: np.zeros_like(arr) for name, arr in model.named_parameters()
                    }
                    anneal.best = math.inf

            order = list(phase.indices)
            rng.shuffle(order)
            loss_sum = 0.0
            counted = 0
            updates = 0
            skipped = 0
            block = max(1, config.workers)
            for start in range(0, len(order), block):
                chunk = order[start:start + block]
                results = block_results(chunk, phase.mode, want_grads=True)
                acc = None
                for idx, (loss, grads) in zip(chunk, results):
                    if grads is None:
                        skipped += 1
                        log.warning("skipping utterance %s: no valid alignment",
                                    train.records[idx].utt_id)
                        continue
                    loss_sum += loss
                    counted += 1
                    if acc is None:
                        acc = grads
                    else:
                        for name in acc:
                            acc[name] += grads[name]
                if acc is None:
                    continue
                clip_global_norm(acc, config.grad_clip)
                sgd_momentum_step(model, acc, velocities, anneal.lr, config.momentum)
                updates += 1

            dev_losses = [
                loss for loss, _ in block_results_dev(dev, model, config, teacher, pool, phase.mode)
                if math.isfinite(loss)
            ]
            if not dev_losses:
                raise NumericError("no dev utterance produced a finite loss")
            dev_loss = sum(dev_losses) / len(dev_losses)
            train_loss = loss_sum / counted if counted else math.inf
            lr_before_update = anneal.lr
            stopped = anneal.end_of_epoch(dev_loss)
            report.entries.append(EpochStats(
                epoch=epoch, phase=current_phase, train_loss=train_loss,
                dev_loss=dev_loss, learning_rate=lr_before_update,
                updates=updates, skipped=skipped,
                seconds=time.monotonic() - epoch_start,
            ))
            if stopped:
                log.info("stopping: learning rate %g below floor %g", anneal.lr, config.lr_floor)
                break
    finally:
        if pool is not None:
            pool.shutdown()

    report.wall_seconds = time.monotonic() - stage_start
    ckpt = Checkpoint(
        model=model, velocities=velocities, learning_rate=anneal.lr,
        best_dev=anneal.best, epoch=report.entries[-1].epoch if report.entries else 0,
        fingerprint=config.fingerprint(),
        stack_factor=config.stack_factor, feature_dim=config.feature_dim,
    )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out_dir / config.default_checkpoint_name())
    report_mod.write_stage_report(out_dir, config.stage, report)
    return ckpt, report


def block_results_dev(dev: _StageData, model, config, teacher, pool, mode):
    """Stage losses over the dev set, forward only."""
    jobs = [
        (model, dev.features[i], dev.target(i, mode), config.stage,
         config.alpha, teacher, False)
        for i in range(len(dev.features))
    ]
    if pool is None:
        return [_utterance_loss_and_grads(*job) for job in jobs]
    return list(pool.map(lambda job: _utterance_loss_and_grads(*job), jobs))


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineConfig:
    """Three stage configs sharing data paths and a common output directory."""

    teacher: TrainingConfig
    distill: TrainingConfig
    finetune: TrainingConfig

    @classmethod
    def build(cls, base: TrainingConfig,
              stage_overrides: dict | None = None) -> "PipelineConfig":
        """Derive the three stage configs from a base recipe.

        stage_overrides maps "teacher"/"distill"/"finetune" to key=value dicts.
        """
        stage_overrides = stage_overrides or {}
        out_dir = Path(base.out_dir)

        def derive(stage, name, **extra):
            cfg = dataclasses.replace(base, stage=stage, checkpoint_name=name, **extra)
            section = {"teacher-ctc": "teacher", "distill-kl": "distill",
                       "finetune-ctc": "finetune"}[stage]
            apply_config_values(cfg, stage_overrides.get(section, {}))
            return cfg

        teacher = derive(STAGE_TEACHER, "teacher.ckpt", alpha=0.0, curriculum=CURRICULUM_NONE,
                         curriculum_epochs=0)
        distill = derive(STAGE_DISTILL, "student_kl.ckpt", alpha=0.0,
                         curriculum=CURRICULUM_NONE, curriculum_epochs=0,
                         teacher_checkpoint=str(out_dir / "teacher.ckpt"))
        finetune = derive(STAGE_FINETUNE, "final.ckpt",
                          init_checkpoint=str(out_dir / "student_kl.ckpt"))
        return cls(teacher, distill, finetune)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        """Base keys apply to all stages; "teacher."/"distill."/"finetune."
        prefixed keys override one stage."""
        base_values = {}
        staged: dict = {"teacher": {}, "distill": {}, "finetune": {}}
        values = parse_kv_file(path) if path else {}
        if overrides:
            values.update({k: str(v) for k, v in overrides.items()})
        for key, val in values.items():
            section, _, rest = key.partition(".")
            if rest and section in staged:
                staged[section][rest] = val
            else:
                base_values[key] = val
        base = TrainingConfig()
        apply_config_values(base, base_values)
        return cls.build(base, staged)


@dataclass
class PipelineSummary:
    checkpoints: dict
    reports: dict
    resumed: list


def run_pipeline(pipeline: PipelineConfig) -> PipelineSummary:
    """teacher-ctc -> distill-kl -> finetune-ctc with fingerprint-based resume."""
    stages = [("teacher", pipeline.teacher), ("distill", pipeline.distill),
              ("finetune", pipeline.finetune)]
    # validate any pre-existing checkpoints before touching anything
    existing: dict = {}
    for name, cfg in stages:
        cfg.validate()
        path = Path(cfg.out_dir) / cfg.default_checkpoint_name()
        if path.exists():
            ckpt = load_checkpoint(path)
            if ckpt.fingerprint != cfg.fingerprint():
                raise UsageError(
                    f"{path}: checkpoint fingerprint does not match the current "
                    f"{cfg.stage} config; delete it or restore the old config"
                )
            existing[name] = ckpt

    checkpoints = {}
    reports = {}
    resumed = []
    for name, cfg in stages:
        if name in existing:
            checkpoints[name] = existing[name]
            resumed.append(name)
            log.info("%s: checkpoint up to date, skipping", cfg.stage)
            continue
        ckpt, report = run_stage(cfg)
        checkpoints[name] = ckpt
        reports[name] = report
    if reports:
        report_mod.write_pipeline_report(Path(pipeline.finetune.out_dir), reports)
    return PipelineSummary(checkpoints=checkpoints, reports=reports, resumed=resumed)
