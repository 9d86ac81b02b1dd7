import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

from ctcstack.corpus import SynthConfig, synth_corpus
from ctcstack.errors import DataFormatError, NumericError, UsageError
from ctcstack.labelset import LabelInventory
from ctcstack.model import ModelConfig, forward, init_model
from ctcstack.numerics import Rng
from ctcstack.trainer import (
    AnnealState,
    Checkpoint,
    PipelineConfig,
    TrainingConfig,
    apply_config_values,
    clip_global_norm,
    curriculum_plan,
    end_of_epoch,
    load_checkpoint,
    load_training_config,
    parse_kv_file,
    run_pipeline,
    run_stage,
    save_checkpoint,
    sgd_momentum_step,
)

FULL = LabelInventory.full()


def small_corpora(tmp_path, train_n=16, dev_n=6, seed=100):
    train = synth_corpus(
        SynthConfig(utterance_count=train_n, seed=seed, words_per_utt=(1, 2),
                    proto_dim=6, frames_per_char=(3, 5)),
        tmp_path / "train",
    )
    dev = synth_corpus(
        SynthConfig(utterance_count=dev_n, seed=seed + 1, words_per_utt=(1, 2),
                    proto_dim=6, frames_per_char=(3, 5)),
        tmp_path / "dev",
    )
    return train, dev


def small_config(tmp_path, train, dev, **overrides):
    cfg = TrainingConfig(
        stage="finetune-ctc", train_manifest=str(train), dev_manifest=str(dev),
        out_dir=str(tmp_path / "run"), seed=5, layers=1, cells=6, projection=4,
        feature_dim=6, stack_factor=3, max_epochs=2, learning_rate=1e-3,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class TestSgdMomentum:
    def make(self):
        model = init_model(
            ModelConfig(input_dim=3, layers=1, cells=2, projection=2), Rng(0),
            LabelInventory.reduced(),
        )
        vel = {n: np.zeros_like(a) for n, a in model.named_parameters()}
        return model, vel

    def test_plain_sgd(self):
        model, vel = self.make()
        before = {n: a.copy() for n, a in model.named_parameters()}
        grads = {n: np.full_like(a, 0.25) for n, a in model.named_parameters()}
        sgd_momentum_step(model, grads, vel, lr=1.0, momentum=0.0)
        for name, arr in model.named_parameters():
            np.testing.assert_array_equal(arr, before[name] - 0.25)

    def test_zero_grad_zero_velocity_is_noop(self):
        model, vel = self.make()
        before = {n: a.copy() for n, a in model.named_parameters()}
        grads = {n: np.zeros_like(a) for n, a in model.named_parameters()}
        sgd_momentum_step(model, grads, vel, lr=1.0, momentum=0.9)
        for name, arr in model.named_parameters():
            np.testing.assert_array_equal(arr, before[name])

    def test_two_steps_with_momentum(self):
        model, vel = self.make()
        before = {n: a.copy() for n, a in model.named_parameters()}
        grads = {n: np.ones_like(a) for n, a in model.named_parameters()}
        sgd_momentum_step(model, grads, vel, lr=1.0, momentum=0.9)
        after_one = {n: a.copy() for n, a in model.named_parameters()}
        sgd_momentum_step(model, grads, vel, lr=1.0, momentum=0.9)
        for name, arr in model.named_parameters():
            np.testing.assert_allclose(after_one[name], before[name] - 1.0, atol=1e-15)
            np.testing.assert_allclose(arr, after_one[name] - 1.9, atol=1e-15)

    def test_shape_mismatch(self):
        model, vel = self.make()
        grads = {n: np.zeros(3) for n, _ in model.named_parameters()}
        with pytest.raises(UsageError):
            sgd_momentum_step(model, grads, vel, 1.0, 0.9)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.zeros(2)}
        norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.8])
        grads2 = {"a": np.array([0.3])}
        clip_global_norm(grads2, 1.0)
        np.testing.assert_array_equal(grads2["a"], [0.3])  # untouched below the clip


class TestAnnealing:
    def test_scripted_sequence(self):
        state = AnnealState(lr=1e-4, decay=0.7, floor=1e-7)
        seen = []
        for dev in [1.0, 1.1, 0.9, 0.95]:
            end_of_epoch(state, dev)
            seen.append(state.lr)
        assert seen == [1e-4, 1e-4 * 0.7, 1e-4 * 0.7, 1e-4 * 0.7 * 0.7]

    def test_improving_dev_keeps_lr(self):
        state = AnnealState(lr=1e-4, decay=0.7, floor=1e-7)
        for dev in [3.0, 2.0, 1.0, 0.5]:
            assert not end_of_epoch(state, dev)
        assert state.lr == 1e-4

    def test_floor_stops(self):
        state = AnnealState(lr=1.2e-7, decay=0.7, floor=1e-7)
        end_of_epoch(state, 1.0)
        assert end_of_epoch(state, 2.0)  # 1.2e-7 * 0.7 = 8.4e-8 < floor

    def test_equal_dev_is_not_degradation(self):
        state = AnnealState(lr=1e-4, decay=0.7, floor=1e-7)
        end_of_epoch(state, 1.0)
        end_of_epoch(state, 1.0)
        assert state.lr == 1e-4

    def test_non_finite_dev_rejected(self):
        state = AnnealState(lr=1e-4)
        with pytest.raises(NumericError):
            end_of_epoch(state, math.inf)


class TestCurriculumPlan:
    def test_median_threshold(self):
        phases = curriculum_plan([10, 20, 30, 40], "short-first", 2, 50.0, 6)
        assert phases[0].indices == [0, 1]
        assert (phases[0].first_epoch, phases[0].last_epoch) == (1, 2)
        assert phases[1].indices == [0, 1, 2, 3]
        assert (phases[1].first_epoch, phases[1].last_epoch) == (3, 6)

    def test_none_is_single_phase(self):
        phases = curriculum_plan([5, 6], "none", 0, 50.0, 4)
        assert len(phases) == 1
        assert phases[0].mode == "full"
        assert phases[0].indices == [0, 1]

    def test_reduced_labels_phases(self):
        phases = curriculum_plan([5, 6], "reduced-labels", 1, 50.0, 3)
        assert [p.mode for p in phases] == ["reduced", "full"]
        assert phases[0].indices == phases[1].indices

    def test_bad_epoch_split(self):
        with pytest.raises(UsageError):
            curriculum_plan([5], "short-first", 4, 50.0, 4)


class TestCheckpointFormat:
    def make_checkpoint(self):
        model = init_model(
            ModelConfig(input_dim=6, layers=1, cells=4, projection=3), Rng(3), FULL,
        )
        vel = {n: np.zeros_like(a) for n, a in model.named_parameters()}
        return Checkpoint(model, vel, 1e-4, 2.5, 7, b"\x01" * 32, 3, 2)

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make_checkpoint()
        p1 = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.learning_rate == ckpt.learning_rate
        assert loaded.best_dev == ckpt.best_dev
        assert loaded.epoch == ckpt.epoch
        assert loaded.fingerprint == ckpt.fingerprint
        assert loaded.model.inventory == FULL

    def test_corrupted_magic(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[0] = 0x58
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "t.ckpt"
        save_checkpoint(ckpt, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "g.ckpt"
        save_checkpoint(ckpt, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(DataFormatError):
            load_checkpoint(path)


class TestConfigFiles:
    def test_parse_and_types(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# a comment\n"
            "stage = teacher-ctc\n"
            "learning_rate = 0.001\n"
            "max_epochs = 4\n"
            "alpha = 0.05\n"
        )
        cfg = load_training_config(path)
        assert cfg.stage == "teacher-ctc"
        assert cfg.learning_rate == 0.001
        assert cfg.max_epochs == 4
        assert cfg.alpha == 0.05

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("warp_factor = 9\n")
        with pytest.raises(UsageError):
            load_training_config(path)

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nmax_epochs = 9\n")
        cfg = load_training_config(path, {"seed": 2})
        assert cfg.seed == 2
        assert cfg.max_epochs == 9

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("justakey\n")
        with pytest.raises(UsageError):
            parse_kv_file(path)

    def test_fingerprint_tracks_seed(self):
        a = TrainingConfig(seed=1)
        b = TrainingConfig(seed=2)
        c = TrainingConfig(seed=1)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == c.fingerprint()
        # out_dir is where results land, not what they are
        d = TrainingConfig(seed=1, out_dir="elsewhere")
        assert a.fingerprint() == d.fingerprint()


class TestRunStage:
    def test_finetune_smoke_and_update_counts(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev)
        ckpt, report = run_stage(cfg)
        assert len(report.entries) == 2
        for entry in report.entries:
            assert entry.updates + entry.skipped == 16
            assert math.isfinite(entry.dev_loss)
        out = Path(cfg.out_dir)
        assert (out / "finetune-ctc.ckpt").exists()
        assert (out / "finetune-ctc.report.csv").exists()
        assert (out / "finetune-ctc.report.png").exists()
        assert "seed = 5" in (out / "finetune-ctc.report.csv").read_text()

    def test_bitwise_determinism(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg_a = small_config(tmp_path, train, dev, out_dir=str(tmp_path / "a"))
        cfg_b = small_config(tmp_path, train, dev, out_dir=str(tmp_path / "b"))
        run_stage(cfg_a)
        run_stage(cfg_b)
        assert (tmp_path / "a" / "finetune-ctc.ckpt").read_bytes() == (
            tmp_path / "b" / "finetune-ctc.ckpt").read_bytes()

    def test_lr_trajectory_only_decays_by_factor(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev, max_epochs=5, learning_rate=0.05)
        _, report = run_stage(cfg)
        lrs = [e.learning_rate for e in report.entries]
        for prev, cur in zip(lrs, lrs[1:]):
            assert cur == prev or cur == pytest.approx(prev * 0.7, rel=1e-12)
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_teacher_stage_is_bidirectional(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev, stage="teacher-ctc", max_epochs=1)
        ckpt, _ = run_stage(cfg)
        assert ckpt.model.config.direction == "bidirectional"

    def test_distill_requires_teacher(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev, stage="distill-kl")
        with pytest.raises(UsageError):
            run_stage(cfg)

    def test_distill_keeps_teacher_frozen(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        teacher_cfg = small_config(tmp_path, train, dev, stage="teacher-ctc",
                                   max_epochs=1, out_dir=str(tmp_path / "t"))
        run_stage(teacher_cfg)
        teacher_path = tmp_path / "t" / "teacher-ctc.ckpt"
        digest_before = hashlib.sha256(teacher_path.read_bytes()).hexdigest()
        cfg = small_config(tmp_path, train, dev, stage="distill-kl",
                           teacher_checkpoint=str(teacher_path),
                           out_dir=str(tmp_path / "d"), max_epochs=1)
        run_stage(cfg)
        assert hashlib.sha256(teacher_path.read_bytes()).hexdigest() == digest_before

    def test_distill_from_copy_of_unidirectional_teacher_is_stationary(self, tmp_path):
        # student initialized to its (unidirectional) teacher: P = Q, so the
        # dev CE equals the teacher's entropy floor and every update is zero
        train, dev = small_corpora(tmp_path)
        base = small_config(tmp_path, train, dev, max_epochs=1,
                            out_dir=str(tmp_path / "uni"))
        run_stage(base)
        uni_path = tmp_path / "uni" / "finetune-ctc.ckpt"
        uni_loaded = load_checkpoint(uni_path)  # float32 on disk, like the warm start

        cfg = small_config(tmp_path, train, dev, stage="distill-kl",
                           teacher_checkpoint=str(uni_path),
                           init_checkpoint=str(uni_path),
                           out_dir=str(tmp_path / "copy"), max_epochs=1)
        ckpt, report = run_stage(cfg)
        for (_, a), (_, b) in zip(ckpt.model.named_parameters(),
                                  uni_loaded.model.named_parameters()):
            assert a.tobytes() == b.tobytes()

        from ctcstack.corpus import load_manifest, read_feature_file, stack_frames
        from ctcstack.losses import posterior_entropies

        floor = []
        for rec in load_manifest(dev):
            feats = stack_frames(read_feature_file(rec.feature_path), 3)
            posteriors, _ = forward(uni_loaded.model, feats)
            floor.append(float(posterior_entropies(posteriors.probs).sum()))
        assert report.entries[0].dev_loss == pytest.approx(
            sum(floor) / len(floor), rel=1e-9)

    def test_reduced_label_curriculum_swaps_output_layer(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev, max_epochs=3,
                           curriculum="reduced-labels", curriculum_epochs=1)
        ckpt, report = run_stage(cfg)
        assert ckpt.model.n_outputs == 80
        assert ckpt.model.inventory.mode == "full"
        assert len(report.entries) == 3

    def test_short_first_curriculum_uses_subset_then_full(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg = small_config(tmp_path, train, dev, max_epochs=2,
                           curriculum="short-first", curriculum_epochs=1)
        _, report = run_stage(cfg)
        first, second = report.entries
        assert first.updates + first.skipped <= 16
        assert second.updates + second.skipped == 16
        assert first.updates < second.updates

    def test_workers_accumulate_like_serial_blocks(self, tmp_path):
        train, dev = small_corpora(tmp_path, train_n=8, dev_n=4)
        serial = small_config(tmp_path, train, dev, workers=1,
                              out_dir=str(tmp_path / "w1"), max_epochs=1)
        parallel = small_config(tmp_path, train, dev, workers=2,
                                out_dir=str(tmp_path / "w2"), max_epochs=1)
        _, report1 = run_stage(serial)
        ckpt2, report2 = run_stage(parallel)
        # two utterances per update in the worker pool
        assert report2.entries[0].updates == 4
        assert report1.entries[0].updates == 8
        assert ckpt2.model.config.direction == "unidirectional"

    def test_warm_start_architecture_mismatch(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        base = small_config(tmp_path, train, dev, max_epochs=1,
                            out_dir=str(tmp_path / "w"))
        run_stage(base)
        other = small_config(tmp_path, train, dev, cells=8,
                             init_checkpoint=str(tmp_path / "w" / "finetune-ctc.ckpt"))
        with pytest.raises(UsageError):
            run_stage(other)


class TestPipeline:
    def pipeline_config(self, tmp_path, train, dev, seed=5):
        base = TrainingConfig(
            train_manifest=str(train), dev_manifest=str(dev),
            out_dir=str(tmp_path / "pipe"), seed=seed, layers=1, cells=6,
            projection=4, feature_dim=6, stack_factor=3, max_epochs=1,
            learning_rate=1e-3,
        )
        return PipelineConfig.build(base, {"finetune": {"alpha": "0.05"}})

    def test_runs_all_three_stages(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        pipeline = self.pipeline_config(tmp_path, train, dev)
        summary = run_pipeline(pipeline)
        out = tmp_path / "pipe"
        for name in ("teacher.ckpt", "student_kl.ckpt", "final.ckpt"):
            assert (out / name).exists()
        assert summary.resumed == []
        assert (out / "pipeline.report.csv").exists()
        assert (out / "pipeline.report.png").exists()
        final = load_checkpoint(out / "final.ckpt")
        assert final.model.config.direction == "unidirectional"

    def test_resume_skips_completed_stages(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        pipeline = self.pipeline_config(tmp_path, train, dev)
        run_pipeline(pipeline)
        stamps = {
            name: (tmp_path / "pipe" / name).stat().st_mtime_ns
            for name in ("teacher.ckpt", "student_kl.ckpt", "final.ckpt")
        }
        summary = run_pipeline(pipeline)
        assert summary.resumed == ["teacher", "distill", "finetune"]
        for name, stamp in stamps.items():
            assert (tmp_path / "pipe" / name).stat().st_mtime_ns == stamp

    def test_seed_change_is_fingerprint_mismatch(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        run_pipeline(self.pipeline_config(tmp_path, train, dev, seed=5))
        changed = self.pipeline_config(tmp_path, train, dev, seed=6)
        with pytest.raises(UsageError, match="fingerprint"):
            run_pipeline(changed)

    def test_corrupted_checkpoint_fails_before_training(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        pipeline = self.pipeline_config(tmp_path, train, dev)
        run_pipeline(pipeline)
        final = tmp_path / "pipe" / "final.ckpt"
        final.write_bytes(final.read_bytes()[:40])
        teacher = tmp_path / "pipe" / "teacher.ckpt"
        stamp = teacher.stat().st_mtime_ns
        with pytest.raises(DataFormatError):
            run_pipeline(pipeline)
        assert teacher.stat().st_mtime_ns == stamp  # nothing retrained

    def test_prefixed_keys_from_file(self, tmp_path):
        train, dev = small_corpora(tmp_path)
        cfg_file = tmp_path / "pipe.cfg"
        cfg_file.write_text(
            f"train_manifest = {train}\n"
            f"dev_manifest = {dev}\n"
            f"out_dir = {tmp_path / 'pp'}\n"
            "layers = 1\ncells = 6\nprojection = 4\nfeature_dim = 6\n"
            "max_epochs = 1\n"
            "teacher.max_epochs = 2\n"
            "finetune.alpha = 0.05\n"
        )
        pipeline = PipelineConfig.from_file(cfg_file)
        assert pipeline.teacher.max_epochs == 2
        assert pipeline.distill.max_epochs == 1
        assert pipeline.finetune.alpha == 0.05
        assert pipeline.distill.teacher_checkpoint.endswith("teacher.ckpt")
