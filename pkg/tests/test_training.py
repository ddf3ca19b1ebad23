import numpy as np
import pytest

import lipsynth.nn as nn
from lipsynth import data
from lipsynth.dsp import AudioConfig
from lipsynth.synthesizer import Synthesizer
from lipsynth.training import (TrainConfig, augment_flip, sequence_loss,
                               tf_schedule, train)
from lipsynth.video import LipROISequence


class TestTfSchedule:
    def test_start(self):
        assert tf_schedule(0, TrainConfig()) == 1.0

    def test_formula_points(self):
        cfg = TrainConfig()
        assert tf_schedule(10, cfg) == pytest.approx(0.9)
        assert tf_schedule(95, cfg) == pytest.approx(0.2)

    def test_monotone_non_increasing_with_floor(self):
        cfg = TrainConfig()
        ratios = [tf_schedule(e, cfg) for e in range(301)]
        assert all(b <= a for a, b in zip(ratios, ratios[1:]))
        assert min(ratios) == cfg.tf_floor

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            tf_schedule(-1, TrainConfig())


class TestAugmentFlip:
    def _seq(self):
        rng = np.random.default_rng(0)
        return LipROISequence(rng.uniform(0, 1, (4, 48, 48))
                              .astype(np.float32))

    def test_involution(self):
        seq = self._seq()
        once = augment_flip(seq, np.random.default_rng(1), flip_prob=1.0)
        twice = augment_flip(once, np.random.default_rng(2), flip_prob=1.0)
        assert np.array_equal(twice.frames, seq.frames)
        assert not np.array_equal(once.frames, seq.frames)

    def test_whole_sequence_flips_together(self):
        seq = self._seq()
        flipped = augment_flip(seq, np.random.default_rng(3), flip_prob=1.0)
        for orig, flip in zip(seq.frames, flipped.frames):
            assert np.array_equal(flip, orig[:, ::-1])

    def test_empirical_rate(self):
        rng = np.random.default_rng(4)
        seq = self._seq()
        flips = sum(
            not np.array_equal(augment_flip(seq, rng, 0.5).frames, seq.frames)
            for _ in range(10000))
        assert flips / 10000 == pytest.approx(0.5, abs=0.02)


class TestSequenceLoss:
    def test_perfect_prediction_zero_mse(self):
        target = np.random.default_rng(0).normal(size=(1, 5, 4)) \
            .astype(np.float32)
        gates = np.zeros((1, 5, 1), dtype=np.float32)
        gates[0, -1, 0] = 1.0 - 1e-6
        gates[0, :-1, 0] = 1e-6
        total, mse, bce = sequence_loss(target.copy(), gates, target)
        assert mse == pytest.approx(0.0, abs=1e-10)
        assert bce < 1e-4

    def test_unit_offset_unit_mse(self):
        target = np.zeros((1, 3, 4), dtype=np.float32)
        pred = target + 1.0
        gates = np.full((1, 3, 1), 0.5, dtype=np.float32)
        _, mse, _ = sequence_loss(pred, gates, target)
        assert mse == pytest.approx(1.0, rel=1e-6)

    def test_hand_built_two_by_two(self):
        target = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        pred = np.array([[[1.5, 2.0], [3.0, 5.0]]], dtype=np.float32)
        gates = np.full((1, 2, 1), 0.5, dtype=np.float32)
        _, mse, bce = sequence_loss(pred, gates, target)
        assert mse == pytest.approx((0.25 + 1.0) / 4.0, rel=1e-6)
        # gate targets [0, 1]: -(ln 0.5) and -(5 ln 0.5), averaged
        assert bce == pytest.approx(3.0 * np.log(2.0), rel=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            sequence_loss(np.zeros((1, 3, 4)), np.zeros((1, 3, 1)),
                          np.zeros((1, 4, 4)))


def _mini_corpus():
    return data.generate_corpus(2, 1, 4, seed=7, tokens_per_sample=1)


def _mini_model(seed=0):
    from lipsynth.decoder import DecoderConfig
    return Synthesizer(
        AudioConfig(),
        DecoderConfig(hidden_dim=32, attn_dim=16, prenet_dims=(16, 8),
                      max_steps=40),
        seed=seed)


class TestTrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(_mini_model(), [], TrainConfig(max_epochs=1))

    def test_early_stop_exact_patience_when_loss_constant(self):
        model = _mini_model()
        for p in model.parameters():
            p.requires_grad = False
        cfg = TrainConfig(max_epochs=50, early_stop_patience=4, seed=3)
        model, report = train(model, _mini_corpus(), cfg)
        # epoch 0 is the best; patience epochs after it without improvement
        assert len(report.epochs) == 1 + cfg.early_stop_patience
        assert "did not improve" in report.stopping_reason

    def test_identical_seeds_identical_curves(self):
        curves = []
        for _ in range(2):
            model = _mini_model(seed=5)
            cfg = TrainConfig(max_epochs=3, seed=11, early_stop_patience=10)
            _, report = train(model, _mini_corpus(), cfg)
            curves.append([(r["train_loss"], r["val_loss"])
                           for r in report.epochs])
        assert curves[0] == curves[1]

    def test_returned_model_is_best_validation(self):
        model = _mini_model(seed=2)
        cfg = TrainConfig(max_epochs=6, seed=1, early_stop_patience=10)
        model, report = train(model, _mini_corpus(), cfg)
        assert report.best_val_loss <= min(r["val_loss"]
                                           for r in report.epochs) + 1e-12

    def test_tf_ratio_recorded_matches_schedule(self):
        model = _mini_model(seed=4)
        cfg = TrainConfig(max_epochs=4, seed=2, early_stop_patience=10)
        _, report = train(model, _mini_corpus(), cfg)
        for row in report.epochs:
            assert row["tf_ratio"] == tf_schedule(row["epoch"], cfg)

    def test_frozen_speaker_encoder_untouched(self):
        from lipsynth.speaker import FaceEncoder
        enc = FaceEncoder(np.random.default_rng(42))
        enc.freeze()
        before = nn.parameter_fingerprint(enc)
        model = _mini_model(seed=6)
        cfg = TrainConfig(max_epochs=2, seed=0, early_stop_patience=10)
        train(model, _mini_corpus(), cfg, speaker_encoder=enc)
        assert nn.parameter_fingerprint(enc) == before

    def test_report_jsonl_shape(self):
        model = _mini_model(seed=7)
        cfg = TrainConfig(max_epochs=2, seed=0, early_stop_patience=10)
        _, report = train(model, _mini_corpus(), cfg)
        lines = report.to_jsonl().strip().split("\n")
        assert len(lines) == len(report.epochs)
        import json
        row = json.loads(lines[0])
        assert {"epoch", "train_loss", "val_loss", "tf_ratio",
                "wall_s"} <= set(row)


class TestTrainConfigValidation:
    def test_floor_above_start_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(tf_floor=0.9, tf_start=0.5)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"lr": 0.1, "bogus": 1})
