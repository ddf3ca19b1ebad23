import numpy as np
import pytest

import lipsynth.nn as nn
from conftest import gradient_relative_error
from lipsynth.decoder import (DecoderConfig, MelDecoder, positional_encoding,
                              teacher_forced_forward)
from lipsynth.dsp import AudioConfig, Melspectrogram


def tiny_config(**kw):
    base = dict(n_mels=6, visual_dim=10, decoder_layers=2, bilstm_layers=1,
                hidden_dim=8, prenet_dims=(8, 6), attn_dim=4, max_steps=50)
    base.update(kw)
    return DecoderConfig(**base)


@pytest.fixture
def tiny():
    return MelDecoder(tiny_config(), np.random.default_rng(0))


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


class TestPositionalEncoding:
    def test_position_zero_alternates(self):
        pe = positional_encoding(0, 8)
        assert np.allclose(pe, [0, 1, 0, 1, 0, 1, 0, 1])

    def test_norm_is_half_dim(self):
        for pos in (0, 1, 17, 500):
            pe = positional_encoding(pos, 32)
            assert np.sum(pe * pe) == pytest.approx(16.0, abs=1e-9)

    def test_direct_formula_dim4_pos1(self):
        pe = positional_encoding(1, 4)
        expect = [np.sin(1.0), np.cos(1.0), np.sin(0.01), np.cos(0.01)]
        assert np.allclose(pe, expect, atol=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(0, 5)


class TestEncodeVisual:
    def test_single_frame_memory(self, tiny):
        vf = np.random.default_rng(1).normal(size=(1, 10)).astype(np.float32)
        mem = tiny.encode_visual(vf)
        assert mem.n_frames == 1
        assert mem.keys.data.shape == (1, 1, 4)
        # attention over one slot weights it fully
        q = nn.Tensor(np.random.default_rng(2).normal(size=(1, 4))
                      .astype(np.float32))
        _, w = tiny.attend(q, mem, step=0)
        assert w.data[0, 0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_zero_features_zero_params_zero_memory(self, tiny):
        zero_params(tiny)
        vf = np.zeros((3, 10), dtype=np.float32)
        mem = tiny.encode_visual(vf)
        assert np.allclose(mem.keys.data, 0.0)
        assert np.allclose(mem.values.data, 0.0)
        assert np.allclose(mem.summary.data, 0.0)
        assert all(np.allclose(h.data, 0.0) for h in mem.state.hidden)

    def test_empty_sequence_rejected(self, tiny):
        with pytest.raises((ValueError, nn.ShapeError)):
            tiny.encode_visual(np.zeros((0, 10), dtype=np.float32))


class TestAttend:
    def test_identical_keys_uniform(self, tiny):
        n = 5
        keys = nn.Tensor(np.tile(np.array([1.0, 2.0, 0.5, -1.0],
                                          np.float32), (1, n, 1)))
        values = nn.Tensor(np.random.default_rng(0)
                           .normal(size=(1, n, 4)).astype(np.float32))
        from lipsynth.decoder import DecoderMemory
        mem = DecoderMemory(keys, values, None, None, n)
        q = nn.Tensor(np.ones((1, 4), dtype=np.float32))
        _, w = tiny.attend(q, mem, 0)
        assert np.allclose(w.data[0, :, 0], 1.0 / n, atol=1e-6)

    def test_matching_key_dominates(self, tiny):
        from lipsynth.decoder import DecoderMemory
        scale = 8.0
        keys = np.zeros((1, 3, 4), dtype=np.float32)
        keys[0, 0] = [scale, 0, 0, 0]
        keys[0, 1] = [0, scale, 0, 0]
        keys[0, 2] = [0, 0, scale, 0]
        values = np.eye(3, 4, dtype=np.float32)[None]
        mem = DecoderMemory(nn.Tensor(keys), nn.Tensor(values), None, None, 3)
        q = nn.Tensor(np.array([[0, scale, 0, 0]], dtype=np.float32))
        ctx, w = tiny.attend(q, mem, 0)
        assert w.data[0, 1, 0] > 0.9

    def test_weights_sum_to_one(self, tiny):
        vf = np.random.default_rng(3).normal(size=(7, 10)).astype(np.float32)
        mem = tiny.encode_visual(vf)
        q = nn.Tensor(np.random.default_rng(4).normal(size=(1, 4))
                      .astype(np.float32))
        _, w = tiny.attend(q, mem, 2)
        assert w.data.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(w.data >= 0)


class TestDecodeStep:
    def test_zero_params_frame_zero_gate_half(self, tiny):
        zero_params(tiny)
        vf = np.zeros((4, 10), dtype=np.float32)
        mem = tiny.encode_visual(vf)
        prev = nn.Tensor(np.zeros((1, 6), dtype=np.float32))
        frame, gate, state, w = tiny.decode_step(
            prev, mem.state, mem, 0, np.random.default_rng(0))
        assert np.allclose(frame.data, 0.0)
        assert gate.data[0, 0] == 0.5

    def test_gate_in_open_interval(self, tiny):
        vf = np.random.default_rng(5).normal(size=(4, 10)).astype(np.float32)
        mem = tiny.encode_visual(vf)
        prev = nn.Tensor(np.random.default_rng(6).normal(size=(1, 6))
                         .astype(np.float32))
        _, gate, _, _ = tiny.decode_step(prev, mem.state, mem, 0,
                                         np.random.default_rng(1))
        assert 0.0 < gate.data[0, 0] < 1.0

    def test_deterministic_under_seed(self, tiny):
        vf = np.random.default_rng(7).normal(size=(3, 10)).astype(np.float32)
        outs = []
        for _ in range(2):
            mem = tiny.encode_visual(vf)
            prev = nn.Tensor(np.full((1, 6), 0.3, dtype=np.float32))
            frame, gate, _, _ = tiny.decode_step(prev, mem.state, mem, 1,
                                                 np.random.default_rng(9))
            outs.append((frame.data.copy(), gate.data.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_non_finite_state_rejected(self, tiny):
        vf = np.zeros((2, 10), dtype=np.float32)
        mem = tiny.encode_visual(vf)
        bad = nn.LstmState(
            [nn.Tensor(np.full((1, 8), np.nan)) for _ in range(2)],
            [nn.Tensor(np.zeros((1, 8))) for _ in range(2)])
        with pytest.raises(nn.GradientError):
            tiny.decode_step(nn.Tensor(np.zeros((1, 6), np.float32)), bad,
                             mem, 0, np.random.default_rng(0))

    def test_gradient_check_full_step(self, float64_engine):
        dec = MelDecoder(tiny_config(), np.random.default_rng(11))
        rng = np.random.default_rng(12)
        vf = nn.Tensor(rng.normal(size=(1, 3, 10)))
        target = rng.normal(size=(1, 2, 6))

        def loss():
            frames, gates = dec.teacher_forced(vf, target, 1.0, seed=5)
            return nn.tmean(nn.square(nn.sub(frames, target)))

        params = [dec.prenet_fc1.weight, dec.query_proj.weight,
                  dec.dec_lstm.w_x[0], dec.frame_proj.weight,
                  dec.key_conv.weight, dec.init_h[0].weight,
                  dec.go_frame]
        assert gradient_relative_error(loss, params) < 1e-3


class TestGenerate:
    def test_forced_high_gate_stops_first_step(self, tiny):
        zero_params(tiny)
        # bias the gate projection so sigmoid(b) = 0.9 > threshold
        tiny.gate_proj.bias.data = np.array([np.log(9.0)], dtype=np.float32)
        vf = np.zeros((5, 10), dtype=np.float32)
        mel, gates, attn = tiny.generate(vf, AudioConfig(), seed=0)
        assert mel.n_frames == 1
        assert len(gates) == 1

    def test_gate_never_fires_hits_max_steps(self, tiny):
        zero_params(tiny)
        tiny.gate_proj.bias.data = np.array([-8.0], dtype=np.float32)
        vf = np.zeros((5, 10), dtype=np.float32)
        mel, gates, attn = tiny.generate(vf, AudioConfig(), seed=0,
                                         max_steps=13)
        assert mel.n_frames == 13

    def test_threshold_strictly_greater(self, tiny):
        # sigmoid(0) = 0.5 is NOT above the 0.5 threshold
        zero_params(tiny)
        vf = np.zeros((2, 10), dtype=np.float32)
        mel, gates, _ = tiny.generate(vf, AudioConfig(), seed=0, max_steps=7)
        assert mel.n_frames == 7
        assert np.allclose(gates, 0.5)

    def test_attention_rows_sum_to_one(self, tiny):
        vf = np.random.default_rng(13).normal(size=(6, 10)).astype(np.float32)
        _, _, attn = tiny.generate(vf, AudioConfig(), seed=1, max_steps=9)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-6)

    def test_output_floored_at_log_floor(self, tiny):
        vf = np.random.default_rng(14).normal(size=(3, 10)).astype(np.float32)
        cfg = AudioConfig()
        mel, _, _ = tiny.generate(vf, cfg, seed=2, max_steps=5)
        assert mel.frames.min() >= np.log(cfg.log_floor) - 1e-6


class TestTeacherForced:
    def test_full_forcing_consumes_ground_truth(self, tiny):
        vf = np.random.default_rng(15).normal(size=(4, 10)).astype(np.float32)
        target = Melspectrogram(
            np.full((9, 6), np.log(1e-2) + 1.0, np.float32),
            AudioConfig(n_mels=6))
        seen = []
        teacher_forced_forward(tiny, vf, target, tf_ratio=1.0, seed=0,
                               step_hook=lambda t, forced: seen.append(forced))
        assert seen == [True] * 9

    def test_zero_forcing_matches_generate_prefix(self, tiny):
        vf = np.random.default_rng(16).normal(size=(5, 10)).astype(np.float32)
        cfg = AudioConfig(n_mels=6)
        target = Melspectrogram(
            np.full((12, 6), np.log(cfg.log_floor), np.float32), cfg)
        preds, gates = teacher_forced_forward(tiny, vf, target, tf_ratio=0.0,
                                              seed=21)
        mel, ggates, _ = tiny.generate(vf, cfg, seed=21, max_steps=12)
        t = mel.n_frames
        raw = np.maximum(tiny.denormalize_mel(preds[:t]),
                         np.log(cfg.log_floor)).astype(np.float32)
        assert np.array_equal(raw, mel.frames)
        assert np.allclose(gates[:t], ggates, atol=1e-7)

    def test_forcing_rate_statistics(self, tiny):
        vf = np.random.default_rng(17).normal(size=(2, 10)).astype(np.float32)
        cfg = AudioConfig(n_mels=6)
        target = Melspectrogram(
            np.full((500, 6), np.log(cfg.log_floor), np.float32), cfg)
        counts = []
        for seed in range(20):
            seen = []
            teacher_forced_forward(
                tiny, vf, target, tf_ratio=0.5, seed=seed,
                step_hook=lambda t, forced: seen.append(forced))
            counts.append(np.mean(seen))
        assert np.mean(counts) == pytest.approx(0.5, abs=0.02)

    def test_empty_target_rejected(self, tiny):
        vf = np.zeros((2, 10), dtype=np.float32)
        with pytest.raises(ValueError):
            tiny.teacher_forced(vf, np.zeros((1, 0, 6)), 1.0)

    def test_bad_ratio_rejected(self, tiny):
        vf = np.zeros((2, 10), dtype=np.float32)
        with pytest.raises(ValueError):
            tiny.teacher_forced(vf, np.zeros((1, 3, 6)), 1.5)


class TestDecoderConfig:
    def test_threshold_range_enforced(self):
        with pytest.raises(ValueError):
            DecoderConfig(gate_threshold=1.5)

    def test_max_steps_positive(self):
        with pytest.raises(ValueError):
            DecoderConfig(max_steps=0)
