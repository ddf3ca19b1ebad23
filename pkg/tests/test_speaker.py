import numpy as np
import pytest

import lipsynth.nn as nn
from lipsynth import data
from lipsynth.dsp import AudioConfig, Waveform, wav_to_mel
from lipsynth.speaker import (EMBED_DIM, FaceEncoder, SpeakerEmbedding,
                              SpeakerTrainConfig, SpeechEncoder,
                              contrastive_loss, face_encode, read_embeddings,
                              sample_window_length, speech_encode,
                              write_embeddings)


@pytest.fixture(scope="module")
def face_enc():
    return FaceEncoder(np.random.default_rng(0))


@pytest.fixture(scope="module")
def speech_enc():
    return SpeechEncoder()


class TestFaceEncode:
    def test_unit_norm(self, face_enc):
        img = np.random.default_rng(1).uniform(0, 1, (64, 64, 3))
        emb = face_encode(face_enc, img)
        assert np.linalg.norm(emb.values) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic(self, face_enc):
        img = np.random.default_rng(2).uniform(0, 1, (64, 64, 3))
        a = face_encode(face_enc, img)
        b = face_encode(face_enc, img)
        assert np.array_equal(a.values, b.values)

    def test_wrong_resolution_rejected(self, face_enc):
        with pytest.raises(ValueError):
            face_encode(face_enc, np.zeros((32, 32, 3)))

    def test_frozen_prefix_excluded_from_training(self):
        enc = FaceEncoder(np.random.default_rng(3), frozen_prefix=3)
        frozen = [p for blk in enc.blocks[:3] for p in blk.parameters()]
        assert all(not p.requires_grad for p in frozen)
        trainable = [p for m in enc.trainable_modules() for p in m.parameters()]
        assert all(p.requires_grad for p in trainable)


class TestSpeechEncode:
    def test_unit_norm_and_deterministic(self, speech_enc):
        s = data.generate_corpus(1, 1, 6, seed=0)[0]
        mel = wav_to_mel(s.audio, AudioConfig())
        a = speech_encode(speech_enc, mel)
        b = speech_encode(speech_enc, mel)
        assert np.linalg.norm(a.values) == pytest.approx(1.0, abs=1e-5)
        assert np.array_equal(a.values, b.values)

    def test_crop_stability(self, speech_enc):
        cfg = AudioConfig()
        s = data.generate_corpus(1, 1, 6, seed=1, tokens_per_sample=6)[0]
        full = speech_encode(speech_enc, wav_to_mel(s.audio, cfg))
        n = len(s.audio.samples)
        cropped = Waveform(s.audio.samples[:int(0.92 * n)], 16000)
        crop = speech_encode(speech_enc, wav_to_mel(cropped, cfg))
        cos = float(full.values @ crop.values)
        assert 1.0 - cos < 0.1

    def test_parameters_frozen(self, speech_enc):
        assert speech_enc.trainable_parameters() == []

    def test_fingerprint_constant(self):
        a = nn.parameter_fingerprint(SpeechEncoder())
        b = nn.parameter_fingerprint(SpeechEncoder())
        assert a == b


class TestContrastiveLoss:
    def test_single_pair_zero(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, EMBED_DIM))
        v /= np.linalg.norm(v)
        loss = contrastive_loss(v, v, temperature=1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_orthonormal_two_batch_closed_form(self):
        f = np.zeros((2, EMBED_DIM), dtype=np.float32)
        f[0, 0] = 1.0
        f[1, 1] = 1.0
        loss = contrastive_loss(f, f.copy(), temperature=1.0)
        expect = np.log(1.0 + np.exp(-1.0))
        assert loss.item() == pytest.approx(expect, abs=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(5, EMBED_DIM))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        s = rng.normal(size=(5, EMBED_DIM))
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        base = contrastive_loss(f, s, 0.07).item()
        perm = rng.permutation(5)
        permuted = contrastive_loss(f[perm], s[perm], 0.07).item()
        assert permuted == pytest.approx(base, rel=1e-5)

    def test_unnormalized_rows_rejected(self):
        f = np.ones((2, EMBED_DIM), dtype=np.float32)
        with pytest.raises(ValueError):
            contrastive_loss(f, f, 0.07)

    def test_empty_batch_rejected(self):
        f = np.zeros((0, EMBED_DIM), dtype=np.float32)
        with pytest.raises(ValueError):
            contrastive_loss(f, f, 0.07)


class TestWindowSampler:
    def test_lengths_uniform_in_bounds(self):
        cfg = SpeakerTrainConfig()
        rng = np.random.default_rng(0)
        draws = np.array([sample_window_length(rng, cfg)
                          for _ in range(10000)])
        assert draws.min() >= 1.0
        assert draws.max() <= 3.0
        assert draws.min() < 1.05
        assert draws.max() > 2.95
        assert abs(draws.mean() - 2.0) < 0.02


class TestTrainGuards:
    def test_single_identity_rejected(self):
        samples = data.generate_corpus(1, 2, 4, seed=0)
        from lipsynth.speaker import train_speaker_encoder
        with pytest.raises(ValueError):
            train_speaker_encoder(samples, SpeakerTrainConfig(max_steps=1))


class TestEmbeddingFile:
    def test_roundtrip_bit_exact(self, tmp_path, face_enc):
        rng = np.random.default_rng(5)
        embs = []
        for _ in range(3):
            v = rng.normal(size=EMBED_DIM).astype(np.float32)
            embs.append(SpeakerEmbedding(v / np.linalg.norm(v)))
        path = tmp_path / "embs.emb"
        write_embeddings(path, embs)
        back = read_embeddings(path)
        assert back.shape == (3, EMBED_DIM)
        for a, b in zip(embs, back):
            assert a.values.tobytes() == b.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.emb"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_embeddings(p)


class TestSpeakerEmbeddingType:
    def test_norm_enforced(self):
        with pytest.raises(ValueError):
            SpeakerEmbedding(np.ones(EMBED_DIM))

    def test_dim_enforced(self):
        with pytest.raises(ValueError):
            SpeakerEmbedding(np.ones(8))
