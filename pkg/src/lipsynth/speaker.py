"""Face -> vocal-identity embeddings aligned to a frozen speech encoder by
in-batch contrastive learning.

The face encoder is a 5-block CNN with the first 3 blocks frozen and the
rest fine-tuned. The speech encoder (recurrent stack over mel frames) is
built from a fixed seed and never trained; it defines the embedding space
the face encoder learns to match.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dsp import AudioConfig, Melspectrogram, Waveform, wav_to_mel

EMBED_DIM = 256
FACE_RES = 64
SPEECH_ENCODER_SEED = 0x5EED
EMB_MAGIC = b"EMB1"


@dataclass
class SpeakerEmbedding:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.size != EMBED_DIM:
            raise ValueError(f"embedding must have {EMBED_DIM} dims, got "
                             f"{self.values.size}")
        norm = np.linalg.norm(self.values)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-4:
            raise ValueError(f"embedding must be unit-norm, |v| = {norm}")


def _l2_normalize(x):
    """Differentiable row L2 normalization of a (B, D) tensor."""
    sq = nn.tsum(nn.square(x), axis=1, keepdims=True)
    return nn.div(x, nn.sqrt(nn.add(sq, 1e-12)))


class FaceEncoder(nn.Module):
    """5 stride-2 conv blocks + linear projection to the embedding space.

    ``frozen_prefix`` leading blocks are excluded from optimization.
    """

    def __init__(self, rng, frozen_prefix=3):
        chans = [3, 8, 16, 32, 64, 128]
        self.blocks = [nn.Conv2d(chans[i], chans[i + 1], 3, rng, stride=2,
                                 padding=1) for i in range(5)]
        self.proj = nn.Linear(chans[-1], EMBED_DIM, rng)
        self.frozen_prefix = frozen_prefix
        for blk in self.blocks[:frozen_prefix]:
            blk.freeze()

    def trainable_modules(self):
        return self.blocks[self.frozen_prefix:] + [self.proj]

    def forward(self, x):
        """x: Tensor (B, 3, 64, 64) -> unit-norm Tensor (B, 256)."""
        y = x
        for blk in self.blocks:
            y = nn.relu(blk(y))
        y = nn.global_avg_pool(y)
        return _l2_normalize(self.proj(y))


class SpeechEncoder(nn.Module):
    """Frozen recurrent encoder: LSTM over mel frames, mean pooled, projected."""

    def __init__(self, n_mels=80, hidden=64, seed=SPEECH_ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.lstm = nn.LSTM(n_mels, hidden, 2, rng)
        self.proj = nn.Linear(hidden, EMBED_DIM, rng)
        self.freeze()

    def forward(self, mel_frames):
        """mel_frames: Tensor (B, T, n_mels) -> unit-norm Tensor (B, 256)."""
        out, _ = self.lstm(mel_frames)
        pooled = nn.tmean(out, axis=1)
        return _l2_normalize(self.proj(pooled))


def face_encode(encoder: FaceEncoder, image):
    """Encode one (64, 64, 3) image in [0, 1] to a SpeakerEmbedding."""
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (FACE_RES, FACE_RES, 3):
        raise ValueError(f"face image must be {FACE_RES}x{FACE_RES}x3, got "
                         f"{img.shape}")
    x = nn.Tensor(np.transpose(img, (2, 0, 1))[None])
    return SpeakerEmbedding(encoder.forward(x).data[0])


def speech_encode(encoder: SpeechEncoder, mel: Melspectrogram):
    """Encode a melspectrogram to a SpeakerEmbedding."""
    if mel.frames.shape[0] < 1:
        raise ValueError("empty melspectrogram")
    x = nn.Tensor(mel.frames[None])
    return SpeakerEmbedding(encoder.forward(x).data[0])


def _log_softmax_rows(logits):
    shift = nn.Tensor(logits.data.max(axis=1, keepdims=True))
    z = nn.sub(logits, shift)
    lse = nn.log(nn.tsum(nn.exp(z), axis=1, keepdims=True))
    return nn.sub(z, lse)


def contrastive_loss(face_emb, speech_emb, temperature=0.07):
    """Symmetric in-batch InfoNCE over index-aligned (face, speech) pairs.

    Rows must be unit-norm; row i of each side is the positive for row i of
    the other, every other in-batch row a negative.
    """
    f = face_emb if isinstance(face_emb, nn.Tensor) else nn.Tensor(face_emb)
    s = speech_emb if isinstance(speech_emb, nn.Tensor) else nn.Tensor(speech_emb)
    if f.ndim != 2 or s.ndim != 2 or f.shape != s.shape:
        raise ValueError(f"expected matching (B, {EMBED_DIM}) matrices, got "
                         f"{f.shape} and {s.shape}")
    b = f.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    for name, m in (("face", f), ("speech", s)):
        norms = np.linalg.norm(m.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError(f"{name} embeddings must be unit-norm rows")
    sim = nn.mul(nn.matmul(f, nn.transpose(s, (1, 0))), 1.0 / temperature)
    eye = np.eye(b, dtype=f.data.dtype)
    ce_f2s = nn.mul(nn.tsum(nn.mul(_log_softmax_rows(sim), eye)), -1.0 / b)
    ce_s2f = nn.mul(nn.tsum(nn.mul(
        _log_softmax_rows(nn.transpose(sim, (1, 0))), eye)), -1.0 / b)
    return nn.mul(nn.add(ce_f2s, ce_s2f), 0.5)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SpeakerTrainConfig:
    batch_size: int = 8
    lr: float = 0.001
    temperature: float = 0.07
    max_steps: int = 400
    eval_every: int = 10
    patience: int = 10          # evaluations without improvement
    window_min_s: float = 1.0
    window_max_s: float = 3.0
    val_fraction: float = 0.2
    seed: int = 0


def sample_window_length(rng, cfg: SpeakerTrainConfig):
    """Audio window length in seconds, uniform in [window_min, window_max]."""
    return float(rng.uniform(cfg.window_min_s, cfg.window_max_s))


def _window_mel(sample, rng, cfg, audio_cfg):
    want = int(sample_window_length(rng, cfg) * sample.audio.sample_rate)
    total = len(sample.audio.samples)
    take = min(want, total)
    start = int(rng.integers(0, total - take + 1)) if total > take else 0
    return wav_to_mel(Waveform(sample.audio.samples[start:start + take],
                               sample.audio.sample_rate), audio_cfg)


def _face_batch_tensor(samples):
    imgs = np.stack([np.transpose(s.face, (2, 0, 1)) for s in samples])
    return nn.Tensor(imgs.astype(np.float32))


@dataclass
class SpeakerTrainReport:
    steps: list = field(default_factory=list)
    stopping_reason: str = ""


def train_speaker_encoder(samples, cfg: SpeakerTrainConfig = None,
                          audio_cfg: AudioConfig = None, encoder=None):
    """Contrastive training of the face encoder against frozen speech codes.

    Each step draws one (face, random 1-3 s audio window) pair per identity;
    in-batch items of other identities serve as negatives. Stops when the
    held-out contrastive loss fails to improve for ``patience`` evaluations.
    """
    cfg = cfg or SpeakerTrainConfig()
    audio_cfg = audio_cfg or AudioConfig()
    by_id = {}
    for s in samples:
        by_id.setdefault(s.identity, []).append(s)
    if len(by_id) < 2:
        raise ValueError("need at least 2 identities for contrastive "
                         "negatives")
    rng = np.random.default_rng(cfg.seed)
    ids = sorted(by_id)
    val, train = {}, {}
    for i in ids:
        pool = by_id[i]
        n_val = max(1, int(round(len(pool) * cfg.val_fraction))) \
            if len(pool) > 1 else 0
        val[i] = pool[len(pool) - n_val:]
        train[i] = pool[:len(pool) - n_val] or pool
    encoder = encoder or FaceEncoder(np.random.default_rng(cfg.seed + 1))
    speech_enc = SpeechEncoder(n_mels=audio_cfg.n_mels)
    params = [p for m in encoder.trainable_modules() for p in m.parameters()]
    opt = nn.Adam(params, lr=cfg.lr)
    report = SpeakerTrainReport()
    best_val, best_state, since_best = np.inf, encoder.state_dict(), 0

    def eval_loss(eval_rng):
        batch_ids = ids[:min(len(ids), cfg.batch_size)]
        picks = [val[i][int(eval_rng.integers(len(val[i])))]
                 if val[i] else train[i][0] for i in batch_ids]
        f = encoder.forward(_face_batch_tensor(picks))
        embs = [speech_enc.forward(
            nn.Tensor(_window_mel(p, eval_rng, cfg, audio_cfg).frames[None]))
            for p in picks]
        s = nn.concat(embs, axis=0)
        return contrastive_loss(f, s, cfg.temperature).item()

    for step in range(1, cfg.max_steps + 1):
        batch_ids = list(rng.permutation(ids))[:min(len(ids), cfg.batch_size)]
        picks = [train[i][int(rng.integers(len(train[i])))] for i in batch_ids]
        f = encoder.forward(_face_batch_tensor(picks))
        embs = [speech_enc.forward(
            nn.Tensor(_window_mel(p, rng, cfg, audio_cfg).frames[None]))
            for p in picks]
        s = nn.concat(embs, axis=0)
        loss = contrastive_loss(f, s, cfg.temperature)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        entry = {"step": step, "train_loss": loss.item()}
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            v = eval_loss(np.random.default_rng(cfg.seed + 7919))
            entry["val_loss"] = v
            if v < best_val - 1e-6:
                best_val, best_state, since_best = v, encoder.state_dict(), 0
            else:
                since_best += 1
            if since_best >= cfg.patience:
                report.steps.append(entry)
                report.stopping_reason = (
                    f"no validation improvement for {cfg.patience} "
                    f"evaluations")
                break
        report.steps.append(entry)
    else:
        report.stopping_reason = f"reached max_steps {cfg.max_steps}"
    encoder.load_state_dict(best_state)
    return encoder, report


# ---------------------------------------------------------------------------
# embedding file format
# ---------------------------------------------------------------------------

def write_embeddings(path, embeddings):
    """EMB1 binary: magic, u32 count, u32 dim, f32 little-endian data."""
    rows = np.stack([e.values if isinstance(e, SpeakerEmbedding) else e
                     for e in embeddings]).astype("<f4")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def read_embeddings(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding file (magic {magic!r})")
        count, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * count * dim), dtype="<f4")
    return data.reshape(count, dim).copy()
