"""Training regime for the synthesizer: losses, teacher-forcing annealing,
flip augmentation, early stopping."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dsp import AudioConfig, wav_to_mel
from .speaker import FaceEncoder, face_encode
from .synthesizer import Synthesizer
from .video import LipROISequence, crop_sequence

# Batch size used in the reference full-scale regime; the desk default below
# fits the synthetic corpus.
FULL_SCALE_BATCH_SIZE = 84


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 8
    max_epochs: int = 300
    tf_start: float = 1.0
    tf_anneal_every: int = 10
    tf_anneal_delta: float = 0.1
    tf_floor: float = 0.2
    early_stop_patience: int = 10
    flip_prob: float = 0.5
    gate_pos_weight: float = 5.0
    grad_clip: float = 1.0
    warm_start_output_bias: bool = True
    # "initial" learning rate decays by lr_decay every lr_decay_every epochs
    lr_decay: float = 0.5
    lr_decay_every: int = 75
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.tf_floor <= self.tf_start <= 1.0):
            raise ValueError("need 0 <= tf_floor <= tf_start <= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be a probability")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stopping_reason: str = ""

    def to_jsonl(self):
        return "\n".join(json.dumps(row) for row in self.epochs) + "\n"

    @property
    def best_val_loss(self):
        return min(row["val_loss"] for row in self.epochs)


def _clip_gradients(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params
                        if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


def tf_schedule(epoch, cfg: TrainConfig):
    """Stepwise annealed teacher-forcing ratio, floored."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    ratio = cfg.tf_start - cfg.tf_anneal_delta * (epoch // cfg.tf_anneal_every)
    return max(cfg.tf_floor, ratio)


def augment_flip(seq: LipROISequence, rng, flip_prob=0.5):
    """Mirror the whole sequence left-right with probability flip_prob."""
    if rng.random() < flip_prob:
        return LipROISequence(seq.frames[:, :, ::-1].copy(), seq.fps)
    return seq


def sequence_loss(pred_frames, pred_gates, target_frames, pos_weight=5.0):
    """MSE on frames plus weighted BCE on the stop gate.

    Gate targets are 1 at the final frame of each sequence, 0 elsewhere;
    the positive class is up-weighted so a single stop frame can compete
    with the off-gate steps. Returns (total, mse_value, bce_value).
    """
    pred = pred_frames if isinstance(pred_frames, nn.Tensor) \
        else nn.Tensor(np.asarray(pred_frames, dtype=np.float32))
    gates = pred_gates if isinstance(pred_gates, nn.Tensor) \
        else nn.Tensor(np.asarray(pred_gates, dtype=np.float32))
    target = np.asarray(target_frames, dtype=pred.data.dtype)
    if pred.data.shape != target.shape:
        raise ValueError(f"prediction shape {pred.data.shape} != target "
                         f"shape {target.shape}")
    b, t_len = target.shape[0], target.shape[1]
    if gates.data.shape[:2] != (b, t_len):
        raise ValueError("gate shape does not match target length")
    mse = nn.tmean(nn.square(nn.sub(pred, target)))
    gate_target = np.zeros((b, t_len, 1), dtype=pred.data.dtype)
    gate_target[:, -1, 0] = 1.0
    eps = 1e-6
    g = nn.add(nn.mul(nn.reshape(gates, (b, t_len, 1)), 1.0 - 2 * eps), eps)
    bce_terms = nn.sub(nn.mul(nn.mul(nn.log(g), gate_target), -pos_weight),
                       nn.mul(nn.log(nn.sub(1.0 + eps, g)), 1.0 - gate_target))
    bce = nn.tmean(bce_terms)
    total = nn.add(mse, bce)
    return total, float(mse.data), float(bce.data)


@dataclass
class PreparedSample:
    lips: LipROISequence
    target: np.ndarray        # (T, n_mels) normalized mel
    embedding: np.ndarray     # (256,)
    raw_mel: np.ndarray       # (T, n_mels) log domain
    identity: str
    tokens: list


def prepare_samples(samples, model: Synthesizer, speaker_encoder=None,
                    audio_cfg: AudioConfig = None, seed=0):
    """Crop lips, analyze target mels, and precompute speaker embeddings."""
    audio_cfg = audio_cfg or model.audio_cfg
    if speaker_encoder is None:
        speaker_encoder = FaceEncoder(np.random.default_rng(seed + 9000))
        speaker_encoder.freeze()
    prepared = []
    for s in samples:
        lips = crop_sequence(s.frames, fps=s.fps)
        mel = wav_to_mel(s.audio, audio_cfg)
        emb = face_encode(speaker_encoder, s.face)
        prepared.append(PreparedSample(
            lips=lips,
            target=model.decoder.normalize_mel(mel.frames),
            embedding=emb.values,
            raw_mel=mel.frames,
            identity=s.identity,
            tokens=list(s.tokens)))
    return prepared


def _batches(items, batch_size):
    """Group same-shape samples so they can be stacked without padding."""
    groups = {}
    for it in items:
        key = (it.lips.frames.shape[0], it.target.shape[0])
        groups.setdefault(key, []).append(it)
    out = []
    for key in sorted(groups):
        group = groups[key]
        for i in range(0, len(group), batch_size):
            out.append(group[i:i + batch_size])
    return out


def _forward_batch(model, batch, tf_ratio, seed, cfg, rng=None):
    lips = []
    for it in batch:
        seq = it.lips if rng is None else augment_flip(it.lips, rng,
                                                       cfg.flip_prob)
        lips.append(seq.frames)
    x = nn.Tensor(np.stack(lips)[:, None])
    emb = np.stack([it.embedding for it in batch])
    targets = np.stack([it.target for it in batch])
    vf = model.visual_features(x, emb)
    frames, gates = model.decoder.teacher_forced(vf, targets, tf_ratio,
                                                 seed=seed)
    return sequence_loss(frames, gates, targets, cfg.gate_pos_weight)


def train(model: Synthesizer, samples, cfg: TrainConfig = None,
          speaker_encoder=None, audio_cfg: AudioConfig = None,
          log_fn=None):
    """Adam training with annealed teacher forcing and early stopping.

    Returns (model restored to its best-validation parameters, TrainReport).
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("empty dataset")
    prepared = samples if samples and isinstance(samples[0], PreparedSample) \
        else prepare_samples(samples, model, speaker_encoder, audio_cfg,
                             cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(prepared))
    n_val = max(1, int(round(0.1 * len(prepared)))) if len(prepared) > 1 else 0
    val_items = [prepared[i] for i in order[:n_val]]
    train_items = [prepared[i] for i in order[n_val:]]
    if not train_items:
        train_items = list(prepared)
    if not val_items:
        val_items = list(prepared)

    params = model.trainable_parameters()
    opt = nn.Adam(params, lr=cfg.lr) if params else None
    if cfg.warm_start_output_bias and model.decoder.frame_proj.bias is not None:
        # start the output layer at the mean target profile so early epochs
        # spend their steps on structure, not on the global offset
        mean_profile = np.mean([it.target.mean(axis=0) for it in train_items],
                               axis=0)
        model.decoder.frame_proj.bias.data = mean_profile.astype(
            model.decoder.frame_proj.bias.data.dtype)
    report = TrainReport()
    best_val, best_state, since_best = np.inf, None, 0

    for epoch in range(cfg.max_epochs):
        t0 = time.monotonic()
        ratio = tf_schedule(epoch, cfg)
        if opt is not None and cfg.lr_decay_every > 0:
            opt.state.lr = cfg.lr * (cfg.lr_decay
                                     ** (epoch // cfg.lr_decay_every))
        epoch_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch]))
        batches = _batches(train_items, cfg.batch_size)
        epoch_rng.shuffle(batches)
        tot, tot_mse, tot_bce, count = 0.0, 0.0, 0.0, 0
        for bi, batch in enumerate(batches):
            loss, mse, bce = _forward_batch(
                model, batch, ratio, seed=cfg.seed * 1000003 + epoch * 997 + bi,
                cfg=cfg, rng=epoch_rng)
            if opt is not None:
                opt.zero_grad()
                nn.backward(loss)
                if cfg.grad_clip > 0:
                    _clip_gradients(params, cfg.grad_clip)
                opt.step()
            tot += loss.item() * len(batch)
            tot_mse += mse * len(batch)
            tot_bce += bce * len(batch)
            count += len(batch)
        val_tot, val_count = 0.0, 0
        for batch in _batches(val_items, cfg.batch_size):
            loss, _, _ = _forward_batch(model, batch, 1.0,
                                        seed=cfg.seed + 424242, cfg=cfg,
                                        rng=None)
            val_tot += loss.item() * len(batch)
            val_count += len(batch)
        row = {
            "epoch": epoch,
            "train_loss": tot / count,
            "train_mse": tot_mse / count,
            "train_gate_bce": tot_bce / count,
            "val_loss": val_tot / val_count,
            "tf_ratio": ratio,
            "wall_s": time.monotonic() - t0,
        }
        report.epochs.append(row)
        if log_fn:
            log_fn(row)
        if row["val_loss"] < best_val - 1e-9:
            best_val = row["val_loss"]
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                report.stopping_reason = (
                    f"validation loss did not improve for "
                    f"{cfg.early_stop_patience} epochs")
                break
    if not report.stopping_reason:
        report.stopping_reason = f"reached max_epochs {cfg.max_epochs}"
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, report
