"""Autoregressive melspectrogram decoder over visual features.

Visual features are condensed by a 2-layer BiLSTM whose final states seed a
4-layer decoder LSTM. Attention keys/values come from kernel-3 1-D convs
over the BiLSTM outputs (positional encodings added to the conv inputs and
to each step's query). A sigmoid gate ends generation once it crosses the
stop threshold. The prenet's dropout stays active at inference, so decoding
is stochastic under an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dsp import AudioConfig, Melspectrogram


@dataclass
class DecoderConfig:
    n_mels: int = 80
    visual_dim: int = 384
    decoder_layers: int = 4
    bilstm_layers: int = 2
    hidden_dim: int = 256
    prenet_dims: tuple = (256, 128)
    attn_dim: int = 128
    gate_threshold: float = 0.5
    max_steps: int = 1000
    # mel values are mapped to (mel - mel_center) / mel_scale inside the model
    mel_center: float = 0.0
    mel_scale: float = 4.0
    # matches AudioConfig.log_floor; autoregressive feedback is clamped here
    mel_log_floor: float = 1e-2

    def __post_init__(self):
        if not (0.0 < self.gate_threshold < 1.0):
            raise ValueError("gate_threshold must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.attn_dim % 2 or self.hidden_dim % 2:
            raise ValueError("attn_dim and hidden_dim must be even")


@dataclass
class DecoderMemory:
    keys: nn.Tensor           # (B, N, attn_dim)
    values: nn.Tensor         # (B, N, attn_dim)
    state: nn.LstmState       # initial decoder state, one entry per layer
    summary: nn.Tensor        # (B, latent_dim) concatenated BiLSTM finals
    n_frames: int


def positional_encoding(pos, dim):
    """Sinusoidal position code: PE[2i] = sin(pos/10000^(2i/dim)),
    PE[2i+1] = cos of the same argument."""
    if pos < 0:
        raise ValueError("position must be non-negative")
    if dim % 2:
        raise ValueError("positional encoding dimension must be even")
    i = np.arange(dim // 2)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros(dim)
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe


def positional_table(n, dim, dtype=np.float32):
    return np.stack([positional_encoding(p, dim) for p in range(n)]).astype(dtype)


class MelDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, rng):
        self.cfg = cfg
        half = cfg.hidden_dim // 2
        self.bilstm = nn.LSTM(cfg.visual_dim, half, cfg.bilstm_layers, rng,
                              bidirectional=True)
        latent = cfg.bilstm_layers * 2 * half
        self.latent_dim = latent
        self.init_h = [nn.Linear(latent, cfg.hidden_dim, rng)
                       for _ in range(cfg.decoder_layers)]
        self.init_c = [nn.Linear(latent, cfg.hidden_dim, rng)
                       for _ in range(cfg.decoder_layers)]
        self.key_conv = nn.Conv1d(cfg.hidden_dim, cfg.attn_dim, 3, rng,
                                  padding=1)
        self.value_conv = nn.Conv1d(cfg.hidden_dim, cfg.attn_dim, 3, rng,
                                    padding=1)
        self.prenet_fc1 = nn.Linear(cfg.n_mels, cfg.prenet_dims[0], rng)
        self.prenet_fc2 = nn.Linear(cfg.prenet_dims[0], cfg.prenet_dims[1], rng)
        self.query_proj = nn.Linear(cfg.prenet_dims[1] + cfg.hidden_dim,
                                    cfg.attn_dim, rng)
        self.dec_lstm = nn.LSTM(cfg.prenet_dims[1] + cfg.attn_dim,
                                cfg.hidden_dim, cfg.decoder_layers, rng)
        self.frame_proj = nn.Linear(cfg.hidden_dim + cfg.attn_dim,
                                    cfg.n_mels, rng)
        self.gate_proj = nn.Linear(cfg.hidden_dim + latent, 1, rng)
        self.go_frame = nn.Tensor(
            nn.init_uniform((cfg.n_mels,), cfg.n_mels, rng),
            requires_grad=True)

    # -- mel normalization ------------------------------------------------
    def normalize_mel(self, frames):
        return ((np.asarray(frames, dtype=np.float32) - self.cfg.mel_center)
                / self.cfg.mel_scale)

    def denormalize_mel(self, frames):
        return np.asarray(frames) * self.cfg.mel_scale + self.cfg.mel_center

    def _clamp_feedback(self, frame, log_floor):
        """Feed the next step the same floor-clamped frame an analyzed mel
        would provide; keeps free-running inputs in-distribution."""
        lo = float(self.normalize_mel(np.log(log_floor)))
        return nn.add(nn.relu(nn.sub(frame, lo)), lo)

    # -- encoding ----------------------------------------------------------
    def encode_visual(self, vf):
        """Condense visual features (B, N, D_v) into attention memory and
        the decoder's initial recurrent state."""
        if not isinstance(vf, nn.Tensor):
            vf = nn.Tensor(np.asarray(vf, dtype=np.float32)[None])
        b, n, _ = vf.shape
        if n < 1:
            raise ValueError("empty visual feature sequence")
        out, st = self.bilstm(vf)                       # (B, N, hidden)
        summary_h = nn.concat(st.hidden, axis=1)        # (B, latent)
        summary_c = nn.concat(st.cell, axis=1)
        hidden = [lin(summary_h) for lin in self.init_h]
        cell = [lin(summary_c) for lin in self.init_c]
        pe = positional_table(n, self.cfg.hidden_dim, out.data.dtype)
        kv_in = nn.add(out, pe[None])
        kv_in = nn.transpose(kv_in, (0, 2, 1))          # (B, hidden, N)
        keys = nn.transpose(self.key_conv(kv_in), (0, 2, 1))
        values = nn.transpose(self.value_conv(kv_in), (0, 2, 1))
        return DecoderMemory(keys, values, nn.LstmState(hidden, cell),
                             summary_h, n)

    # -- stepwise decoding ---------------------------------------------------
    def prenet(self, prev, rng):
        """Bottleneck with dropout that stays active at inference."""
        y = nn.dropout(nn.relu(self.prenet_fc1(prev)), 0.5, rng, train=True)
        return nn.dropout(nn.relu(self.prenet_fc2(y)), 0.5, rng, train=True)

    def attend(self, query, mem: DecoderMemory, step):
        """Scaled dot-product attention against the conv memory."""
        if mem.n_frames < 1:
            raise ValueError("empty attention memory")
        q = nn.reshape(query, (query.shape[0], self.cfg.attn_dim, 1))
        scores = nn.mul(nn.matmul(mem.keys, q),
                        1.0 / np.sqrt(self.cfg.attn_dim))   # (B, N, 1)
        weights = nn.softmax(scores, axis=1)
        context = nn.tsum(nn.mul(weights, mem.values), axis=1)  # (B, attn)
        return context, weights

    def decode_step(self, prev, state, mem: DecoderMemory, step, rng):
        """One autoregressive step.

        prev: Tensor (B, n_mels) in the normalized mel domain.
        Returns (frame (B, n_mels), gate (B, 1), new state, weights (B, N, 1)).
        """
        if not all(np.isfinite(h.data).all() for h in state.hidden):
            raise nn.GradientError("non-finite decoder state")
        pre = self.prenet(prev, rng)
        h_top = state.hidden[-1]
        pe = positional_encoding(step, self.cfg.attn_dim).astype(
            pre.data.dtype)
        query = nn.add(self.query_proj(nn.concat([pre, h_top], axis=1)), pe)
        context, weights = self.attend(query, mem, step)
        x = nn.concat([pre, context], axis=1)
        hidden, cell = list(state.hidden), list(state.cell)
        for layer in range(self.cfg.decoder_layers):
            h, c = nn.lstm_cell(x, hidden[layer], cell[layer],
                                self.dec_lstm.w_x[layer],
                                self.dec_lstm.w_h[layer],
                                self.dec_lstm.b[layer])
            hidden[layer], cell[layer] = h, c
            x = h
        new_top = hidden[-1]
        frame = self.frame_proj(nn.concat([new_top, context], axis=1))
        gate = nn.sigmoid(self.gate_proj(
            nn.concat([new_top, mem.summary], axis=1)))
        return frame, gate, nn.LstmState(hidden, cell), weights

    def _go_batch(self, batch):
        return nn.broadcast_to(nn.reshape(self.go_frame, (1, -1)),
                               (batch, self.cfg.n_mels))

    # -- full passes ---------------------------------------------------------
    def teacher_forced(self, vf, targets, tf_ratio, seed=0, step_hook=None):
        """Run the decoder for exactly the target length.

        vf: Tensor (B, N, D_v); targets: (B, T, n_mels) normalized mel.
        Each step consumes the ground-truth previous frame with probability
        ``tf_ratio``, otherwise the model's own previous output.
        Returns (frames (B, T, n_mels), gates (B, T, 1)) in the graph.
        """
        if not (0.0 <= tf_ratio <= 1.0):
            raise ValueError("tf_ratio must be in [0, 1]")
        targets = np.asarray(targets)
        if targets.ndim != 3 or targets.shape[1] < 1:
            raise ValueError("empty teacher-forcing target")
        drop_rng, tf_rng = [np.random.default_rng(c)
                            for c in np.random.SeedSequence(seed).spawn(2)]
        b, t_len, _ = targets.shape
        mem = self.encode_visual(vf)
        state = mem.state
        prev = self._go_batch(b)
        frames, gates = [], []
        for t in range(t_len):
            frame, gate, state, _ = self.decode_step(prev, state, mem, t,
                                                     drop_rng)
            frames.append(nn.reshape(frame, (b, 1, -1)))
            gates.append(nn.reshape(gate, (b, 1, 1)))
            forced = bool(tf_rng.random() < tf_ratio)
            if step_hook is not None:
                step_hook(t, forced)
            prev = nn.Tensor(targets[:, t]) if forced \
                else self._clamp_feedback(frame, self.cfg.mel_log_floor)
        return nn.concat(frames, axis=1), nn.concat(gates, axis=1)

    def generate(self, vf, audio_cfg: AudioConfig, seed=0, max_steps=None,
                 gate_threshold=None):
        """Free-running decoding from the trainable go-frame.

        Stops at the first gate above the threshold or at max_steps.
        Returns (Melspectrogram, gates (T,), attention (T, N)).
        """
        cfg = self.cfg
        max_steps = max_steps or cfg.max_steps
        threshold = gate_threshold if gate_threshold is not None \
            else cfg.gate_threshold
        drop_rng, _ = [np.random.default_rng(c)
                       for c in np.random.SeedSequence(seed).spawn(2)]
        if not isinstance(vf, nn.Tensor):
            vf = nn.Tensor(np.asarray(vf, dtype=np.float32)[None])
        mem = self.encode_visual(vf)
        state = mem.state
        prev = self._go_batch(1)
        frames, gates, attn = [], [], []
        for t in range(max_steps):
            frame, gate, state, weights = self.decode_step(prev, state, mem,
                                                           t, drop_rng)
            frames.append(frame.data[0].copy())
            gates.append(float(gate.data[0, 0]))
            attn.append(weights.data[0, :, 0].copy())
            prev = self._clamp_feedback(frame, self.cfg.mel_log_floor)
            if gates[-1] > threshold:
                break
        mel = np.maximum(self.denormalize_mel(np.stack(frames)),
                         np.log(audio_cfg.log_floor)).astype(np.float32)
        return (Melspectrogram(mel, audio_cfg), np.asarray(gates),
                np.stack(attn))


def teacher_forced_forward(decoder: MelDecoder, vf, target: Melspectrogram,
                           tf_ratio, seed=0, step_hook=None):
    """Single-sample wrapper returning normalized-domain prediction arrays."""
    targets = decoder.normalize_mel(target.frames)[None]
    frames, gates = decoder.teacher_forced(vf, targets, tf_ratio, seed,
                                           step_hook)
    return frames.data[0], gates.data[0, :, 0]
