"""Qualitative probe: decode a speaker embedding back into a face image.

A projection maps the 256-dim embedding to a 4x4x128 seed which four
transposed-conv blocks upsample to 64x64x3. Trained with plain per-pixel
L2 against ground-truth faces; the embedding encoder is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .speaker import EMBED_DIM, SpeakerEmbedding


class FaceDecoder(nn.Module):
    def __init__(self, rng, base_channels=128):
        c = base_channels
        self.proj = nn.Linear(EMBED_DIM, 4 * 4 * c, rng)
        self.ups = [
            nn.ConvTranspose2d(c, c // 2, 4, rng, stride=2, padding=1),
            nn.ConvTranspose2d(c // 2, c // 4, 4, rng, stride=2, padding=1),
            nn.ConvTranspose2d(c // 4, c // 8, 4, rng, stride=2, padding=1),
            nn.ConvTranspose2d(c // 8, 3, 4, rng, stride=2, padding=1),
        ]
        self.base_channels = c

    def forward(self, emb):
        """emb: Tensor (B, 256) -> Tensor (B, 3, 64, 64) in [0, 1]."""
        b = emb.shape[0]
        y = nn.reshape(self.proj(emb), (b, self.base_channels, 4, 4))
        for i, up in enumerate(self.ups):
            y = up(y)
            if i < len(self.ups) - 1:
                y = nn.relu(y)
        return nn.mul(nn.add(nn.tanh(y), 1.0), 0.5)


def decode_face(decoder: FaceDecoder, emb: SpeakerEmbedding):
    """Deterministic embedding -> (64, 64, 3) image in [0, 1]."""
    values = emb.values if isinstance(emb, SpeakerEmbedding) \
        else np.asarray(emb, dtype=np.float32)
    if values.size != EMBED_DIM:
        raise ValueError(f"embedding must have {EMBED_DIM} dims")
    out = decoder.forward(nn.Tensor(values.reshape(1, -1)))
    return np.transpose(out.data[0], (1, 2, 0)).astype(np.float32)


@dataclass
class FaceDecoderTrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0


@dataclass
class FaceDecoderReport:
    losses: list = field(default_factory=list)


def train_face_decoder(pairs, cfg: FaceDecoderTrainConfig = None,
                       decoder: FaceDecoder = None):
    """Minimize mean per-pixel squared error over (embedding, face) pairs.

    Embeddings are precomputed inputs; only decoder parameters update.
    """
    cfg = cfg or FaceDecoderTrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training set")
    embs = np.stack([p[0].values if isinstance(p[0], SpeakerEmbedding)
                     else np.asarray(p[0], dtype=np.float32) for p in pairs])
    faces = np.stack([np.transpose(np.asarray(p[1], dtype=np.float32),
                                   (2, 0, 1)) for p in pairs])
    rng = np.random.default_rng(cfg.seed)
    decoder = decoder or FaceDecoder(np.random.default_rng(cfg.seed + 1))
    opt = nn.Adam(decoder.trainable_parameters(), lr=cfg.lr)
    report = FaceDecoderReport()
    n = len(pairs)
    for step in range(cfg.steps):
        idx = rng.permutation(n)[:min(cfg.batch_size, n)]
        out = decoder.forward(nn.Tensor(embs[idx]))
        loss = nn.tmean(nn.square(nn.sub(out, faces[idx])))
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        report.losses.append(loss.item())
    return decoder, report
