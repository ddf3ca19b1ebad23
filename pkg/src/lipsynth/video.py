"""Lip-region video encoding: temporal-aware per-frame features fused with
the tiled speaker embedding into visual features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

LIP_SIZE = 48
EMBED_DIM = 256
FACE_FEATURE_DIM = 128
VISUAL_DIM = FACE_FEATURE_DIM + EMBED_DIM


@dataclass
class LipROISequence:
    """N cropped grayscale lip frames, values in [0, 1]."""
    frames: np.ndarray        # (N, LIP_SIZE, LIP_SIZE) float32
    fps: int = 25

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"need (N>=1, {LIP_SIZE}, {LIP_SIZE}) frames, "
                             f"got {self.frames.shape}")
        if self.frames.shape[1:] != (LIP_SIZE, LIP_SIZE):
            raise ValueError(f"lip crops must be {LIP_SIZE}x{LIP_SIZE}, got "
                             f"{self.frames.shape[1:]}")


@dataclass
class VisualFeatures:
    """Per-frame features with the speaker embedding appended to every row."""
    features: np.ndarray      # (N, VISUAL_DIM)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("visual features must be 2-d")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("visual features contain non-finite values")


def _to_gray(frame):
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 3:
        return frame.mean(axis=2)
    return frame


def _bilinear_resize(img, out_h, out_w):
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def crop_lip_roi(frame, landmarks=None, size=LIP_SIZE):
    """Crop the mouth region of one frame and resize to ``size`` x ``size``.

    With ``landmarks`` (mouth centroid as (row, col)) the crop window is
    centred there; otherwise the documented fallback is the lower-center
    half: rows [H/2, H), cols [W/4, 3W/4).
    """
    gray = _to_gray(frame)
    h, w = gray.shape
    if h < size or w < size:
        raise ValueError(f"frame {gray.shape} smaller than the {size}-pixel "
                         f"crop size")
    ch, cw = h // 2, w // 2
    if landmarks is None:
        r0, c0 = h // 2, w // 4
    else:
        row, col = float(landmarks[0]), float(landmarks[1])
        r0 = int(round(row - ch / 2))
        c0 = int(round(col - cw / 2))
        r0 = min(max(r0, 0), h - ch)
        c0 = min(max(c0, 0), w - cw)
    crop = gray[r0:r0 + ch, c0:c0 + cw]
    return _bilinear_resize(crop, size, size)


def crop_sequence(frames, landmarks=None, fps=25):
    """Apply crop_lip_roi to every frame of a video."""
    return LipROISequence(
        np.stack([crop_lip_roi(f, landmarks) for f in frames]), fps)


class VideoEncoder(nn.Module):
    """3-D conv stem for temporal awareness, 2-D extractor per frame, GAP.

    Temporal length is preserved exactly: N input frames give N feature rows.
    """

    def __init__(self, rng, stem_channels=16):
        self.stem = nn.Conv3d(1, stem_channels, (3, 5, 5), rng,
                              stride=(1, 2, 2), padding=(1, 2, 2))
        chans = [stem_channels, stem_channels * 2, stem_channels * 4,
                 stem_channels * 8]
        self.blocks = [nn.Conv2d(chans[i], chans[i + 1], 3, rng, stride=2,
                                 padding=1) for i in range(3)]

    def __call__(self, x):
        """x: Tensor (B, 1, N, H, W) -> Tensor (B, N, FACE_FEATURE_DIM)."""
        b, _, n, _, _ = x.shape
        y = nn.relu(self.stem(x))                        # (B, C, N, H/2, W/2)
        y = nn.transpose(y, (0, 2, 1, 3, 4))             # (B, N, C, h, w)
        y = nn.reshape(y, (b * n,) + y.shape[2:])
        for blk in self.blocks:
            y = nn.relu(blk(y))
        y = nn.global_avg_pool(y)                        # (B*N, C_out)
        return nn.reshape(y, (b, n, y.shape[1]))


def encode_frames(seq: LipROISequence, encoder: VideoEncoder):
    """Spec-level helper: numpy lip sequence in, (N, D_face) numpy out."""
    x = nn.Tensor(seq.frames[None, None])
    return encoder(x).data[0]


def fuse_visual_features(frame_feats, spk_embedding):
    """Tile the speaker embedding along N and concatenate to each row.

    Accepts Tensors (batched, (B, N, D)) or numpy (N, D); returns the same
    flavor. Row n of the result is [frame_feats_n || spk].
    """
    if isinstance(frame_feats, nn.Tensor):
        b, n, _ = frame_feats.shape
        spk_t = spk_embedding if isinstance(spk_embedding, nn.Tensor) \
            else nn.Tensor(np.asarray(spk_embedding, dtype=np.float32))
        if spk_t.ndim == 1:
            spk_t = nn.reshape(spk_t, (1, 1, -1))
        elif spk_t.ndim == 2:
            spk_t = nn.reshape(spk_t, (b, 1, -1))
        tiled = nn.broadcast_to(spk_t, (b, n, spk_t.shape[2]))
        return nn.concat([frame_feats, tiled], axis=2)
    feats = np.asarray(frame_feats, dtype=np.float32)
    spk = np.asarray(spk_embedding, dtype=np.float32).reshape(-1)
    tiled = np.broadcast_to(spk, (feats.shape[0], spk.size))
    return VisualFeatures(np.concatenate([feats, tiled], axis=1))
