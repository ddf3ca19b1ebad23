"""Full silent-video-to-melspectrogram network: video encoder + decoder."""

from __future__ import annotations

import numpy as np

from . import nn
from .decoder import DecoderConfig, MelDecoder
from .dsp import AudioConfig
from .speaker import SpeakerEmbedding
from .video import LipROISequence, VideoEncoder, fuse_visual_features


class Synthesizer(nn.Module):
    """Lip frames + speaker embedding -> melspectrogram, autoregressively."""

    def __init__(self, audio_cfg: AudioConfig = None,
                 dec_cfg: DecoderConfig = None, seed=0):
        self.audio_cfg = audio_cfg or AudioConfig()
        self.dec_cfg = dec_cfg or DecoderConfig()
        rng = np.random.default_rng(seed)
        self.video_encoder = VideoEncoder(rng)
        self.decoder = MelDecoder(self.dec_cfg, rng)

    def visual_features(self, lips, embeddings):
        """lips: Tensor (B, 1, N, H, W); embeddings: Tensor/array (B, 256)."""
        feats = self.video_encoder(lips)
        return fuse_visual_features(feats, embeddings)

    def _lips_tensor(self, lips: LipROISequence):
        return nn.Tensor(lips.frames[None, None])

    def infer(self, lips: LipROISequence, spk: SpeakerEmbedding, seed=0,
              max_steps=None, gate_threshold=None):
        """Free-running synthesis for one clip.

        Returns (Melspectrogram, gate trace, attention matrix (T, N)).
        """
        vf = self.visual_features(self._lips_tensor(lips),
                                  spk.values.reshape(1, -1))
        return self.decoder.generate(vf, self.audio_cfg, seed=seed,
                                     max_steps=max_steps,
                                     gate_threshold=gate_threshold)

    def infer_chunked(self, lips: LipROISequence, spk: SpeakerEmbedding,
                      chunk_seconds=2.0, seed=0, gate_threshold=None):
        """Split long inputs into fixed-length chunks and decode each.

        Returns (list of Melspectrogram, list of attention matrices). The
        caller concatenates and inverts in one pass so phase retrieval
        smooths the chunk boundaries.
        """
        frames_per_chunk = max(1, int(round(chunk_seconds * lips.fps)))
        mel_per_frame = self.audio_cfg.sample_rate / (self.audio_cfg.hop
                                                      * lips.fps)
        chunks, attns = [], []
        for i, start in enumerate(range(0, lips.frames.shape[0],
                                        frames_per_chunk)):
            part = LipROISequence(lips.frames[start:start + frames_per_chunk],
                                  lips.fps)
            bound = int(np.ceil(part.frames.shape[0] * mel_per_frame * 1.5)) + 8
            mel, _, attn = self.infer(part, spk, seed=seed + i,
                                      max_steps=min(self.dec_cfg.max_steps,
                                                    bound),
                                      gate_threshold=gate_threshold)
            chunks.append(mel)
            attns.append(attn)
        return chunks, attns


def save_synthesizer(path, model: Synthesizer):
    nn.save_checkpoint(path, dict(model.named_parameters()))


def load_synthesizer(path, audio_cfg: AudioConfig = None,
                     dec_cfg: DecoderConfig = None):
    model = Synthesizer(audio_cfg, dec_cfg, seed=0)
    model.load_state_dict(nn.load_checkpoint(path))
    return model
