"""Synthetic audiovisual corpus and face-gated clip segmentation.

The corpus stands in for real lip-reading footage at desk scale: each
identity gets a procedural face and a distinct voice, each vocabulary word
a mouth shape and a tone pattern, so lip pixels genuinely predict audio
content and the face predicts the voice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .dsp import AudioConfig, Melspectrogram, Waveform, read_wav, wav_to_mel, write_wav

FPS = 25
FRAME_SIZE = 96          # rendered video frames are FRAME_SIZE x FRAME_SIZE gray
FACE_SIZE = 64           # speaker-encoder face images are 64 x 64 x 3
TOKEN_SECONDS = 0.4      # one word = 10 video frames = 32 mel hops
BASE_F0 = 160.0          # lowest identity fundamental, Hz
F0_SPACING = 80.0        # per-identity spacing, Hz (>= 30 required)
_TONE_LO, _TONE_HI = 500.0, 4200.0
# All voice/tone frequencies sit on this grid so every component advances an
# integer number of cycles per analysis hop (16000/200 = 80 Hz), which keeps
# Griffin-Lim phase retrieval well conditioned.
_FREQ_GRID = 80.0


@dataclass
class SyntheticSample:
    frames: np.ndarray          # (N, FRAME_SIZE, FRAME_SIZE) float32 in [0,1]
    audio: Waveform
    identity: str
    tokens: list
    face: np.ndarray            # (FACE_SIZE, FACE_SIZE, 3) float32 in [0,1]
    fps: int = FPS

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sample must carry at least one token")
        n = self.frames.shape[0]
        expected = n / self.fps
        hop_slack = 1.0 * 256 / self.audio.sample_rate
        if abs(self.audio.duration - expected) > hop_slack:
            raise ValueError(
                f"audio duration {self.audio.duration:.4f}s disagrees with "
                f"{n} frames at {self.fps} fps")


@dataclass
class Segment:
    start_s: float
    end_s: float
    frame_range: tuple

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ValueError("segment must have positive duration")

    @property
    def duration(self):
        return self.end_s - self.start_s


class FaceMatcher:
    """Pluggable per-frame face recognition. Implementations must be
    deterministic for a given (frame, target) pair."""

    def match(self, frame, target_face):
        raise NotImplementedError


class TemplateFaceMatcher(FaceMatcher):
    """Synthetic stand-in: a frame matches if it correlates strongly with
    the target identity's neutral rendered frame."""

    def __init__(self, threshold=0.75):
        self.threshold = threshold

    def match(self, frame, target_face):
        a = np.asarray(frame, dtype=np.float64).reshape(-1)
        b = np.asarray(target_face, dtype=np.float64).reshape(-1)
        if a.size != b.size:
            return False
        a = a - a.mean()
        b = b - b.mean()
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        if denom == 0:
            return False
        return float(a @ b / denom) >= self.threshold


# ---------------------------------------------------------------------------
# procedural identities and vocabulary
# ---------------------------------------------------------------------------

def identity_params(index, n_identities):
    """Deterministic per-identity appearance and voice parameters."""
    rng = np.random.default_rng(1000 + index)
    hue = index / max(1, n_identities)
    skin = np.array([0.45 + 0.4 * hue, 0.35 + 0.3 * (1 - hue),
                     0.3 + 0.25 * ((index * 7) % 5) / 5.0])
    return {
        "id": f"id{index:02d}",
        "f0": BASE_F0 + F0_SPACING * index,
        "skin": np.clip(skin, 0.05, 0.95),
        "hair": np.clip(rng.uniform(0.0, 0.6, size=3), 0.0, 1.0),
        "face_radius": 0.34 + 0.05 * ((index * 3) % 4) / 4.0,
        "eye_gap": 0.16 + 0.04 * ((index * 5) % 3) / 3.0,
        "gray": 0.35 + 0.5 * hue,
        "timbre": 0.25 + 0.5 * ((index * 11) % 7) / 7.0,
    }


def token_params(k, vocab_size):
    """Deterministic per-word tone frequency and mouth geometry.

    Words share one mouth AREA (width x height constant) and differ by
    aspect ratio, so the visible opening area tracks the amplitude envelope
    alone while the shape still identifies the word."""
    mel_lo = 2595.0 * np.log10(1.0 + _TONE_LO / 700.0)
    mel_hi = 2595.0 * np.log10(1.0 + _TONE_HI / 700.0)
    mel = mel_lo + (mel_hi - mel_lo) * k / max(1, vocab_size - 1)
    freq = 700.0 * (10.0 ** (mel / 2595.0) - 1.0)
    freq = _FREQ_GRID * max(2.0, round(freq / _FREQ_GRID))
    width = 0.5 * (2.5 ** (k / max(1, vocab_size - 1)))
    return {
        "word": f"w{k:02d}",
        "freq": float(freq),
        "width": width,
        "height": 0.5 / width,
    }


def _envelope(n):
    """Open-sustain-close trajectory over one token: two-frame attack and
    release around a flat top. The sustained plateau keeps decoder targets
    mostly piecewise-constant; the ramps give band envelopes enough
    modulation for intelligibility measurement and phase retrieval."""
    env = np.ones(n)
    ramp = min(2, n // 2)
    steps = np.linspace(0.15, 1.0, ramp + 1)[:-1]
    env[:ramp] = steps
    env[n - ramp:] = steps[::-1]
    return env


def render_face_image(ident):
    """64 x 64 x 3 color face template for the speaker encoder."""
    size = FACE_SIZE
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    img = np.zeros((size, size, 3), dtype=np.float64)
    img[:] = 0.12
    img[yy < 0.22] = ident["hair"]
    cx, cy, r = 0.5, 0.55, ident["face_radius"] * 1.25
    face = ((xx - cx) ** 2 / r ** 2 + (yy - cy) ** 2 / (1.25 * r) ** 2) <= 1.0
    img[face] = ident["skin"]
    gap = ident["eye_gap"]
    for ex in (cx - gap, cx + gap):
        eye = ((xx - ex) ** 2 + (yy - 0.45) ** 2) <= 0.0012
        img[eye] = 0.05
    mouth = ((xx - cx) ** 2 / 0.012 + (yy - 0.74) ** 2 / 0.0025) <= 1.0
    img[mouth] = 0.25 * ident["skin"]
    return img.astype(np.float32)


def render_video_frame(ident, aperture, width_scale):
    """One grayscale video frame; the mouth sits in the lower-center half
    so the landmark-free lip crop captures it."""
    size = FRAME_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.08)
    cx, my = size / 2.0, size * 0.75
    r = ident["face_radius"] * size * 1.3
    face = ((xx - cx) ** 2 / r ** 2 + (yy - size * 0.55) ** 2 / (1.3 * r) ** 2) <= 1.0
    img[face] = ident["gray"]
    gap = ident["eye_gap"] * size
    for ex in (cx - gap, cx + gap):
        eye = ((xx - ex) ** 2 + (yy - size * 0.42) ** 2) <= 4.0
        img[eye] = 0.02
    a = max(1e-6, width_scale) * size * 0.16
    b = max(1e-6, aperture) * size * 0.11
    # anti-aliased ellipse: sub-pixel apertures shade partially, so the
    # visible mouth area varies continuously with the opening
    dist = (xx - cx) ** 2 / a ** 2 + (yy - my) ** 2 / b ** 2
    coverage = np.clip((1.15 - dist) / 0.3, 0.0, 1.0)
    img = img * (1.0 - coverage) + 0.02 * coverage
    return img.astype(np.float32)


def mouth_open_area(frame):
    """Darkness-weighted pixel area of the mouth region in the
    lower-center half; fractional so sub-pixel openings register."""
    h, w = frame.shape
    crop = frame[h // 2:, w // 4:3 * w // 4]
    darkness = np.clip((0.06 - crop) / 0.06, 0.0, 1.0)
    return float(darkness.sum())


def token_audio(tok, ident, sample_rate, include_voice=True, extra=0):
    """Waveform samples for one token slot; amplitude follows the mouth.

    ``extra`` appends that many samples past the nominal slot (for
    crossfading into the next token)."""
    n = int(round(TOKEN_SECONDS * sample_rate))
    t = np.arange(n + extra) / sample_rate
    frames = int(round(TOKEN_SECONDS * FPS))
    env = np.repeat(_envelope(frames), n // frames)
    if extra:
        env = np.concatenate([env, np.full(extra, env[-1])])
    # 25 ms smoothing so the attack/release steps do not click
    kernel = np.full(401, 1.0 / 401)
    env = np.convolve(np.pad(env, 200, mode="edge"), kernel, mode="valid")
    loud = 0.85
    sig = 0.75 * np.sin(2 * np.pi * tok["freq"] * t)
    sig += 0.2 * np.sin(2 * np.pi * 2 * tok["freq"] * t)
    if include_voice:
        sig += 0.35 * np.sin(2 * np.pi * ident["f0"] * t)
        sig += 0.15 * ident["timbre"] * np.sin(2 * np.pi * 2 * ident["f0"] * t)
    return loud * env * sig


def generate_sample(ident, toks, sample_rate=16000):
    frames = []
    frames_per_token = int(round(TOKEN_SECONDS * FPS))
    slot = int(round(TOKEN_SECONDS * sample_rate))
    fade = int(0.015 * sample_rate)
    samples = np.zeros(slot * len(toks))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    for k, tok in enumerate(toks):
        env = _envelope(frames_per_token)
        for i in range(frames_per_token):
            frames.append(render_video_frame(ident, tok["height"] * env[i],
                                             tok["width"]))
        # each token rings `fade` samples into the next slot with a
        # raised-cosine handover so spectral switches span a couple of mel
        # frames instead of a hard edge
        last = k == len(toks) - 1
        sig = token_audio(tok, ident, sample_rate,
                          extra=0 if last else fade)
        if k > 0:
            sig = sig.copy()
            sig[:fade] *= ramp
        if not last:
            sig[slot:] *= ramp[::-1]
        start = k * slot
        samples[start:start + len(sig)] += sig
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples * (0.98 / peak)
    return SyntheticSample(
        frames=np.stack(frames),
        audio=Waveform(samples, sample_rate),
        identity=ident["id"],
        tokens=[t["word"] for t in toks],
        face=render_face_image(ident),
    )


def generate_corpus(n_identities, samples_per_identity, vocab_size, seed,
                    tokens_per_sample=3, sample_rate=16000):
    """Deterministic corpus of (video, audio, face, transcript) samples."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    vocab = [token_params(k, vocab_size) for k in range(vocab_size)]
    samples = []
    for i in range(n_identities):
        ident = identity_params(i, n_identities)
        for _ in range(samples_per_identity):
            picks = rng.integers(0, vocab_size, size=tokens_per_sample)
            samples.append(generate_sample(ident, [vocab[k] for k in picks],
                                           sample_rate))
    return samples


def token_mel_templates(cfg: AudioConfig, vocab_size):
    """Mean log-mel profile of each clean token tone (voice-free),
    restricted to bands above the identity F0 range."""
    centers = 700.0 * (10.0 ** (np.linspace(
        2595.0 * np.log10(1.0 + cfg.fmin / 700.0),
        2595.0 * np.log10(1.0 + cfg.fmax / 700.0), cfg.n_mels + 2)[1:-1]
        / 2595.0) - 1.0)
    band_mask = centers >= 450.0
    profiles = []
    neutral = identity_params(0, 1)
    for k in range(vocab_size):
        tok = token_params(k, vocab_size)
        sig = token_audio(tok, neutral, cfg.sample_rate, include_voice=False)
        mel = wav_to_mel(Waveform(sig / max(1e-9, np.max(np.abs(sig))),
                                  cfg.sample_rate), cfg)
        profiles.append(mel.frames.mean(axis=0))
    return np.stack(profiles), band_mask


def classify_tokens(wave: Waveform, cfg: AudioConfig, vocab_size):
    """Template-matching word classifier over an utterance's melspectrogram.

    Slices the mel into fixed word-length slots and assigns each slot the
    vocabulary entry with the highest centered cosine similarity.
    """
    templates, mask = token_mel_templates(cfg, vocab_size)
    mel = wav_to_mel(wave, cfg).frames
    slot_frames = int(round(TOKEN_SECONDS * cfg.sample_rate / cfg.hop))
    n_slots = max(1, int(round(wave.duration / TOKEN_SECONDS)))
    words = []
    ref = templates[:, mask] - templates[:, mask].mean(axis=1, keepdims=True)
    for s in range(n_slots):
        sl = mel[s * slot_frames:min((s + 1) * slot_frames, mel.shape[0])]
        if sl.shape[0] == 0:
            break
        prof = sl.mean(axis=0)[mask]
        prof = prof - prof.mean()
        sims = ref @ prof / (np.linalg.norm(ref, axis=1)
                             * max(1e-9, np.linalg.norm(prof)))
        words.append(f"w{int(np.argmax(sims)):02d}")
    return words


# ---------------------------------------------------------------------------
# clip segmentation over per-frame face detections
# ---------------------------------------------------------------------------

def yld_segment(detections, fps, min_s=1.0, max_s=3.0):
    """Split per-frame detections into face-positive segments of [min_s, max_s].

    Maximal runs of consecutive positives are located; runs under min_s are
    dropped; longer runs are split greedily into max_s pieces. A trailing
    piece shorter than min_s is merged into its predecessor when the merge
    stays within max_s, otherwise dropped.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    min_frames = int(np.ceil(min_s * fps - 1e-9))
    max_frames = int(np.floor(max_s * fps + 1e-9))
    detections = list(bool(d) for d in detections)
    segments = []
    i = 0
    n = len(detections)
    while i < n:
        if not detections[i]:
            i += 1
            continue
        j = i
        while j < n and detections[j]:
            j += 1
        run = j - i
        if run >= min_frames:
            pieces = []
            start = i
            while j - start > max_frames:
                pieces.append((start, start + max_frames))
                start += max_frames
            rest = j - start
            if rest >= min_frames:
                pieces.append((start, j))
            elif rest > 0 and pieces:
                merged = (pieces[-1][0], j)
                if merged[1] - merged[0] <= max_frames:
                    pieces[-1] = merged
            for a, b in pieces:
                segments.append(Segment(a / fps, b / fps, (a, b)))
        i = j
    return segments


def extract_clips(frames, audio: Waveform, segments, fps=FPS):
    """Cut (frame range, audio range) pairs for each segment."""
    frames = np.asarray(frames)
    clips = []
    for seg in segments:
        a, b = seg.frame_range
        if a < 0 or b > frames.shape[0]:
            raise ValueError(f"segment frames [{a}, {b}) outside video of "
                             f"{frames.shape[0]} frames")
        s0 = int(round(seg.start_s * audio.sample_rate))
        s1 = int(round(seg.end_s * audio.sample_rate))
        if s1 > len(audio.samples):
            raise ValueError("segment audio range outside waveform")
        clips.append((frames[a:b],
                      Waveform(audio.samples[s0:s1], audio.sample_rate)))
    return clips


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------

def write_corpus(samples, root):
    """Per-sample directory: numbered PGM frames, WAV audio, PPM face,
    meta.json with identity/tokens/fps."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = root / f"sample{i:04d}"
        d.mkdir(exist_ok=True)
        for n, frame in enumerate(s.frames):
            imgio.write_pgm(d / f"frame_{n:04d}.pgm", frame)
        write_wav(d / "audio.wav", s.audio)
        imgio.write_ppm(d / "face.ppm", s.face)
        (d / "meta.json").write_text(json.dumps(
            {"identity": s.identity, "tokens": s.tokens, "fps": s.fps}))


def read_corpus(root):
    root = Path(root)
    samples = []
    for d in sorted(root.glob("sample*")):
        meta = json.loads((d / "meta.json").read_text())
        frames = np.stack([imgio.read_pgm(p)
                           for p in sorted(d.glob("frame_*.pgm"))])
        samples.append(SyntheticSample(
            frames=frames,
            audio=read_wav(d / "audio.wav"),
            identity=meta["identity"],
            tokens=meta["tokens"],
            face=imgio.read_ppm(d / "face.ppm"),
            fps=meta["fps"],
        ))
    if not samples:
        raise ValueError(f"no samples found under {root}")
    return samples


def write_identity_manifest(samples, root, path):
    """UTF-8 JSON manifest binding frames and audio per identity."""
    root = Path(root)
    entries = {}
    for i, s in enumerate(samples):
        d = root / f"sample{i:04d}"
        entry = entries.setdefault(s.identity, {"id": s.identity,
                                                "frames": [], "audio": None})
        entry["frames"].extend(
            str(d / f"frame_{n:04d}.pgm") for n in range(s.frames.shape[0]))
        if entry["audio"] is None:
            entry["audio"] = str(d / "audio.wav")
    Path(path).write_text(json.dumps(list(entries.values()), indent=1))


def read_identity_manifest(path):
    entries = json.loads(Path(path).read_text())
    for e in entries:
        if not {"id", "frames", "audio"} <= set(e):
            raise ValueError("manifest entries need id/frames/audio")
    return entries
