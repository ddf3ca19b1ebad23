"""Audio <-> spectrogram transforms: STFT, mel filterbank, Griffin-Lim.

All transforms are pure functions of their inputs plus explicit seeds.
Internally computed in float64 for numerical headroom; stored mel frames
and waveforms are float32/float64 as produced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class AudioError(ValueError):
    """Raised for invalid audio inputs or configurations."""


@dataclass
class AudioConfig:
    """STFT/mel analysis settings. Defaults give 80 mel frames per second
    of 16 kHz audio (hop 12.5 ms), i.e. 3.2 mel frames per 25 fps video frame."""
    sample_rate: int = 16000
    n_fft: int = 800
    hop: int = 200
    n_mels: int = 80
    fmin: float = 55.0
    fmax: float = 7600.0
    # Floor sits above the phase-retrieval noise floor so silence analyzes
    # identically before and after reconstruction.
    log_floor: float = 1e-2

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise AudioError(f"hop {self.hop} exceeds n_fft {self.n_fft}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise AudioError(
                f"need 0 <= fmin < fmax <= sr/2, got [{self.fmin}, {self.fmax}] "
                f"at sr {self.sample_rate}")
        if self.n_mels < 1:
            raise AudioError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise AudioError("log_floor must be positive")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError("sample rate must be positive")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Melspectrogram:
    """T x n_mels natural-log amplitudes, floored at ln(log_floor)."""
    frames: np.ndarray
    config: AudioConfig = field(default_factory=AudioConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioError(f"mel frames must be (T>=1, n_mels), got "
                             f"{self.frames.shape}")
        floor = np.log(self.config.log_floor)
        if self.frames.min() < floor - 1e-4:
            raise AudioError("mel entries below the configured log floor")

    @property
    def n_frames(self):
        return self.frames.shape[0]


def hann_window(n):
    """Periodic Hann window (COLA-compatible at hop = n/4)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(wave: Waveform, cfg: AudioConfig, window="hann", center=True):
    """Short-time Fourier transform, frames along rows: (T, n_fft/2 + 1).

    With ``center`` the signal is reflect-padded by n_fft//2 so
    T = 1 + len//hop; frame t is centred on sample t*hop.
    """
    x = np.asarray(wave.samples, dtype=np.float64)
    if len(x) < cfg.n_fft:
        raise AudioError(f"signal of {len(x)} samples shorter than one "
                         f"window ({cfg.n_fft})")
    if window == "hann":
        win = hann_window(cfg.n_fft)
    elif window == "rect":
        win = np.ones(cfg.n_fft)
    else:
        raise AudioError(f"unknown window {window!r}")
    if center:
        pad = cfg.n_fft // 2
        x = np.pad(x, (pad, pad), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop]
    return np.fft.rfft(frames * win, axis=1)


def istft(spec, cfg: AudioConfig, center=True):
    """Inverse STFT by windowed overlap-add with squared-window normalization."""
    spec = np.asarray(spec)
    n_frames = spec.shape[0]
    win = hann_window(cfg.n_fft)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    length = (n_frames - 1) * cfg.hop + cfg.n_fft
    out = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(n_frames):
        start = t * cfg.hop
        out[start:start + cfg.n_fft] += frames[t]
        wsum[start:start + cfg.n_fft] += win * win
    good = wsum > 1e-10
    out[good] /= wsum[good]
    if center:
        pad = cfg.n_fft // 2
        out = out[pad:length - pad]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: AudioConfig):
    """Triangular mel filters as an (n_mels, n_fft/2+1) matrix.

    Peaks sit at mel-equidistant points between fmin and fmax. Raises if
    the FFT resolution cannot give every filter a nonzero row.
    """
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax),
                          cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    fb = np.zeros((cfg.n_mels, cfg.n_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    empty = np.where(fb.sum(axis=1) <= 0)[0]
    if empty.size:
        raise AudioError(
            f"n_mels {cfg.n_mels} too large for FFT resolution: filter(s) "
            f"{empty.tolist()} cover no bin")
    return fb


def filter_centers_hz(cfg: AudioConfig):
    """Peak frequency of each mel filter (the interior mel-spaced points)."""
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax),
                          cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def wav_to_mel(wave: Waveform, cfg: AudioConfig):
    """log-mel analysis: ln(max(filterbank @ |STFT|, log_floor))."""
    mag = np.abs(stft(wave, cfg))
    fb = mel_filterbank(cfg)
    mel = np.log(np.maximum(mag @ fb.T, cfg.log_floor))
    return Melspectrogram(mel.astype(np.float32), cfg)


def spectral_convergence(estimate_mag, reference_mag):
    """||A - M||_F / ||M||_F, the Griffin-Lim progress measure."""
    ref_norm = np.linalg.norm(reference_mag)
    if ref_norm == 0:
        return 0.0
    return float(np.linalg.norm(estimate_mag - reference_mag) / ref_norm)


# Below this output peak the signal is treated as silence and left unscaled;
# otherwise synthesis rescales the peak to exactly 1.
_SILENCE_PEAK = 1e-3


def _peak_normalize(x):
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > _SILENCE_PEAK:
        x = x / peak
    return x


def griffin_lim(magnitude, cfg: AudioConfig, iterations=60, seed=0,
                return_sc=False):
    """Iterative phase retrieval from a (T, n_fft/2+1) magnitude matrix.

    Starts from seeded random phase and alternates iSTFT / STFT with
    magnitude replacement. The spectral-convergence error is non-increasing
    across iterations. Output is peak-normalized.
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if np.any(magnitude < 0):
        raise AudioError("griffin_lim: magnitude must be non-negative")
    if iterations < 1:
        raise AudioError("griffin_lim: iterations must be >= 1")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, magnitude.shape)
    spec = magnitude * np.exp(1j * phase)
    sc_trace = []
    for _ in range(iterations):
        x = istft(spec, cfg)
        reana = stft(Waveform(x, cfg.sample_rate), cfg)
        sc_trace.append(spectral_convergence(np.abs(reana), magnitude))
        spec = magnitude * np.exp(1j * np.angle(reana))
    x = _peak_normalize(istft(spec, cfg))
    wave = Waveform(x, cfg.sample_rate)
    if return_sc:
        return wave, sc_trace
    return wave


def mel_to_linear(mel: Melspectrogram):
    """Mel -> linear magnitude by filterbank pseudo-inverse, clipped at 0."""
    fb = mel_filterbank(mel.config)
    amp = np.exp(mel.frames.astype(np.float64))
    return np.maximum(amp @ np.linalg.pinv(fb).T, 0.0)


def mel_to_wav(mel: Melspectrogram, cfg: AudioConfig = None, iterations=60,
               seed=0):
    """Invert a melspectrogram to audio: pseudo-inverse then Griffin-Lim."""
    if cfg is not None and cfg.n_mels != mel.config.n_mels:
        raise AudioError("mel_to_wav: config n_mels mismatch")
    cfg = cfg or mel.config
    return griffin_lim(mel_to_linear(mel), cfg, iterations, seed)


def chunked_synthesize(mel_chunks, cfg: AudioConfig = None, iterations=60,
                       seed=0):
    """Concatenate mel chunks along time, then invert in a single pass.

    A single inversion over the concatenation lets phase retrieval smooth
    the chunk boundaries instead of stitching independent waveforms.
    """
    chunks = list(mel_chunks)
    if not chunks:
        raise AudioError("chunked_synthesize: no chunks")
    n_mels = chunks[0].frames.shape[1]
    for c in chunks:
        if c.frames.shape[1] != n_mels:
            raise AudioError(
                f"chunked_synthesize: n_mels mismatch "
                f"({c.frames.shape[1]} vs {n_mels})")
    merged = Melspectrogram(
        np.concatenate([c.frames for c in chunks], axis=0), chunks[0].config)
    return mel_to_wav(merged, cfg, iterations, seed)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

MEL_MAGIC = b"MEL1"


def write_wav(path, wave: Waveform):
    """Write mono 16-bit PCM RIFF."""
    samples = np.clip(wave.samples, -1.0, 1.0)
    ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    data = ints.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, wave.sample_rate,
                            wave.sample_rate * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


def read_wav(path):
    """Read mono 16-bit PCM RIFF; compressed/float formats are rejected."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 44 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        size, = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise AudioError(f"{path}: missing fmt/data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise AudioError(f"{path}: compressed WAV (format tag {audio_format}) "
                         "not supported")
    if channels != 1:
        raise AudioError(f"{path}: expected mono, got {channels} channels")
    if bits != 16:
        raise AudioError(f"{path}: expected 16-bit samples, got {bits}")
    ints = np.frombuffer(data, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, sample_rate)


def write_mel(path, mel: Melspectrogram):
    """Binary mel file: magic, u32 T, u32 n_mels, u32 sr, u32 hop, f32 data."""
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<IIII", frames.shape[0], frames.shape[1],
                            mel.config.sample_rate, mel.config.hop))
        f.write(frames.tobytes())


def read_mel(path, cfg: AudioConfig = None):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MEL_MAGIC:
            raise AudioError(f"{path}: not a mel file (magic {magic!r})")
        t, n_mels, sr, hop = struct.unpack("<IIII", f.read(16))
        frames = np.frombuffer(f.read(4 * t * n_mels),
                               dtype="<f4").reshape(t, n_mels)
    if cfg is None:
        cfg = AudioConfig(sample_rate=sr, hop=hop, n_mels=n_mels)
    elif (cfg.sample_rate, cfg.hop, cfg.n_mels) != (sr, hop, n_mels):
        raise AudioError(f"{path}: header ({sr}, {hop}, {n_mels}) disagrees "
                         "with supplied config")
    return Melspectrogram(frames.copy(), cfg)
