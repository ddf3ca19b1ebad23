"""Speech evaluation: STOI, ESTOI, word error rate, spectral fidelity.

STOI/ESTOI follow the published short-time objective intelligibility
procedure: 10 kHz analysis, 1/3-octave band envelopes over 384 ms segments,
clipped (STOI) or mean/variance normalized (ESTOI) correlations averaged
over bands and segments. PESQ is deliberately not implemented; reports
carry ``"pesq": "unavailable"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import resample_poly

from .dsp import Melspectrogram, Waveform

_FS = 10000          # analysis rate, Hz
_FRAME = 256         # analysis window, samples at 10 kHz
_HOP = 128
_NFFT = 512
_NBANDS = 15         # 1/3-octave bands
_MINFREQ = 150.0     # centre of the lowest band, Hz
_SEG = 30            # frames per short-time segment (384 ms)
_BETA_DB = -15.0     # STOI lower signal-to-distortion clip
_DYN_RANGE = 40.0    # silent-frame removal threshold, dB


class MetricError(ValueError):
    """Raised for inputs a metric cannot be computed on."""


@dataclass
class MetricReport:
    stoi: float
    estoi: float
    mel_mse: float
    spectral_convergence: float
    wer: Optional[float] = None

    def to_json(self):
        body = {
            "stoi": self.stoi,
            "estoi": self.estoi,
            "mel_mse": self.mel_mse,
            "spectral_convergence": self.spectral_convergence,
            "wer": self.wer,
            "pesq": "unavailable",
        }
        return json.dumps(body, indent=1)


def _resample_to_analysis_rate(wave: Waveform):
    if wave.sample_rate == _FS:
        return np.asarray(wave.samples, dtype=np.float64)
    from math import gcd
    g = gcd(_FS, wave.sample_rate)
    return resample_poly(np.asarray(wave.samples, dtype=np.float64),
                         _FS // g, wave.sample_rate // g)


def _frame_signal(x, window):
    n = 1 + (len(x) - _FRAME) // _HOP
    idx = np.arange(_FRAME)[None, :] + _HOP * np.arange(n)[:, None]
    return x[idx] * window


def _remove_silent_frames(x, y):
    """Drop frames (of both signals) where the clean signal is more than
    _DYN_RANGE dB below its loudest frame, then overlap-add back."""
    win = np.hanning(_FRAME + 2)[1:-1]
    xf = _frame_signal(x, win)
    yf = _frame_signal(y, win)
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-12)
    keep = energy > energy.max() - _DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    if xf.shape[0] == 0:
        raise MetricError("clean signal is silent")
    out_len = (xf.shape[0] - 1) * _HOP + _FRAME
    xs, ys, norm = np.zeros(out_len), np.zeros(out_len), np.zeros(out_len)
    for i in range(xf.shape[0]):
        s = i * _HOP
        xs[s:s + _FRAME] += xf[i]
        ys[s:s + _FRAME] += yf[i]
        norm[s:s + _FRAME] += win * win
    good = norm > 1e-12
    xs[good] /= norm[good]
    ys[good] /= norm[good]
    return xs, ys


def _third_octave_matrix():
    """Band matrix (bands x FFT bins): 1 inside each 1/3-octave band."""
    freqs = np.arange(_NFFT // 2 + 1) * _FS / _NFFT
    centers = _MINFREQ * 2.0 ** (np.arange(_NBANDS) / 3.0)
    lo = centers / 2.0 ** (1.0 / 6.0)
    hi = centers * 2.0 ** (1.0 / 6.0)
    mat = np.zeros((_NBANDS, len(freqs)))
    for b in range(_NBANDS):
        mat[b] = (freqs >= lo[b]) & (freqs < hi[b])
    return mat


def _band_envelopes(x):
    win = np.hanning(_FRAME + 2)[1:-1]
    frames = _frame_signal(x, win)
    spec = np.fft.rfft(frames, n=_NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ _third_octave_matrix().T)   # (frames, bands)


def _prepare(clean: Waveform, degraded: Waveform):
    if clean.sample_rate != degraded.sample_rate:
        raise MetricError("sample rates differ")
    n = min(len(clean.samples), len(degraded.samples))
    if n == 0:
        raise MetricError("empty input")
    x = _resample_to_analysis_rate(Waveform(clean.samples[:n],
                                            clean.sample_rate))
    y = _resample_to_analysis_rate(Waveform(degraded.samples[:n],
                                            degraded.sample_rate))
    x, y = _remove_silent_frames(x, y)
    ex = _band_envelopes(x)
    ey = _band_envelopes(y)
    if ex.shape[0] < _SEG:
        raise MetricError(
            f"input shorter than one {_SEG}-frame analysis segment "
            f"({ex.shape[0]} frames after silence removal)")
    return ex, ey


def stoi(clean: Waveform, degraded: Waveform):
    """Short-time objective intelligibility of ``degraded`` against ``clean``."""
    ex, ey = _prepare(clean, degraded)
    clip = 10.0 ** (-_BETA_DB / 20.0)
    vals = []
    for m in range(_SEG, ex.shape[0] + 1):
        xs = ex[m - _SEG:m]            # (SEG, bands)
        ys = ey[m - _SEG:m]
        norm = np.linalg.norm(xs, axis=0) / (np.linalg.norm(ys, axis=0) + 1e-12)
        ysn = np.minimum(ys * norm, xs * (1.0 + clip))
        xm = xs - xs.mean(axis=0)
        ym = ysn - ysn.mean(axis=0)
        denom = (np.linalg.norm(xm, axis=0) * np.linalg.norm(ym, axis=0)
                 + 1e-12)
        vals.append(((xm * ym).sum(axis=0) / denom).mean())
    return float(np.mean(vals))


def estoi(clean: Waveform, degraded: Waveform):
    """Extended STOI: row then column mean/variance normalization within each
    segment, correlation averaged over frames and segments."""
    ex, ey = _prepare(clean, degraded)
    vals = []
    for m in range(_SEG, ex.shape[0] + 1):
        xs = ex[m - _SEG:m].T           # (bands, SEG)
        ys = ey[m - _SEG:m].T
        xs = xs - xs.mean(axis=1, keepdims=True)
        ys = ys - ys.mean(axis=1, keepdims=True)
        xs = xs / (np.linalg.norm(xs, axis=1, keepdims=True) + 1e-12)
        ys = ys / (np.linalg.norm(ys, axis=1, keepdims=True) + 1e-12)
        xs = xs - xs.mean(axis=0, keepdims=True)
        ys = ys - ys.mean(axis=0, keepdims=True)
        xs = xs / (np.linalg.norm(xs, axis=0, keepdims=True) + 1e-12)
        ys = ys / (np.linalg.norm(ys, axis=0, keepdims=True) + 1e-12)
        vals.append((xs * ys).sum(axis=0).mean())
    return float(np.mean(vals))


def wer(reference, hypothesis):
    """Word error rate: Levenshtein distance over tokens / reference length."""
    ref = [str(t).lower() for t in reference]
    hyp = [str(t).lower() for t in hypothesis]
    if not ref:
        raise MetricError("empty reference transcript")
    d = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=np.int64)
    d[:, 0] = np.arange(len(ref) + 1)
    d[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1,
                          d[i, j - 1] + 1,
                          d[i - 1, j - 1] + cost)
    return float(d[-1, -1]) / len(ref)


def mel_mse(a: Melspectrogram, b: Melspectrogram):
    """Mean squared difference over the common frame prefix."""
    if a.frames.shape[1] != b.frames.shape[1]:
        raise MetricError(f"n_mels differ: {a.frames.shape[1]} vs "
                          f"{b.frames.shape[1]}")
    t = min(a.frames.shape[0], b.frames.shape[0])
    diff = a.frames[:t].astype(np.float64) - b.frames[:t].astype(np.float64)
    return float(np.mean(diff * diff))


def report(clean: Waveform, degraded: Waveform, clean_mel=None,
           degraded_mel=None, reference_tokens=None, hypothesis_tokens=None):
    """Assemble the standard metric report for one (clean, degraded) pair."""
    from .dsp import AudioConfig, spectral_convergence, stft, wav_to_mel
    cfg = AudioConfig(sample_rate=clean.sample_rate)
    if clean_mel is None:
        clean_mel = wav_to_mel(clean, cfg)
    if degraded_mel is None:
        degraded_mel = wav_to_mel(degraded, cfg)
    n = min(len(clean.samples), len(degraded.samples))
    sc = spectral_convergence(
        np.abs(stft(Waveform(degraded.samples[:n], degraded.sample_rate), cfg)),
        np.abs(stft(Waveform(clean.samples[:n], clean.sample_rate), cfg)))
    w = None
    if reference_tokens is not None and hypothesis_tokens is not None:
        w = wer(reference_tokens, hypothesis_tokens)
    return MetricReport(
        stoi=stoi(clean, degraded),
        estoi=estoi(clean, degraded),
        mel_mse=mel_mse(clean_mel, degraded_mel),
        spectral_convergence=sc,
        wer=w)
