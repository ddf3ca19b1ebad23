"""Operator entry points for corpus generation, training, inference,
metric evaluation, segmentation, and spectrogram rendering.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numeric failure,
5 config validation. Failures print one machine-parseable line to stderr:
``error:<category>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data, imgio, metrics, nn, plots
from .decoder import DecoderConfig
from .dsp import (AudioConfig, AudioError, Melspectrogram, Waveform,
                  chunked_synthesize, read_mel, read_wav, wav_to_mel,
                  write_mel, write_wav)
from .speaker import (FaceEncoder, SpeakerTrainConfig, face_encode,
                      train_speaker_encoder, write_embeddings)
from .synthesizer import Synthesizer, load_synthesizer, save_synthesizer
from .training import TrainConfig, prepare_samples, train
from .video import crop_sequence

EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CONFIG = 5


class ConfigError(ValueError):
    """Raised when a config file fails validation."""


def _build_dataclass(cls, body, section):
    known = set(cls.__dataclass_fields__)
    unknown = set(body) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' config: "
                          f"{sorted(unknown)}")
    try:
        return cls(**body)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' config: {e}") from e


def load_config(path):
    """JSON config with audio/decoder/train sections; unknown keys rejected."""
    if path is None:
        return AudioConfig(), DecoderConfig(), TrainConfig()
    try:
        body = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    unknown = set(body) - {"audio", "decoder", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: "
                          f"{sorted(unknown)}")
    try:
        audio = _build_dataclass(AudioConfig, body.get("audio", {}), "audio")
        dec = _build_dataclass(DecoderConfig, body.get("decoder", {}),
                               "decoder")
    except AudioError as e:
        raise ConfigError(str(e)) from e
    tr = _build_dataclass(TrainConfig, body.get("train", {}), "train")
    return audio, dec, tr


class _StagedOutput:
    """Write outputs into a temp dir; move into place only on success."""

    def __init__(self, out_dir):
        self.final = Path(out_dir)
        self.tmp = Path(tempfile.mkdtemp(
            prefix=".stage-", dir=str(self.final.parent)
            if self.final.parent.exists() else None))

    def path(self, name):
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def commit(self):
        self.final.mkdir(parents=True, exist_ok=True)
        for item in sorted(self.tmp.rglob("*")):
            if item.is_file():
                rel = item.relative_to(self.tmp)
                dest = self.final / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(item, dest)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _load_sample_dir(path):
    path = Path(path)
    frame_paths = sorted(path.glob("frame_*.pgm")) + sorted(
        path.glob("frame_*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no frame images under {path}")
    frames = np.stack([imgio.read_image(p) for p in frame_paths])
    wav_path = path / "audio.wav"
    audio = read_wav(wav_path) if wav_path.exists() else None
    face_path = path / "face.ppm"
    face = imgio.read_ppm(face_path) if face_path.exists() else None
    meta = {}
    meta_path = path / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return frames, audio, face, meta


def _default_speaker_encoder(seed):
    enc = FaceEncoder(np.random.default_rng(seed + 9000))
    enc.freeze()
    return enc


def _speaker_encoder_from(path, seed):
    if path is None:
        return _default_speaker_encoder(seed)
    enc = FaceEncoder(np.random.default_rng(0))
    enc.load_state_dict(nn.load_checkpoint(path))
    enc.freeze()
    return enc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    audio_cfg, _, _ = load_config(args.config)
    samples = data.generate_corpus(args.identities, args.samples_per_identity,
                                   args.vocab, seed=args.seed,
                                   tokens_per_sample=args.tokens,
                                   sample_rate=audio_cfg.sample_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_corpus(samples, out)
    data.write_identity_manifest(samples, out, out / "identities.json")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train_speaker(args):
    audio_cfg, _, _ = load_config(args.config)
    samples = data.read_corpus(args.corpus)
    cfg = SpeakerTrainConfig(seed=args.seed)
    if args.steps:
        cfg.max_steps = args.steps
    staged = _StagedOutput(args.out)
    try:
        encoder, report = train_speaker_encoder(samples, cfg, audio_cfg)
        nn.save_checkpoint(staged.path("speaker.ckpt"),
                           dict(encoder.named_parameters()))
        with open(staged.path("speaker_report.jsonl"), "w") as f:
            for row in report.steps:
                f.write(json.dumps(row) + "\n")
        embs = [face_encode(encoder, s.face) for s in samples]
        write_embeddings(staged.path("face_embeddings.emb"), embs)
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"speaker encoder trained ({report.stopping_reason}); "
          f"outputs in {args.out}")
    return 0


def cmd_train(args):
    audio_cfg, dec_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    samples = data.read_corpus(args.corpus)
    model = Synthesizer(audio_cfg, dec_cfg, seed=train_cfg.seed)
    speaker = _speaker_encoder_from(args.speaker, train_cfg.seed)
    staged = _StagedOutput(args.out)
    try:
        model, report = train(model, samples, train_cfg,
                              speaker_encoder=speaker, audio_cfg=audio_cfg)
        save_synthesizer(staged.path("synthesizer.ckpt"), model)
        nn.save_checkpoint(staged.path("speaker.ckpt"),
                           dict(speaker.named_parameters()))
        with open(staged.path("train_report.jsonl"), "w") as f:
            f.write(report.to_jsonl())
        plots.save_loss_curves(report.epochs, staged.path("loss_curves.png"))
        with open(staged.path("config.json"), "w") as f:
            json.dump({"audio": asdict(audio_cfg), "decoder": asdict(dec_cfg),
                       "train": asdict(train_cfg)}, f, indent=1)
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"trained {len(report.epochs)} epochs "
          f"({report.stopping_reason}); outputs in {args.out}")
    return 0


def cmd_infer(args):
    audio_cfg, dec_cfg, _ = load_config(args.config)
    if args.max_steps:
        dec_cfg.max_steps = args.max_steps
    model = load_synthesizer(args.checkpoint, audio_cfg, dec_cfg)
    speaker = _speaker_encoder_from(
        args.speaker or _sibling(args.checkpoint, "speaker.ckpt"), args.seed)
    frames, _, face, meta = _load_sample_dir(args.sample)
    fps = int(meta.get("fps", 25))
    if face is None:
        raise FileNotFoundError(f"{args.sample}: face.ppm required for "
                                "speaker conditioning")
    lips = crop_sequence(frames, fps=fps)
    emb = face_encode(speaker, face)
    staged = _StagedOutput(args.out)
    try:
        duration = lips.frames.shape[0] / fps
        if duration > args.chunk_seconds:
            mels, attns = model.infer_chunked(
                lips, emb, chunk_seconds=args.chunk_seconds, seed=args.seed,
                gate_threshold=args.threshold)
        else:
            mel, _, attn = model.infer(lips, emb, seed=args.seed,
                                       gate_threshold=args.threshold)
            mels, attns = [mel], [attn]
        wave = chunked_synthesize(mels, audio_cfg, iterations=args.iterations,
                                  seed=args.seed)
        merged = Melspectrogram(
            np.concatenate([m.frames for m in mels], axis=0), audio_cfg)
        write_wav(staged.path("generated.wav"), wave)
        write_mel(staged.path("generated.mel"), merged)
        plots.save_mel_figure(merged.frames, staged.path("generated_mel.png"),
                              hop=audio_cfg.hop,
                              sample_rate=audio_cfg.sample_rate)
        for i, attn in enumerate(attns):
            _write_heatmap_pgm(staged, f"attention_{i:02d}", attn)
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"synthesized {wave.duration:.2f}s of audio into {args.out}")
    return 0


def _sibling(path, name):
    p = Path(path).parent / name
    return str(p) if p.exists() else None


def _write_heatmap_pgm(staged, stem, matrix):
    """Min/max-normalized grayscale PGM with the normalization recorded in
    a sidecar JSON (grid values reproducible from the annotation)."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < 1e-12:
        pixels = np.full(m.shape, 128, dtype=np.uint8)
    else:
        pixels = np.clip(np.round((m - lo) / (hi - lo) * 255.0), 0,
                         255).astype(np.uint8)
    imgio.write_pgm(staged.path(f"{stem}.pgm"), pixels)
    with open(staged.path(f"{stem}.json"), "w") as f:
        json.dump({"min": lo, "max": hi, "rows": int(m.shape[0]),
                   "cols": int(m.shape[1]),
                   "normalization": "pixel = round(255*(v-min)/(max-min)); "
                                    "constant input renders as 128"}, f)


def cmd_render_mel(args):
    audio_cfg, _, _ = load_config(args.config)
    mel = read_mel(args.mel)
    staged = _StagedOutput(args.out)
    try:
        _write_heatmap_pgm(staged, "mel", mel.frames)
        plots.save_mel_figure(mel.frames, staged.path("mel.png"),
                              hop=mel.config.hop,
                              sample_rate=mel.config.sample_rate)
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"rendered {mel.n_frames}x{mel.frames.shape[1]} mel into "
          f"{args.out}")
    return 0


def cmd_metrics(args):
    load_config(args.config)
    if not args.pairs and not (args.clean and args.degraded):
        raise ValueError("metrics needs --pairs or both --clean and "
                         "--degraded")
    staged = _StagedOutput(args.out)
    try:
        if args.pairs:
            entries = json.loads(Path(args.pairs).read_text())
            reports = []
            for e in entries:
                clean = read_wav(e["clean"])
                degraded = read_wav(e["degraded"])
                rep = metrics.report(clean, degraded,
                                     reference_tokens=e.get("ref_tokens"),
                                     hypothesis_tokens=e.get("hyp_tokens"))
                reports.append((Path(e["degraded"]).stem, rep))
            with open(staged.path("metrics.csv"), "w") as f:
                f.write("name,stoi,estoi,mel_mse,spectral_convergence,wer,"
                        "pesq\n")
                for name, rep in reports:
                    wer_s = "" if rep.wer is None else f"{rep.wer:.6f}"
                    f.write(f"{name},{rep.stoi:.6f},{rep.estoi:.6f},"
                            f"{rep.mel_mse:.6f},"
                            f"{rep.spectral_convergence:.6f},{wer_s},"
                            f"unavailable\n")
            plots.save_metric_bars(reports, staged.path("metrics.png"))
            body = {name: json.loads(rep.to_json()) for name, rep in reports}
            staged.path("metrics.json").write_text(json.dumps(body, indent=1))
        else:
            clean = read_wav(args.clean)
            degraded = read_wav(args.degraded)
            ref = args.ref_tokens.split() if args.ref_tokens else None
            hyp = args.hyp_tokens.split() if args.hyp_tokens else None
            rep = metrics.report(clean, degraded, reference_tokens=ref,
                                 hypothesis_tokens=hyp)
            staged.path("metrics.json").write_text(rep.to_json())
            plots.save_metric_bars([("pair", rep)], staged.path("metrics.png"))
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"metrics written to {args.out}")
    return 0


def cmd_segment(args):
    load_config(args.config)
    detections = json.loads(Path(args.detections).read_text())
    if not isinstance(detections, list):
        raise ValueError("detections file must hold a JSON list of booleans")
    segments = data.yld_segment(detections, args.fps, args.min_s, args.max_s)
    staged = _StagedOutput(args.out)
    try:
        body = [{"start_s": s.start_s, "end_s": s.end_s} for s in segments]
        staged.path("segments.json").write_text(json.dumps(body, indent=1))
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"{len(segments)} segments written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="lipsynth",
        description="Silent-video-to-speech synthesis toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    common(g)
    g.add_argument("--identities", type=int, default=4)
    g.add_argument("--samples-per-identity", type=int, default=8)
    g.add_argument("--vocab", type=int, default=12)
    g.add_argument("--tokens", type=int, default=3,
                   help="words per sample")
    g.set_defaults(fn=cmd_gen_corpus)

    ts = sub.add_parser("train-speaker",
                        help="contrastive face-to-voice training")
    common(ts)
    ts.add_argument("--corpus", required=True)
    ts.add_argument("--steps", type=int, default=None)
    ts.set_defaults(fn=cmd_train_speaker)

    tr = sub.add_parser("train", help="train the synthesizer")
    common(tr)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--speaker", default=None,
                    help="speaker encoder checkpoint")
    tr.set_defaults(fn=cmd_train)

    inf = sub.add_parser("infer", help="synthesize speech for a silent clip")
    common(inf)
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--sample", required=True,
                     help="directory with frame_*.pgm and face.ppm")
    inf.add_argument("--speaker", default=None)
    inf.add_argument("--iterations", type=int, default=60,
                     help="Griffin-Lim iterations")
    inf.add_argument("--threshold", type=float, default=None,
                     help="stop-gate threshold (default 0.5)")
    inf.add_argument("--chunk-seconds", type=float, default=2.0)
    inf.add_argument("--max-steps", type=int, default=None)
    inf.set_defaults(fn=cmd_infer)

    me = sub.add_parser("metrics", help="evaluate clean/degraded pairs")
    common(me)
    me.add_argument("--clean")
    me.add_argument("--degraded")
    me.add_argument("--pairs", help="JSON manifest of pair paths")
    me.add_argument("--ref-tokens", default=None)
    me.add_argument("--hyp-tokens", default=None)
    me.set_defaults(fn=cmd_metrics)

    se = sub.add_parser("segment", help="face-gated clip segmentation")
    common(se)
    se.add_argument("--detections", required=True,
                    help="JSON list of per-frame booleans")
    se.add_argument("--fps", type=float, required=True)
    se.add_argument("--min-s", type=float, default=1.0)
    se.add_argument("--max-s", type=float, default=3.0)
    se.set_defaults(fn=cmd_segment)

    rm = sub.add_parser("render-mel", help="render a mel file to PGM/PNG")
    common(rm)
    rm.add_argument("--mel", required=True)
    rm.set_defaults(fn=cmd_render_mel)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error:config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (nn.GradientError, FloatingPointError) as e:
        print(f"error:numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, IsADirectoryError,
            OSError) as e:
        print(f"error:io: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error:args: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
