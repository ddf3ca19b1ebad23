import json
import struct
from pathlib import Path

import numpy as np
import pytest

from lipsynth import data, imgio
from lipsynth.cli import main
from lipsynth.dsp import (AudioConfig, Melspectrogram, read_mel, read_wav,
                          write_mel, write_wav)


def run(*argv):
    return main(list(argv))


class TestHelp:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        assert "gen-corpus" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        assert run("infer", "--help") == 0


class TestGenCorpus:
    def test_writes_samples_and_manifest(self, tmp_path):
        out = tmp_path / "corpus"
        assert run("gen-corpus", "--out", str(out), "--identities", "2",
                   "--samples-per-identity", "1", "--vocab", "4",
                   "--seed", "3") == 0
        assert (out / "sample0000" / "audio.wav").exists()
        assert (out / "sample0000" / "face.ppm").exists()
        assert (out / "identities.json").exists()
        meta = json.loads((out / "sample0000" / "meta.json").read_text())
        assert meta["identity"] == "id00"

    def test_seed_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run("gen-corpus", "--out", str(out), "--identities", "1",
                "--samples-per-identity", "1", "--vocab", "4", "--seed", "9")
        wav_a = (a / "sample0000" / "audio.wav").read_bytes()
        wav_b = (b / "sample0000" / "audio.wav").read_bytes()
        assert wav_a == wav_b


class TestSegmentCommand:
    def test_documented_example(self, tmp_path):
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True] * 100))
        out = tmp_path / "segs"
        assert run("segment", "--detections", str(det), "--fps", "25",
                   "--out", str(out)) == 0
        body = json.loads((out / "segments.json").read_text())
        assert body == [{"start_s": 0.0, "end_s": 3.0},
                        {"start_s": 3.0, "end_s": 4.0}]

    def test_all_false_empty_manifest_success(self, tmp_path):
        det = tmp_path / "det.json"
        det.write_text(json.dumps([False] * 60))
        out = tmp_path / "segs"
        assert run("segment", "--detections", str(det), "--fps", "25",
                   "--out", str(out)) == 0
        assert json.loads((out / "segments.json").read_text()) == []

    def test_missing_detections_io_error(self, tmp_path):
        assert run("segment", "--detections", str(tmp_path / "nope.json"),
                   "--fps", "25", "--out", str(tmp_path / "x")) == 3


class TestRenderMel:
    def test_all_floor_mel_uniform_pgm(self, tmp_path):
        cfg = AudioConfig()
        mel_path = tmp_path / "flat.mel"
        write_mel(mel_path, Melspectrogram(
            np.full((30, cfg.n_mels), np.log(cfg.log_floor), np.float32),
            cfg))
        out = tmp_path / "render"
        assert run("render-mel", "--mel", str(mel_path), "--out",
                   str(out)) == 0
        pgm = imgio.read_pgm(out / "mel.pgm")
        assert np.all(pgm == pgm.reshape(-1)[0])
        sidecar = json.loads((out / "mel.json").read_text())
        assert {"min", "max", "normalization"} <= set(sidecar)
        assert (out / "mel.png").exists()

    def test_structured_mel_renders(self, tmp_path):
        cfg = AudioConfig()
        s = data.generate_corpus(1, 1, 4, seed=0)[0]
        from lipsynth.dsp import wav_to_mel
        mel_path = tmp_path / "m.mel"
        write_mel(mel_path, wav_to_mel(s.audio, cfg))
        out = tmp_path / "render"
        assert run("render-mel", "--mel", str(mel_path), "--out",
                   str(out)) == 0
        sidecar = json.loads((out / "mel.json").read_text())
        assert sidecar["max"] > sidecar["min"]


class TestMetricsCommand:
    def test_single_pair(self, tmp_path):
        s = data.generate_corpus(1, 1, 12, seed=2, tokens_per_sample=5)[0]
        clean = tmp_path / "c.wav"
        write_wav(clean, s.audio)
        out = tmp_path / "m"
        assert run("metrics", "--clean", str(clean), "--degraded", str(clean),
                   "--out", str(out)) == 0
        body = json.loads((out / "metrics.json").read_text())
        assert body["stoi"] == pytest.approx(1.0, abs=1e-6)
        assert body["pesq"] == "unavailable"
        assert (out / "metrics.png").exists()

    def test_batch_pairs_csv(self, tmp_path):
        s = data.generate_corpus(1, 2, 12, seed=2, tokens_per_sample=5)
        paths = []
        for i, smp in enumerate(s):
            p = tmp_path / f"{i}.wav"
            write_wav(p, smp.audio)
            paths.append(str(p))
        manifest = tmp_path / "pairs.json"
        manifest.write_text(json.dumps(
            [{"clean": paths[0], "degraded": paths[0],
              "ref_tokens": s[0].tokens, "hyp_tokens": s[0].tokens},
             {"clean": paths[1], "degraded": paths[1]}]))
        out = tmp_path / "m"
        assert run("metrics", "--pairs", str(manifest), "--out",
                   str(out)) == 0
        lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert lines[0].startswith("name,stoi,estoi")
        assert len(lines) == 3
        assert (out / "metrics.png").exists()

    def test_missing_args_bad_usage(self, tmp_path):
        assert run("metrics", "--out", str(tmp_path / "x")) == 2


class TestConfigHandling:
    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"audio": {}, "bogus": {}}))
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True] * 30))
        code = run("segment", "--config", str(cfg), "--detections", str(det),
                   "--fps", "25", "--out", str(tmp_path / "o"))
        assert code == 5

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"audio": {"sample_rate": 16000,
                                             "wibble": 3}}))
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True] * 30))
        assert run("segment", "--config", str(cfg), "--detections", str(det),
                   "--fps", "25", "--out", str(tmp_path / "o")) == 5

    def test_invalid_value_rejected(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"audio": {"hop": 5000}}))
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True] * 30))
        assert run("segment", "--config", str(cfg), "--detections", str(det),
                   "--fps", "25", "--out", str(tmp_path / "o")) == 5

    def test_failed_run_writes_nothing(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"audio": {"hop": 5000}}))
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True] * 30))
        out = tmp_path / "o"
        run("segment", "--config", str(cfg), "--detections", str(det),
            "--fps", "25", "--out", str(out))
        assert not out.exists()

    def test_error_line_machine_parseable(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        det = tmp_path / "det.json"
        det.write_text(json.dumps([True]))
        run("segment", "--config", str(cfg), "--detections", str(det),
            "--fps", "25", "--out", str(tmp_path / "o"))
        err = capsys.readouterr().err
        assert err.startswith("error:config:")
