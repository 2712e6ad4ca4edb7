"""CLI flows over a locally saved source model."""

import json

import numpy as np
import pytest

from hf_export.cli import entry
from hf_export.container import read_container
from helpers import tiny_source_model


@pytest.fixture(scope="module")
def source_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("src") / "tiny-gpt2"
    tiny_source_model("gpt2").save_pretrained(path)
    return path


@pytest.fixture(scope="module")
def export_dir(source_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("out") / "export"
    code = entry(["checkpoint", "--source", str(source_dir), "--out", str(out)])
    assert code == 0
    return out


class TestCheckpointCommand:
    def test_artifacts(self, export_dir):
        assert (export_dir / "model.ckpt").is_file()
        assert (export_dir / "golden.bin").is_file()
        config, tensors = read_container(export_dir / "model.ckpt")
        assert config["n_layers"] == 2
        assert config["model_id"] == "tiny-gpt2"
        assert "layers.1.W_out" in tensors

    def test_family_mismatch_is_detected(self, source_dir, tmp_path, capsys):
        code = entry(["checkpoint", "--source", str(source_dir), "--family", "bloom",
                      "--out", str(tmp_path)])
        assert code == 1
        assert "missing tensor" in capsys.readouterr().err

    def test_bad_source_exits_one(self, tmp_path, capsys):
        code = entry(["checkpoint", "--source", str(tmp_path / "nope"), "--out", str(tmp_path)])
        assert code == 1


class TestCorpusCommand:
    def test_writes_corpus_next_to_checkpoint(self, export_dir, tmp_path):
        text = tmp_path / "wiki.txt"
        text.write_text("alpha beta gamma alpha", encoding="utf-8")
        code = entry(["corpus", "--text", str(text), "--tokenizer", "word:90",
                      "--out", str(export_dir), "--split", "test",
                      "--checkpoint", str(export_dir / "model.ckpt")])
        assert code == 0
        ids = np.frombuffer((export_dir / "corpus.tok").read_bytes(), dtype="<u4")
        assert ids.tolist() == [0, 1, 2, 0]
        meta = json.loads((export_dir / "corpus.tok.json").read_text())
        assert meta["vocab_size"] == 97  # pinned to the exported model
        assert meta["word_count"] == 4

    def test_word_budget_flag(self, export_dir, tmp_path):
        text = tmp_path / "w.txt"
        text.write_text("a b c d e", encoding="utf-8")
        out = tmp_path / "budget"
        out.mkdir()
        code = entry(["corpus", "--text", str(text), "--tokenizer", "word:8",
                      "--out", str(out), "--word-budget", "3"])
        assert code == 0
        meta = json.loads((out / "corpus.tok.json").read_text())
        assert meta["word_count"] == 3 and meta["token_count"] == 3

    def test_vocab_mismatch_exits_one(self, export_dir, tmp_path, capsys):
        text = tmp_path / "t.txt"
        text.write_text("x", encoding="utf-8")
        code = entry(["corpus", "--text", str(text), "--tokenizer", "word:500",
                      "--out", str(tmp_path), "--checkpoint", str(export_dir / "model.ckpt")])
        assert code == 1
        assert "exceeds" in capsys.readouterr().err

    def test_missing_text_file(self, tmp_path, capsys):
        code = entry(["corpus", "--text", str(tmp_path / "missing.txt"),
                      "--tokenizer", "word", "--out", str(tmp_path)])
        assert code == 1
        assert "not found" in capsys.readouterr().err


class TestVerifyCommand:
    def test_verify_dir(self, export_dir, capsys):
        code = entry(["verify", "--dir", str(export_dir)])
        assert code == 0
        out = capsys.readouterr().out
        assert "OK: max abs diff" in out

    def test_verify_explicit_paths(self, export_dir):
        code = entry(["verify", "--checkpoint", str(export_dir / "model.ckpt"),
                      "--golden", str(export_dir / "golden.bin")])
        assert code == 0

    def test_verify_fails_on_tight_tolerance(self, export_dir, capsys):
        code = entry(["verify", "--dir", str(export_dir), "--tolerance", "1e-12"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_verify_needs_paths(self, capsys):
        code = entry(["verify"])
        assert code == 1
        assert "--dir" in capsys.readouterr().err


class TestUsage:
    def test_no_command(self):
        assert entry([]) == 2

    def test_unknown_flag(self):
        assert entry(["checkpoint", "--nope"]) == 2

    def test_help(self, capsys):
        assert entry(["--help"]) == 0
        assert "checkpoint" in capsys.readouterr().out
