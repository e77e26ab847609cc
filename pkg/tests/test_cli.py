import json

import pytest

from lmlab.cli import DEFAULT_SEED, SEED_ENV, main, resolve_seed
from lmlab.corpus import encode_labeled, load_vocab
from lmlab.embed import load_embeddings
from lmlab.errors import DataError

TRAIN = ("the cat sat on the mat . the dog sat on the rug .\n\n"
         "a bird sang in the tree . the cat saw the bird .\n")


@pytest.fixture
def train_file(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text(TRAIN)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestExitCodes:
    def test_happy_path_is_zero(self, tmp_path, train_file, capsys):
        code, out, _ = run(["vocab", "--corpus", train_file,
                            "--out", str(tmp_path / "v")], capsys)
        assert code == 0
        assert "vocab.txt" in out
        assert (tmp_path / "v" / "vocab.txt").exists()

    def test_unknown_flag_is_usage_error(self, tmp_path, train_file, capsys):
        code, _, err = run(["vocab", "--corpus", train_file,
                            "--out", str(tmp_path / "v"), "--frobnicate"], capsys)
        assert code == 1
        assert "usage" in err.lower()

    def test_no_subcommand_prints_help(self, capsys):
        code, out, _ = run([], capsys)
        assert code == 1
        assert "SUBCOMMAND" in out

    def test_missing_corpus_is_data_error(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.txt")
        code, _, err = run(["vocab", "--corpus", missing,
                            "--out", str(tmp_path / "v")], capsys)
        assert code == 2
        assert "nope.txt" in err

    def test_bad_manifest_json_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "m.json"
        bad.write_text("{not json")
        code, _, err = run(["suite", "--manifest", str(bad),
                            "--out", str(tmp_path / "s")], capsys)
        assert code == 2
        assert "JSON" in err

    def test_invalid_request_is_usage_error(self, tmp_path, train_file, capsys):
        # max-size below the reserved ids violates a precondition
        code, _, err = run(["vocab", "--corpus", train_file, "--max-size", "2",
                            "--out", str(tmp_path / "v")], capsys)
        assert code == 1
        assert "invalid request" in err


class TestSeedResolution:
    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "5")
        assert resolve_seed(7) == 7

    def test_env_beats_default(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "5")
        assert resolve_seed(None) == 5

    def test_default(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert resolve_seed(None) == DEFAULT_SEED

    def test_non_integer_env_rejected(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "lots")
        with pytest.raises(DataError):
            resolve_seed(None)

    def test_seed_lands_in_frozen_config(self, tmp_path, train_file, capsys,
                                         monkeypatch):
        monkeypatch.setenv(SEED_ENV, "5")
        code, _, _ = run(["w2v", "--corpus", train_file, "--dim", "4",
                          "--epochs", "1", "--seed", "7",
                          "--out", str(tmp_path / "a")], capsys)
        assert code == 0
        cfg = json.loads((tmp_path / "a" / "config.json").read_text())
        assert cfg["seed"] == 7
        code, _, _ = run(["w2v", "--corpus", train_file, "--dim", "4",
                          "--epochs", "1", "--out", str(tmp_path / "b")], capsys)
        assert code == 0
        cfg = json.loads((tmp_path / "b" / "config.json").read_text())
        assert cfg["seed"] == 5


class TestArtifacts:
    def test_w2v_reruns_are_byte_identical(self, tmp_path, train_file, capsys,
                                           monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        args = ["w2v", "--corpus", train_file, "--dim", "4", "--epochs", "2"]
        assert run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
        assert run(args + ["--out", str(tmp_path / "b")], capsys)[0] == 0
        vec_a = (tmp_path / "a" / "embeddings.vec").read_bytes()
        vec_b = (tmp_path / "b" / "embeddings.vec").read_bytes()
        assert vec_a == vec_b
        cfg_a = (tmp_path / "a" / "config.json").read_bytes()
        cfg_b = (tmp_path / "b" / "config.json").read_bytes()
        assert cfg_a == cfg_b

    def test_vocab_round_trips_through_cli_file(self, tmp_path, train_file, capsys):
        assert run(["vocab", "--corpus", train_file,
                    "--out", str(tmp_path / "v")], capsys)[0] == 0
        vocab = load_vocab(tmp_path / "v" / "vocab.txt")
        assert vocab.id_to_token[:3] == ["<unk>", "<bos>", "<eos>"]
        assert "the" in vocab.token_to_id

    def test_lm_train_eval_probe_pipeline(self, tmp_path, train_file, capsys,
                                          monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        code, out, _ = run(["lm-train", "--corpus", train_file, "--emb-dim", "6",
                            "--hidden", "4", "--epochs", "1",
                            "--out", str(tmp_path / "lm")], capsys)
        assert code == 0
        ckpt = str(tmp_path / "lm" / "lm.ckpt")

        code, out, _ = run(["eval", "--model", ckpt, "--corpus", train_file,
                            "--out", str(tmp_path / "ev")], capsys)
        assert code == 0
        assert out.startswith("perplexity:")
        saved = json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert saved["perplexity"] > 0

        code, out, _ = run(["probe", "--model", ckpt, "--text", "the cat sat",
                            "--position", "1"], capsys)
        assert code == 0
        assert "position " in out and " out of a vocabulary of " in out
        assert out.splitlines()[1].lstrip().startswith("1.")

    def test_lm_train_reruns_are_byte_identical(self, tmp_path, train_file, capsys,
                                                monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        args = ["lm-train", "--corpus", train_file, "--emb-dim", "6",
                "--hidden", "4", "--epochs", "1"]
        assert run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
        assert run(args + ["--out", str(tmp_path / "b")], capsys)[0] == 0
        assert ((tmp_path / "a" / "lm.ckpt").read_bytes()
                == (tmp_path / "b" / "lm.ckpt").read_bytes())

    def test_embed_avg_from_bilm(self, tmp_path, train_file, capsys, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert run(["bilm", "--corpus", train_file, "--emb-dim", "6",
                    "--hidden", "4", "--epochs", "1",
                    "--out", str(tmp_path / "bl")], capsys)[0] == 0
        code, out, _ = run(["embed-avg", "--model", str(tmp_path / "bl" / "bilm.ckpt"),
                            "--corpus", train_file,
                            "--out", str(tmp_path / "emb")], capsys)
        assert code == 0
        table = load_embeddings(tmp_path / "emb" / "embeddings.vec",
                                provenance="bilm")
        assert table.dim == 8

    def test_embed_avg_rejects_lm_checkpoint(self, tmp_path, train_file, capsys,
                                             monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert run(["lm-train", "--corpus", train_file, "--emb-dim", "6",
                    "--hidden", "4", "--epochs", "1",
                    "--out", str(tmp_path / "lm")], capsys)[0] == 0
        code, _, err = run(["embed-avg", "--model", str(tmp_path / "lm" / "lm.ckpt"),
                            "--corpus", train_file,
                            "--out", str(tmp_path / "emb")], capsys)
        assert code == 2
        assert "lm" in err

    def test_label_output_feeds_domaincls(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        from synthetic import topic_paragraphs
        text, _ = topic_paragraphs(2, 40, seed=42)
        corpus_path = tmp_path / "plain.txt"
        corpus_path.write_text(text)
        code, _, _ = run(["label", "--corpus", str(corpus_path), "--k", "2",
                          "--d", "6", "--out", str(tmp_path / "lab")], capsys)
        assert code == 0
        labeled = (tmp_path / "lab" / "labeled.txt").read_text()
        assert labeled.startswith("__label__")
        stats = json.loads((tmp_path / "lab" / "label_stats.json").read_text())
        assert stats["rounds_run"] >= 1

        code, _, _ = run(["domaincls", "--corpus", str(tmp_path / "lab" / "labeled.txt"),
                          "--emb-dim", "6", "--hidden", "4", "--epochs", "1",
                          "--out", str(tmp_path / "dc")], capsys)
        assert code == 0
        assert (tmp_path / "dc" / "domaincls.ckpt").exists()

    def test_suite_writes_reports(self, tmp_path, train_file, capsys, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        valid = tmp_path / "valid.txt"
        valid.write_text("the cat sat . the dog ran .\n")
        manifest = {
            "train": train_file,
            "valid": str(valid),
            "test": str(valid),
            "vocab_size": 50,
            "lm": {"emb_dim": 6, "hidden": 4, "epochs": 1, "batch_size": 4},
            "rows": [{"name": "baseline"}],
        }
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(manifest))
        code, out, _ = run(["suite", "--manifest", str(mpath),
                            "--out", str(tmp_path / "s")], capsys)
        assert code == 0
        assert (tmp_path / "s" / "report.json").exists()
        report_text = (tmp_path / "s" / "report.txt").read_text()
        assert report_text.splitlines()[0].startswith("Embeddings")
        assert "baseline" in out

    def test_run_meta_is_the_only_timestamped_file(self, tmp_path, train_file,
                                                   capsys, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert run(["vocab", "--corpus", train_file,
                    "--out", str(tmp_path / "v")], capsys)[0] == 0
        meta = json.loads((tmp_path / "v" / "run_meta.json").read_text())
        assert "started_utc" in meta
        cfg = json.loads((tmp_path / "v" / "config.json").read_text())
        assert set(cfg) == {"subcommand", "corpus", "max_size", "min_count"}
