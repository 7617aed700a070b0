import json
import subprocess
import sys

import numpy as np
import pytest

from radgen.cli import main
from radgen.data import CorpusExample, load_corpus, resolve_samples, save_corpus, synthetic_corpus, template_report
from radgen.exceptions import CheckpointMismatchError, ConfigError, DataError, FormatError
from radgen.io import (
    Checkpoint, checkpoint_bytes, dump_config, load_checkpoint, parse_config, read_jsonl, save_checkpoint,
)
from radgen.retrieval import FeatureRecord, save_features

from helpers import randomized_params, tiny_config

TINY = ["--set", "d_model=8", "--set", "n_heads=2", "--set", "n_layers=1", "--set", "d_ff=16",
        "--set", "epochs=2", "--set", "min_freq=1", "--set", "max_len=30"]


class TestConfig:
    def test_defaults(self):
        s = parse_config("")
        assert (s.beam, s.n_layers, s.epochs, s.lr_extractor, s.lr_model) == (3, 3, 100, 5e-5, 5e-4)
        assert (s.min_freq, s.max_len, s.d_model, s.n_heads, s.literal_residual) == (3, 60, 128, 4, True)

    def test_parse_and_dump_round_trip(self):
        s = parse_config("d_model = 16  # small\n\nliteral_residual = false\nlr_model=1e-3\n")
        assert (s.d_model, s.literal_residual, s.lr_model) == (16, False, 1e-3)
        assert parse_config(dump_config(s)) == s

    @pytest.mark.parametrize("text", ["d_model 16", "bogus = 1", "d_model = x", "literal_residual = maybe"])
    def test_errors_name_the_line(self, text):
        with pytest.raises(ConfigError, match="cfg:1"):
            parse_config(text, "cfg")


class TestCheckpoint:
    def make(self, seed=0):
        cfg = tiny_config()
        return Checkpoint(cfg, randomized_params(cfg, seed=seed, dtype=np.float32), "abc", 7, 3)

    def test_round_trip_is_canonical(self, tmp_path):
        ckpt = self.make()
        save_checkpoint(tmp_path / "a.bin", ckpt)
        loaded = load_checkpoint(tmp_path / "a.bin")
        save_checkpoint(tmp_path / "b.bin", loaded)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert loaded.config == ckpt.config and (loaded.seed, loaded.epoch, loaded.vocab_hash) == (7, 3, "abc")
        assert all(loaded.params[k].data.tobytes() == ckpt.params[k].data.tobytes() for k in ckpt.params)

    def test_loaded_params_are_writable(self, tmp_path):
        save_checkpoint(tmp_path / "a.bin", self.make())
        params = load_checkpoint(tmp_path / "a.bin").params
        params["out.b"].data += 1.0

    def test_refuses_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "a.bin", self.make())
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "a.bin", expected_vocab_hash="other")
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "a.bin", expected_config=tiny_config(d_ff=32))

    def test_corruption(self, tmp_path):
        buf = checkpoint_bytes(self.make())
        (tmp_path / "a.bin").write_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.bin")
        (tmp_path / "a.bin").write_bytes(buf[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.bin")
        (tmp_path / "a.bin").write_bytes(buf + b"\0")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.bin")


class TestCorpus:
    def write(self, tmp_path, rows):
        path = tmp_path / "c.jsonl"
        path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
        return path

    def test_round_trip_preserves_order(self, tmp_path):
        examples, _ = synthetic_corpus(10, seed=1)
        save_corpus(tmp_path / "c.jsonl", examples)
        assert load_corpus(tmp_path / "c.jsonl") == examples

    def test_empty_file(self, tmp_path):
        assert load_corpus(self.write(tmp_path, [])) == []

    def test_duplicate_id(self, tmp_path):
        row = {"id": "x1", "feature_ref": "stub", "report": "a", "split": "train"}
        other = {"id": "x2", "feature_ref": "stub", "report": "a", "split": "train"}
        with pytest.raises(DataError, match=r"'x1'.*lines 1 and 3"):
            load_corpus(self.write(tmp_path, [row, other, row]))

    def test_malformed_line(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            load_corpus(self.write(tmp_path, [{"id": "a", "report": "r", "split": "train"}, "{oops"]))

    def test_bad_split_and_empty_report(self, tmp_path):
        with pytest.raises(DataError):
            load_corpus(self.write(tmp_path, [{"id": "a", "report": "r", "split": "dev"}]))
        with pytest.raises(DataError):
            load_corpus(self.write(tmp_path, [{"id": "a", "report": " ", "split": "train"}]))
        assert load_corpus(self.write(tmp_path, [{"id": "a", "report": "", "split": "test"}]))[0].report == ""

    def test_resolve_samples(self):
        examples = [CorpusExample("a", "stub", "r", "train"), CorpusExample("b", "rec", "r", "train")]
        store = [FeatureRecord("rec", np.ones((2, 4)))]
        samples = resolve_samples(examples, store, d_f=4, p=2)
        assert samples[1].features.tolist() == [[1.0] * 4] * 2
        stubbed = resolve_samples(examples, store, d_f=4, p=2, force_stub=True)
        assert np.array_equal(stubbed[0].features, samples[0].features)
        with pytest.raises(DataError):
            resolve_samples(examples, [], d_f=4, p=2)

    def test_synthetic_corpus(self):
        examples, records = synthetic_corpus(100, seed=3)
        splits = [e.split for e in examples]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (70, 10, 20)
        assert len({e.id for e in examples}) == 100 and len(records) == 100
        again, rec2 = synthetic_corpus(100, seed=3)
        assert again == examples and rec2 == records
        assert template_report([0, 0, 0, 0, 0]).startswith("the heart size is normal.")


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus_dir(tmp_path, capsys):
    code, _, _ = run(["synth", "--n", "30", "--seed", "2", "--d-f", "8", "--out-dir", str(tmp_path / "d")], capsys)
    assert code == 0
    return tmp_path / "d"


class TestCli:
    def test_usage_errors(self, capsys):
        code, _, err = run([], capsys)
        assert code == 1 and err.startswith("E100")
        code, _, err = run(["train", "--corpus"], capsys)
        assert code == 1 and err.startswith("E100")

    def test_config_error_exit_one(self, tmp_path, corpus_dir, capsys):
        code, _, err = run(["train", "--corpus", str(corpus_dir / "corpus.jsonl"), "--set", "nope=1",
                            "--out-dir", str(tmp_path / "r")], capsys)
        assert code == 1 and err.startswith("E101")

    def test_data_error_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.fvec"
        bad.write_bytes(b"nope")
        (tmp_path / "c.jsonl").write_text(json.dumps({"id": "a", "feature_ref": "a", "report": "r", "split": "train"}))
        code, _, err = run(["index", "--corpus", str(tmp_path / "c.jsonl"), "--features", str(bad),
                            "--out", str(tmp_path / "i")], capsys)
        assert code == 2 and err.startswith("E201") and "offset 0" in err
        code, _, err = run(["evaluate", "--hyps", str(tmp_path / "missing"), "--refs", str(bad)], capsys)
        assert code == 2

    def test_numerical_error_exit_three(self, tmp_path, capsys):
        save_features(tmp_path / "f.fvec", [FeatureRecord("a", np.zeros((1, 3)))])
        (tmp_path / "c.jsonl").write_text(json.dumps({"id": "a", "feature_ref": "a", "report": "r", "split": "train"}))
        code, _, err = run(["index", "--corpus", str(tmp_path / "c.jsonl"), "--features", str(tmp_path / "f.fvec"),
                            "--out", str(tmp_path / "i")], capsys)
        assert code == 3 and err.startswith("E301")

    def test_evaluate_identity(self, tmp_path, corpus_dir, capsys):
        rows = read_jsonl(corpus_dir / "corpus.jsonl")
        hyps = tmp_path / "h.jsonl"
        hyps.write_text("".join(json.dumps({"id": r["id"], "hypothesis": r["report"]}) + "\n" for r in rows))
        code, out, _ = run(["evaluate", "--hyps", str(hyps), "--refs", str(corpus_dir / "corpus.jsonl"),
                            "--out", str(tmp_path / "s.json")], capsys)
        scores = json.loads(out)
        assert code == 0 and [scores[f"bleu{k}"] for k in range(1, 5)] == [1.0] * 4
        assert json.loads((tmp_path / "s.json").read_text()) == scores

    def test_vocab_stub_index_retrieve(self, tmp_path, corpus_dir, capsys):
        corpus = str(corpus_dir / "corpus.jsonl")
        assert run(["build-vocab", "--corpus", corpus, "--out", str(tmp_path / "v.txt"), "--min-freq", "1"],
                   capsys)[0] == 0
        assert (tmp_path / "v.txt").read_text().split("\n")[0] == "the"
        assert run(["extract-stub", "--corpus", corpus, "--out", str(tmp_path / "s.fvec"), "--set", "d_f=8"],
                   capsys)[0] == 0
        code, _, _ = run(["index", "--corpus", corpus, "--features", str(corpus_dir / "features.fvec"),
                          "--set", "d_f=8", "--out", str(tmp_path / "idx")], capsys)
        assert code == 0
        train_id = next(r["id"] for r in read_jsonl(corpus) if r["split"] == "train")
        code, out, _ = run(["retrieve", "--index", str(tmp_path / "idx"), "--query-id", train_id, "--k", "3"], capsys)
        hits = [json.loads(line) for line in out.splitlines()]
        assert code == 0 and len(hits) == 3 and hits[0]["id"] == train_id
        code, out, _ = run(["retrieve", "--index", str(tmp_path / "idx"), "--query-id", train_id, "--k", "3",
                            "--exclude-self"], capsys)
        assert train_id not in [json.loads(line)["id"] for line in out.splitlines()]

    def test_train_generate(self, tmp_path, corpus_dir, capsys):
        corpus, feats = str(corpus_dir / "corpus.jsonl"), str(corpus_dir / "features.fvec")
        code, _, _ = run(["train", "--corpus", corpus, "--features", feats, "--seed", "1", "--set", "d_f=8",
                          "--out-dir", str(tmp_path / "run"), *TINY], capsys)
        assert code == 0
        assert {p.name for p in (tmp_path / "run").iterdir()} == {"checkpoint.bin", "metrics.jsonl", "vocab.txt", "index"}
        log = read_jsonl(tmp_path / "run" / "metrics.jsonl")
        assert [r["epoch"] for r in log] == [1, 2]
        code, _, _ = run(["generate", "--corpus", corpus, "--features", feats, "--set", "d_f=8",
                          "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
                          "--out", str(tmp_path / "h.jsonl")], capsys)
        hyps = read_jsonl(tmp_path / "h.jsonl")
        test_ids = [r["id"] for r in read_jsonl(corpus) if r["split"] == "test"]
        assert code == 0 and [h["id"] for h in hyps] == test_ids
        assert all("<" not in h["hypothesis"] for h in hyps)

    def test_generate_refuses_other_vocab(self, tmp_path, corpus_dir, capsys):
        corpus, feats = str(corpus_dir / "corpus.jsonl"), str(corpus_dir / "features.fvec")
        run(["train", "--corpus", corpus, "--features", feats, "--set", "d_f=8", "--out-dir", str(tmp_path / "run"),
             *TINY], capsys)
        (tmp_path / "other.txt").write_text("zebra\n")
        code, _, err = run(["generate", "--corpus", corpus, "--features", feats, "--set", "d_f=8",
                            "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"), "--vocab",
                            str(tmp_path / "other.txt"), "--out", str(tmp_path / "h.jsonl")], capsys)
        assert code == 2 and err.startswith("E204")

    def test_log_level_env(self, tmp_path, corpus_dir):
        env = {"RADGEN_LOG_LEVEL": "info", "PATH": "/usr/bin:/bin"}
        proc = subprocess.run([sys.executable, "-m", "radgen", "train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                               "--features", str(corpus_dir / "features.fvec"), "--set", "d_f=8",
                               "--out-dir", str(tmp_path / "run"), *TINY], capture_output=True, text=True, env=env)
        assert proc.returncode == 0 and "epoch 1" in proc.stderr
