"""Command-line surface: data generation, the tiny pipeline, check suites."""
import json

import pytest

from structran import checks
from structran.cli import main

MIRRORS = [(["a", "b"], ["a", "b", "b", "a"]),
           (["b", "c"], ["b", "c", "c", "b"]),
           (["c", "a"], ["c", "a", "a", "c"]),
           (["a", "b", "c"], ["a", "b", "c", "c", "b", "a"])]

TINY_CONFIG = {
    "model": {"embedding_dim": 6, "fertility_hidden": 4, "reorder_hidden": 4,
              "context_hidden": 4, "fertility_mlp": 4, "span_mlp": 4,
              "output_mlp": 4, "max_fertility": 2, "skip_scale": 0.0,
              "seed": 0},
    "training": {"epochs": 2, "lambda_guidance": 0.0, "seed": 0},
}


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows),
                    encoding="utf-8")


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "data"
    root.mkdir()
    write_jsonl(root / "train.jsonl",
                [{"source": s, "target": t} for s, t in MIRRORS])
    write_jsonl(root / "dev.jsonl",
                [{"source": ["b", "a"], "target": ["b", "a", "a", "b"]}])
    write_jsonl(root / "test.jsonl",
                [{"source": ["c", "b"], "target": ["c", "b", "b", "c"]}])
    return root


class TestGenerateData:
    def test_same_seed_writes_identical_bytes(self, tmp_path):
        for name in ("first", "second"):
            rc = main(["generate-data", "--setup", "A", "--seed", "1",
                       "--out", str(tmp_path / name)])
            assert rc == 0
        for split in ("train", "dev", "test"):
            a = (tmp_path / "first" / f"{split}.jsonl").read_bytes()
            b = (tmp_path / "second" / f"{split}.jsonl").read_bytes()
            assert a == b

    def test_split_sizes(self, tmp_path):
        assert main(["generate-data", "--setup", "B", "--seed", "3",
                     "--out", str(tmp_path)]) == 0
        sizes = {s: len((tmp_path / f"{s}.jsonl").read_text().splitlines())
                 for s in ("train", "dev", "test")}
        assert sizes == {"train": 4000, "dev": 200, "test": 1000}


class TestEvaluate:
    def test_identical_files_score_one(self, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        gold = tmp_path / "gold.jsonl"
        write_jsonl(pred, [{"tokens": t} for _, t in MIRRORS])
        write_jsonl(gold, [{"target": t} for _, t in MIRRORS])
        assert main(["evaluate", "--pred", str(pred), "--gold", str(gold)]) == 0
        assert json.loads(capsys.readouterr().out) == {"exact_match": 1.0}

    def test_partial_match_fraction(self, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        gold = tmp_path / "gold.jsonl"
        write_jsonl(pred, [{"tokens": ["a"]}, {"tokens": ["b"]}])
        write_jsonl(gold, [{"target": ["a"]}, {"target": ["x"]}])
        main(["evaluate", "--pred", str(pred), "--gold", str(gold)])
        assert json.loads(capsys.readouterr().out) == {"exact_match": 0.5}

    def test_count_mismatch_is_an_error(self, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        gold = tmp_path / "gold.jsonl"
        write_jsonl(pred, [{"tokens": ["a"]}])
        write_jsonl(gold, [{"target": ["a"]}, {"target": ["b"]}])
        assert main(["evaluate", "--pred", str(pred), "--gold", str(gold)]) == 1
        assert "error:" in capsys.readouterr().err


class TestTrainPredict:
    def test_tiny_pipeline(self, tmp_path, corpus, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        ckpt = tmp_path / "run" / "model.ckpt"

        rc = main(["train", "--config", str(config), "--data", str(corpus),
                   "--out", str(ckpt)])
        assert rc == 0
        assert ckpt.exists()
        meta = json.loads((tmp_path / "run" / "model.ckpt.meta.json").read_text())
        assert {"model", "training", "source_vocab", "target_vocab",
                "best_dev", "best_epoch"} <= set(meta)
        metrics = (tmp_path / "run" / "model.ckpt.metrics.jsonl").read_text()
        assert len(metrics.splitlines()) == TINY_CONFIG["training"]["epochs"]

        out = tmp_path / "pred.jsonl"
        rc = main(["predict", "--ckpt", str(ckpt),
                   "--input", str(corpus / "test.jsonl"), "--out", str(out)])
        assert rc == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 1
        assert set(rows[0]) == {"source", "tokens", "length", "log_score"}
        assert rows[0]["length"] == len(rows[0]["tokens"])

        # decoding is deterministic: a second pass writes the same bytes
        again = tmp_path / "pred2.jsonl"
        main(["predict", "--ckpt", str(ckpt),
              "--input", str(corpus / "test.jsonl"), "--out", str(again)])
        assert out.read_bytes() == again.read_bytes()

        rc = main(["evaluate", "--pred", str(out),
                   "--gold", str(corpus / "test.jsonl")])
        assert rc == 0
        assert "exact_match" in json.loads(capsys.readouterr().out.splitlines()[-1])

    def test_grammar_and_top_k_flags(self, tmp_path, corpus):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--config", str(config), "--data", str(corpus),
              "--out", str(ckpt)])

        grammar = tmp_path / "sigma.cfg"
        grammar.write_text("%start S\nS -> S S\nS -> 'a'\nS -> 'b'\nS -> 'c'\n",
                           encoding="utf-8")
        out = tmp_path / "pred.jsonl"
        rc = main(["predict", "--ckpt", str(ckpt),
                   "--input", str(corpus / "test.jsonl"),
                   "--grammar", str(grammar), "--top-k", "3",
                   "--out", str(out)])
        assert rc == 0
        row = json.loads(out.read_text().splitlines()[0])
        assert set(row["tokens"]) <= {"a", "b", "c"}

    def test_unknown_model_key_fails_loudly(self, tmp_path, corpus, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(
            {"model": {"embeddng_dim": 4}, "training": {}}), encoding="utf-8")
        rc = main(["train", "--config", str(config), "--data", str(corpus),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "error:" in err and "embeddng_dim" in err

    def test_unknown_config_section_fails(self, tmp_path, corpus, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"modle": {}}), encoding="utf-8")
        rc = main(["train", "--config", str(config), "--data", str(corpus),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 1
        assert "modle" in capsys.readouterr().err

    def test_missing_data_file_is_reported(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        rc = main(["train", "--config", str(config),
                   "--data", str(tmp_path / "nowhere"),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_malformed_prediction_input(self, tmp_path, corpus, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--config", str(config), "--data", str(corpus),
              "--out", str(ckpt)])
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"no_source": []}\n', encoding="utf-8")
        rc = main(["predict", "--ckpt", str(ckpt), "--input", str(bad),
                   "--out", str(tmp_path / "out.jsonl")])
        assert rc == 1
        assert "line 1" in capsys.readouterr().err


class TestCheckCommands:
    def test_oracle_check_passes(self, capsys):
        assert main(["oracle-check", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "all 3 checks passed" in out

    def test_report_flags_failures(self, capsys):
        from structran.cli import _report
        results = [checks.CheckResult("good", 1e-9, 1e-4),
                   checks.CheckResult("bad", 0.5, 1e-4)]
        assert _report(results) == 1
        out = capsys.readouterr().out
        assert "FAIL bad" in out and "1 check(s) failed" in out
        assert _report([checks.CheckResult("good", 1e-9, 1e-4)]) == 0
