import io
import json
from pathlib import Path

import jsonschema
import pytest

from seqqa.bleu import BleuInput, corpus_bleu
from seqqa.checkpoint import load_checkpoint
from seqqa.cli import main
from seqqa.evaluate import EvalReport, render_table

DATA = Path(__file__).parent / "data"
SCHEMA = json.loads((Path(__file__).parent.parent / "docs" / "report.schema.json").read_text())

FAST = ["--hidden", "6", "--embedding-dim", "5", "--epochs", "2", "--batch", "4", "--max-chars", "30"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "m.ckpt"
    code = main(["train", "--corpus", str(DATA / "medqa16.jsonl"), "--model", "attention",
                 "--out", str(out), *FAST])
    assert code == 0
    return out


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_train_writes_checkpoint_csv_and_plot(trained):
    csv = trained.with_suffix(".loss.csv")
    assert csv.read_text().splitlines()[0] == "epoch,train_loss,val_loss"
    assert len(csv.read_text().splitlines()) == 3
    assert csv.with_suffix(".png").stat().st_size > 0
    meta = load_checkpoint(trained).metadata
    assert meta["max_chars"] == 30
    assert meta["resolved_config"]["train"]["batch_size"] == 4


def test_train_is_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.ckpt"
        assert main(["train", "--corpus", str(DATA / "medqa16.jsonl"), "--model", "gru",
                     "--out", str(out), "--no-plot", *FAST]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert outs[0].with_suffix(".loss.csv").read_bytes() == outs[1].with_suffix(".loss.csv").read_bytes()


def test_eval_text_report(trained, capsys):
    code, out, err = run(["eval", "--checkpoint", str(trained), "--corpus", str(DATA / "medqa16.jsonl"),
                          "--split", "train"], capsys)
    assert code == 0
    assert out.startswith("BLEU for Training data")
    assert "Attention" in out and "30 Chars" in out
    assert "Ground Truth Text:" in out and "Predicted Answer:" in out
    assert "train BLEU" in err


def test_eval_json_report_matches_schema(trained, tmp_path, capsys):
    dest = tmp_path / "r.json"
    code, _, _ = run(["eval", "--checkpoint", str(trained), "--corpus", str(DATA / "medqa16.jsonl"),
                      "--report", "json", "--out", str(dest)], capsys)
    assert code == 0
    report = json.loads(dest.read_text())
    jsonschema.validate(report, SCHEMA)
    assert report["split"] == "test" and len(report["pairs"]) == 16 - 11


def test_eval_attention_plot(trained, tmp_path, capsys):
    png = tmp_path / "attn.png"
    code, _, _ = run(["eval", "--checkpoint", str(trained), "--corpus", str(DATA / "medqa16.jsonl"),
                      "--attention-plot", str(png)], capsys)
    assert code == 0 and png.read_bytes()[:4] == b"\x89PNG"


def test_ask(trained, capsys, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO("What is asthma?\n\n" + "x" * 80 + "\nquit\nnever read\n"))
    code, out, err = run(["ask", "--checkpoint", str(trained), "--show-attention"], capsys)
    assert code == 0
    assert "empty question skipped" in err
    assert "truncated" in err
    assert "|" in out  # attention rows


def test_bleu_command(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("the the the the the the the\n")
    (tmp_path / "r1.txt").write_text("the cat is on the mat\n")
    (tmp_path / "r2.txt").write_text("there is a cat on the mat\n")
    code, out, _ = run(["bleu", "--candidates", str(tmp_path / "c.txt"),
                        "--references", str(tmp_path / "r1.txt"),
                        "--references", str(tmp_path / "r2.txt")], capsys)
    assert code == 0
    assert "p1 = 0.2857 (2/7)" in out
    assert "BLEU = 0.00" in out


def test_bleu_line_mismatch(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("a\nb\n")
    (tmp_path / "r.txt").write_text("a\n")
    code, _, err = run(["bleu", "--candidates", str(tmp_path / "c.txt"),
                        "--references", str(tmp_path / "r.txt")], capsys)
    assert code == 1 and "alignment" in err


def test_ingest(tmp_path, capsys):
    src = tmp_path / "raw.csv"
    src.write_text("question,answer\nWhat is X?,It is Y.\n  ,\n")
    code, out, _ = run(["ingest", "--input", str(src), "--output", str(tmp_path / "o.jsonl")], capsys)
    assert code == 0 and out.strip() == "kept 1 skipped 1"
    assert json.loads((tmp_path / "o.jsonl").read_text()) == {"question": "what is x ?", "answer": "it is y ."}


def test_plot_command(trained, tmp_path, capsys):
    csv = trained.with_suffix(".loss.csv")
    out = tmp_path / "panels.png"
    code, _, _ = run(["plot", f"50={csv}", f"100={csv}", "--out", str(out)], capsys)
    assert code == 0 and out.stat().st_size > 0


class TestErrors:
    def test_embeddings_need_vectors(self, tmp_path, capsys):
        code, _, err = run(["train", "--corpus", str(DATA / "medqa16.jsonl"), "--model", "bilstm-emb",
                            "--out", str(tmp_path / "x")], capsys)
        assert code == 2 and "--vectors" in err

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")],
                           capsys)
        assert code == 1 and "error:" in err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + b"\0" * 20)
        code, _, err = run(["eval", "--checkpoint", str(bad), "--corpus", str(DATA / "medqa16.jsonl")], capsys)
        assert code == 1 and "magic" in err

    def test_argparse_usage(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train"])
        assert info.value.code == 2


def test_bilstm_embeddings_with_vectors(tmp_path, capsys):
    vec = tmp_path / "v.txt"
    vec.write_text("what " + " ".join(["0.1"] * 300) + "\nis " + " ".join(["-0.2"] * 300) + "\n")
    out = tmp_path / "e.ckpt"
    code, _, err = run(["train", "--corpus", str(DATA / "medqa16.jsonl"), "--model", "bilstm-emb",
                        "--vectors", str(vec), "--min-count", "1", "--out", str(out), "--no-plot",
                        "--hidden", "4", "--epochs", "1", "--batch", "8", "--max-chars", "30"], capsys)
    assert code == 0
    resolved = json.loads(err.splitlines()[0])
    assert resolved["vector_coverage"] == 2
    ckpt = load_checkpoint(out)
    assert ckpt.frozen == ["embedding"] and ckpt.config.embedding_dim == 300


def test_render_table_layout():
    def rep(v, n, s, score_text):
        bleu = corpus_bleu([BleuInput.from_text(score_text, ["a b c d e"])])
        return EvalReport(v, n, s, bleu)

    table = render_table([rep("attention", 50, "train", "a b c d e"), rep("gru", 100, "train", "x"),
                          rep("gru", 50, "test", "a b c d e")])
    lines = table.splitlines()
    assert lines[0] == "BLEU for Training data"
    assert "50 Chars" in lines[1] and "100 Chars" in lines[1]
    assert lines[2].startswith("GRU") and lines[3].startswith("Attention")
    assert "100.00" in lines[3]
    assert "BLEU for Testing data" in table
