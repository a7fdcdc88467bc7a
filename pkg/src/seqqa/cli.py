"""``seqqa`` command line: ingest, train, eval, ask, bleu, plot."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import tensor as T
from .bleu import BleuInput, corpus_bleu
from .checkpoint import CheckpointFormatError, CheckpointIntegrityError, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusFormatError,
    EmptyTextError,
    build_vocab,
    decode_ids,
    encode_text,
    ingest,
    normalize_text,
    tokenize,
    truncate_all,
    truncate_text,
    write_jsonl,
)
from .evaluate import CompatibilityError, evaluate_model
from .model import (
    ModelConfig,
    SamplingSchedule,
    Seq2SeqModel,
    VectorFormatError,
    greedy_decode,
    load_pretrained_vectors,
)
from .training import DivergenceError, LossCurve, TrainConfig, encode_pairs, fit, split_corpus

log = logging.getLogger("seqqa")

MODEL_FLAGS = {
    "gru": "gru",
    "lstm": "lstm",
    "bilstm": "bilstm",
    "bilstm-emb": "bilstm_embeddings",
    "attention": "attention",
}


class UsageError(Exception):
    pass


def _positive_float(text: str) -> float:
    value = math.inf if text.lower() in ("inf", "none") else float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def load_pairs(path, fmt, max_chars):
    pairs, skipped = ingest(path, fmt)
    pairs, dropped = truncate_all(pairs, max_chars)
    return pairs, skipped, dropped


# ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    pairs, skipped = ingest(args.input, args.format)
    write_jsonl(pairs, args.output)
    print(f"kept {len(pairs)} skipped {skipped}")
    return 0


def cmd_train(args) -> int:
    variant = MODEL_FLAGS[args.model]
    if variant == "bilstm_embeddings" and not args.vectors:
        raise UsageError("--model bilstm-emb requires --vectors")
    if args.vectors and variant != "bilstm_embeddings":
        raise UsageError("--vectors only applies to --model bilstm-emb")
    tokenization = "word" if variant == "bilstm_embeddings" else args.tokenization
    pairs, skipped, dropped = load_pairs(args.corpus, args.format, args.max_chars)
    if not pairs:
        raise UsageError(f"{args.corpus}: no usable pairs")
    vocab = build_vocab(pairs, tokenization, args.min_count)
    encoded = encode_pairs(pairs, vocab)
    n_train = math.floor(0.7 * len(encoded))
    i_max = args.i_max or max(1, args.epochs * math.ceil(max(n_train, 1) / args.batch))
    tcfg = TrainConfig(
        batch_size=args.batch,
        learning_rate=args.lr,
        epochs_max=args.epochs,
        clip_norm=args.clip_norm,
        dropout_p=args.dropout,
        weight_decay=args.weight_decay,
        early_stop_patience=args.patience,
        seed=args.seed,
        schedule=SamplingSchedule(args.schedule, args.eps_min, i_max),
        max_chars=args.max_chars,
        early_stopping=not args.no_early_stop,
    )
    emb_dim = args.embedding_dim or (300 if variant == "bilstm_embeddings" else 64)
    mcfg = ModelConfig(
        variant=variant,
        vocab_size=len(vocab),
        hidden_size=args.hidden,
        embedding_dim=emb_dim,
        max_src_len=args.max_chars,
        tokenization=tokenization,
    )
    model = Seq2SeqModel(mcfg).initialize(T.make_rng(args.seed, "init"))
    coverage = None
    if args.vectors:
        table, coverage = load_pretrained_vectors(args.vectors, vocab, T.make_rng(args.seed, "data"), emb_dim)
        model.attach_embeddings(table, freeze=not args.train_embeddings)
    resolved = {
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "corpus": str(args.corpus),
        "pairs": len(pairs),
        "skipped": skipped,
        "dropped_by_truncation": dropped,
        "vector_coverage": coverage,
    }
    print(json.dumps(resolved, sort_keys=True), file=sys.stderr)

    ckpt, curve = fit(model, encoded, tcfg, vocab)
    ckpt.metadata["max_chars"] = args.max_chars
    ckpt.metadata["resolved_config"] = resolved
    save_checkpoint(ckpt, args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    curve.to_csv(loss_csv)
    if not args.no_plot:
        from .plotting import plot_loss_curve
        plot_loss_curve(curve, loss_csv.with_suffix(".png"),
                        f"{args.model} losses, sequence length {args.max_chars}")
    last = curve.records[-1]
    print(f"epochs {len(curve)} final train_loss {last.train_loss:.6f} val_loss {last.val_loss:.6f} "
          f"selected epoch {ckpt.metadata['epoch']}")
    return 0


def _eval_pairs(ckpt, corpus, fmt, split):
    meta = ckpt.metadata
    max_chars = int(meta.get("max_chars", ckpt.config.max_src_len))
    pairs, _, _ = load_pairs(corpus, fmt, max_chars)
    seed = int(meta.get("train_config", {}).get("seed", 0))
    if not pairs:
        raise ValueError(f"{corpus}: no usable pairs")
    train, test = split_corpus(pairs, seed)
    return {"train": train, "test": test, "all": pairs}[split]


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _eval_pairs(ckpt, args.corpus, args.format, args.split)
    if not pairs:
        raise ValueError(f"the {args.split} split is empty")
    report = evaluate_model(ckpt, pairs, args.split, args.max_out_len, args.max_n)
    text = report.to_json() if args.report == "json" else report.to_text() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.attention_plot and ckpt.config.variant == "attention":
        from .plotting import plot_attention
        model = ckpt.build_model()
        q = pairs[0].question
        ids = encode_text(q, ckpt.vocab)[: ckpt.config.max_src_len]
        dec = greedy_decode(ids, model, args.max_out_len or ckpt.config.max_src_len)
        out_toks = [ckpt.vocab.itos[i] for i in dec.ids] + ["<eos>"]
        plot_attention(dec.attention, tokenize(q, ckpt.vocab.kind)[: len(ids)], out_toks, args.attention_plot)
    print(f"{args.split} BLEU {report.bleu.score:.2f}", file=sys.stderr)
    return 0


def cmd_ask(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    vocab = ckpt.vocab
    cap = ckpt.config.max_src_len
    max_out = args.max_out_len or cap
    for line in sys.stdin:
        raw = line.strip()
        if raw.lower() == "quit":
            break
        try:
            text = normalize_text(raw)
        except EmptyTextError:
            print("warning: empty question skipped", file=sys.stderr)
            continue
        if len(tokenize(text, vocab.kind)) > cap:
            print(f"warning: question longer than {cap} tokens, truncated", file=sys.stderr)
            try:
                text = truncate_text(text, cap)
            except EmptyTextError:
                text = text[:cap]
        ids = encode_text(text, vocab)[:cap]
        dec = greedy_decode(ids, model, max_out)
        print(decode_ids(dec.ids, vocab), flush=True)
        if args.show_attention and dec.attention is not None:
            src = tokenize(text, vocab.kind)[: len(ids)]
            for step, row in enumerate(dec.attention):
                tok = vocab.itos[dec.ids[step]] if step < len(dec.ids) else "<eos>"
                weights = " ".join(f"{w:.3f}" for w in row[: len(src)])
                print(f"  {step:3d} {tok!r:>8} | {weights}", flush=True)
    return 0


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_bleu(args) -> int:
    cands = _read_lines(args.candidates)
    refs = [_read_lines(p) for p in args.references]
    for path, lines in zip(args.references, refs):
        if len(lines) != len(cands):
            raise ValueError(
                f"alignment error: {args.candidates} has {len(cands)} lines, {path} has {len(lines)}"
            )
    inputs = [BleuInput.from_text(c, [r[i] for r in refs]) for i, c in enumerate(cands)]
    rep = corpus_bleu(inputs, args.max_n)
    for n, (p, num, den) in enumerate(zip(rep.precisions, rep.numerators, rep.denominators), 1):
        print(f"p{n} = {p:.4f} ({num}/{den})")
    print(f"BP = {rep.bp:.6f} (c={rep.candidate_length}, r={rep.reference_length})")
    print(f"BLEU = {rep.score:.2f}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_length_panels, plot_loss_curve
    curves = {}
    for item in args.curves:
        label, _, path = item.partition("=")
        if not path:
            raise UsageError(f"expected LENGTH=PATH, got {item!r}")
        curves[int(label)] = LossCurve.from_csv(path)
    if len(curves) == 1:
        plot_loss_curve(next(iter(curves.values())), args.out, args.title)
    else:
        plot_length_panels(curves, args.out, args.title)
    print(args.out)
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize a JSONL/CSV pair file into JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--model", choices=list(MODEL_FLAGS), default="attention")
    p.add_argument("--tokenization", choices=["character", "word"], default="character")
    p.add_argument("--max-chars", type=int, default=50)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--embedding-dim", type=int, default=None)
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--no-early-stop", action="store_true",
                   help="run all epochs and keep the final weights")
    p.add_argument("--clip-norm", type=_positive_float, default=5.0)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--schedule", choices=["linear", "always_teacher"], default="linear")
    p.add_argument("--eps-min", type=float, default=0.25)
    p.add_argument("--i-max", type=int, default=None,
                   help="mini-batches to reach eps-min (default: epochs x batches per epoch)")
    p.add_argument("--vectors", help="pretrained text-format word vectors (bilstm-emb)")
    p.add_argument("--train-embeddings", action="store_true", help="do not freeze pretrained vectors")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--no-plot", action="store_true", help="skip the loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BLEU report for a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--max-n", type=int, default=4)
    p.add_argument("--max-out-len", type=int, default=None)
    p.add_argument("--report", choices=["text", "json"], default="text")
    p.add_argument("--out")
    p.add_argument("--attention-plot", help="PNG heatmap for the first question (attention models)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ask", help="answer questions read from stdin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-out-len", type=int, default=None)
    p.add_argument("--show-attention", action="store_true")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("bleu", help="corpus BLEU of line-aligned text files")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True, action="append")
    p.add_argument("--max-n", type=int, default=4)
    p.set_defaults(func=cmd_bleu)

    p = sub.add_parser("plot", help="render loss CSVs as a figure")
    p.add_argument("curves", nargs="+", metavar="LENGTH=CSV")
    p.add_argument("--title", default="losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


EXPECTED_ERRORS = (
    UsageError, OSError, ValueError, IndexError, CorpusFormatError, CheckpointFormatError,
    CheckpointIntegrityError, CompatibilityError, VectorFormatError, DivergenceError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
