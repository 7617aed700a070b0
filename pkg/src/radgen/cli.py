"""Command-line entry point: ``radgen <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical/training error. Diagnostics go to stderr prefixed with a
stable error code. ``RADGEN_LOG_LEVEL`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from radgen.data import load_corpus, resolve_samples, save_corpus, synthetic_corpus
from radgen.exceptions import DataError, RadgenError, UsageError
from radgen.io import Checkpoint, Settings, load_checkpoint, parse_config, read_jsonl, save_checkpoint, write_jsonl
from radgen.metrics import score_corpus
from radgen.pipeline import ABLATION_MODES, TABLE_COLUMNS, build_index, fit, format_table, generate, run_ablation
from radgen.retrieval import FeatureRecord, RetrievalIndex, extract_stub, load_features, retrieve, save_features
from radgen.text import Vocab, build_vocab

logger = logging.getLogger("radgen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _settings(args) -> Settings:
    """Defaults, then the --config file, then --set overrides (later keys win)."""
    text = Path(args.config).read_text(encoding="utf-8") if getattr(args, "config", None) else ""
    overrides = getattr(args, "set", None) or []
    return parse_config(text + "\n" + "\n".join(overrides), args.config or "--set")


def _samples(args, settings, force_stub=False):
    examples = load_corpus(args.corpus)
    store = load_features(args.features) if getattr(args, "features", None) else None
    return examples, resolve_samples(examples, store, settings.d_f, settings.p, settings.stub_seed, force_stub)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples, records = synthetic_corpus(args.n, args.seed, args.d_f, args.p)
    save_corpus(out / "corpus.jsonl", examples)
    save_features(out / "features.fvec", records)
    print(json.dumps({"corpus": str(out / "corpus.jsonl"), "features": str(out / "features.fvec"), "n": len(examples)}))
    return 0


def cmd_build_vocab(args) -> int:
    examples = load_corpus(args.corpus)
    min_freq = args.min_freq if args.min_freq is not None else _settings(args).min_freq
    vocab = build_vocab([ex.report for ex in examples if ex.split == args.split], min_freq)
    vocab.save(args.out)
    print(json.dumps({"vocab": args.out, "size": len(vocab)}))
    return 0


def cmd_extract_stub(args) -> int:
    settings = _settings(args)
    examples = load_corpus(args.corpus)
    records = [FeatureRecord(ex.id, extract_stub(ex.id, settings.d_f, settings.p, settings.stub_seed)) for ex in examples]
    save_features(args.out, records)
    print(json.dumps({"features": args.out, "records": len(records)}))
    return 0


def cmd_index(args) -> int:
    settings = _settings(args)
    _, samples = _samples(args, settings)
    index = build_index(samples, args.split)
    index.save(args.out)
    print(json.dumps({"index": args.out, "records": len(index)}))
    return 0


def cmd_retrieve(args) -> int:
    index = RetrievalIndex.load(args.index)
    if args.query_id in index.pooled and not args.corpus:
        query = index.records[index.ids.index(args.query_id)].features
    elif args.corpus:
        _, samples = _samples(args, _settings(args))
        match = [s for s in samples if s.id == args.query_id]
        if not match:
            raise DataError(f"query id {args.query_id!r} not found in {args.corpus}")
        query = match[0].features
    else:
        raise DataError(f"query id {args.query_id!r} is not in the index; pass --corpus to resolve it")
    hits = retrieve(index, query, args.k, args.query_id if args.exclude_self else None)
    for rid, score, report in hits:
        print(json.dumps({"id": rid, "score": score, "report": report}, ensure_ascii=False))
    return 0


def cmd_train(args) -> int:
    settings = _settings(args)
    _, samples = _samples(args, settings)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.load(args.vocab) if args.vocab else None
    result = fit(samples, settings, seed=args.seed, vocab=vocab)
    result.vocab.save(out / "vocab.txt")
    if result.index is not None:
        result.index.save(out / "index")
    ckpt = Checkpoint(result.config, result.params, result.vocab.digest(), args.seed, settings.epochs)
    save_checkpoint(out / "checkpoint.bin", ckpt)
    write_jsonl(out / "metrics.jsonl", result.log)
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "metrics": str(out / "metrics.jsonl"),
                      "final_train_loss": result.log[-1]["train_loss"]}))
    return 0


def cmd_generate(args) -> int:
    settings = _settings(args)
    ckpt_path = Path(args.checkpoint)
    vocab = Vocab.load(args.vocab or ckpt_path.parent / "vocab.txt")
    ckpt = load_checkpoint(ckpt_path, expected_vocab_hash=vocab.digest())
    index = None
    if ckpt.config.use_retrieval:
        index = RetrievalIndex.load(args.index or ckpt_path.parent / "index")
    _, samples = _samples(args, settings)
    chosen = [s for s in samples if s.split == args.split]
    beam = args.beam if args.beam is not None else settings.beam
    hyps = generate(chosen, ckpt.params, ckpt.config, vocab, index, beam, settings.top_k, args.workers)
    write_jsonl(args.out, ({"id": i, "hypothesis": h} for i, h in hyps))
    print(json.dumps({"hyps": args.out, "count": len(hyps)}))
    return 0


def cmd_evaluate(args) -> int:
    hyps = read_jsonl(args.hyps)
    refs = {}
    for row in read_jsonl(args.refs):
        if "id" not in row or "report" not in row:
            raise DataError(f"{args.refs}: reference rows need 'id' and 'report'")
        refs[str(row["id"])] = str(row["report"])
    pairs, ids = [], []
    for row in hyps:
        rid = str(row.get("id"))
        if rid not in refs:
            raise DataError(f"no reference for hypothesis id {rid!r}")
        pairs.append((str(row.get("hypothesis", "")), refs[rid]))
        ids.append(rid)
    report = score_corpus(pairs, ids)
    text = json.dumps(report.to_dict(), sort_keys=False)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    settings = _settings(args)
    examples = load_corpus(args.corpus)
    store = load_features(args.features) if args.features else None
    rows = run_ablation(examples, store, settings, seed=args.seed, modes=args.mode or ABLATION_MODES,
                        workers=args.workers)
    payload = {"columns": TABLE_COLUMNS, "rows": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(format_table(rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radgen", description="Retrieval-augmented radiology report generation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def settings_opts(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    def data_opts(p):
        p.add_argument("--corpus", required=True, help="corpus JSONL")
        p.add_argument("--features", help="FVEC feature store for non-stub feature_ref values")

    p = sub.add_parser("synth", help="write a synthetic template corpus and its feature store")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-f", type=int, default=32)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="build vocab.txt from a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--split", default="train")
    settings_opts(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("extract-stub", help="run the stub extractor over every corpus id")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    settings_opts(p)
    p.set_defaults(func=cmd_extract_stub)

    p = sub.add_parser("index", help="build a retrieval index directory")
    data_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    settings_opts(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query an index with one example's features")
    p.add_argument("--index", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--corpus")
    p.add_argument("--features")
    settings_opts(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train a model; writes checkpoint.bin, metrics.jsonl, vocab.txt, index/")
    data_opts(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab")
    p.add_argument("--out-dir", required=True)
    settings_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-decode reports for one split")
    data_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--index")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    settings_opts(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyps", required=True)
    p.add_argument("--refs", required=True, help="JSONL with id and report (a corpus file works)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the baseline / +extractor / +extractor+retrieval comparison")
    data_opts(p)
    p.add_argument("--mode", action="append", choices=ABLATION_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    settings_opts(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RADGEN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing subcommand")
        return args.func(args)
    except RadgenError as exc:
        print(f"{exc.code} {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"E210 IOError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
