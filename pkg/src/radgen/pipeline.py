"""End-to-end wiring: retrieve a similar report, fuse, generate, score."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from radgen import tensor as T
from radgen.data import CorpusExample, resolve_samples
from radgen.exceptions import ConfigError
from radgen.io import Settings
from radgen.metrics import score_corpus
from radgen.model import ModelConfig, Params
from radgen.retrieval import FeatureRecord, RetrievalIndex
from radgen.text import Vocab, build_vocab, decode
from radgen.training import Sample, beam_search, retrieved_tokens, train

logger = logging.getLogger(__name__)

ABLATION_MODES = ("baseline", "extractor", "extractor+retrieval")
ABLATION_LABELS = {"baseline": "Baseline", "extractor": "+Extractor", "extractor+retrieval": "+Extractor+Retrieval"}
TABLE_COLUMNS = ["Method", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR"]


def build_index(samples: Sequence[Sample], split: Optional[str] = "train") -> RetrievalIndex:
    chosen = [s for s in samples if split is None or s.split == split]
    return RetrievalIndex([FeatureRecord(s.id, s.features) for s in chosen], {s.id: s.report for s in chosen})


@dataclass
class FitResult:
    vocab: Vocab
    index: Optional[RetrievalIndex]
    config: ModelConfig
    params: Params
    log: List[Dict]


def fit(samples: Sequence[Sample], settings: Settings, seed: int = 0, vocab: Optional[Vocab] = None,
        index: Optional[RetrievalIndex] = None) -> FitResult:
    train_set = [s for s in samples if s.split == "train"]
    if not train_set:
        raise ConfigError("training split is empty")
    if vocab is None:
        vocab = build_vocab([s.report for s in train_set], settings.min_freq)
    d_f = int(np.asarray(train_set[0].features).shape[1])
    config = settings.model_config(len(vocab), d_f)
    if config.use_retrieval and index is None:
        index = build_index(samples)
    params, log = train(samples, index if config.use_retrieval else None, vocab, config,
                        settings.train_config(), seed=seed)
    return FitResult(vocab, index if config.use_retrieval else None, config, params, log)


def generate(samples: Sequence[Sample], params: Params, config: ModelConfig, vocab: Vocab,
             index: Optional[RetrievalIndex] = None, beam: int = 3, top_k: int = 1,
             workers: int = 1, exclude_self: bool = False) -> List[Tuple[str, str]]:
    """Beam-decode a report for every sample; output order always follows ``samples``.

    ``exclude_self`` applies the training-time retrieval policy (a sample
    never retrieves its own report), for regenerating training examples.
    """
    if config.use_retrieval and index is None:
        raise ConfigError("model uses retrieval but no retrieval index was given")

    def one(sample: Sample) -> Tuple[str, str]:
        with T.no_grad():
            rep = retrieved_tokens(index if config.use_retrieval else None, sample.features, vocab,
                                   config.max_len, top_k, sample.id if exclude_self else None)
            ids = beam_search(sample.features, rep, params, config, beam=beam)
        return sample.id, decode(ids, vocab)

    if workers <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


def run_ablation(examples: Sequence[CorpusExample], store: Optional[Sequence[FeatureRecord]], settings: Settings,
                 seed: int = 0, modes: Sequence[str] = ABLATION_MODES, workers: int = 1) -> List[Dict]:
    """Train and score each ablation configuration on the same corpus, vocab and seed.

    ``baseline`` uses stub features and no retrieval, ``extractor`` swaps in
    the corpus's stored features, ``extractor+retrieval`` also enables the
    fusion branch. Scores come from the test split.
    """
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}; choose from {ABLATION_MODES}")
    train_reports = [ex.report for ex in examples if ex.split == "train"]
    if not train_reports:
        raise ConfigError("training split is empty")
    vocab = build_vocab(train_reports, settings.min_freq)
    rows = []
    for mode in modes:
        stub = mode == "baseline"
        samples = resolve_samples(examples, store, settings.d_f, settings.p, settings.stub_seed, force_stub=stub)
        run = settings.replace(use_retrieval=mode == "extractor+retrieval")
        result = fit(samples, run, seed=seed, vocab=vocab)
        test = [s for s in samples if s.split == "test"]
        if not test:
            raise ConfigError("test split is empty")
        hyps = generate(test, result.params, result.config, vocab, result.index, run.beam, run.top_k, workers)
        report = score_corpus([(h, s.report) for (_, h), s in zip(hyps, test)], [s.id for s in test])
        logger.info("ablation %s: %s", mode, report.row())
        rows.append({"Method": ABLATION_LABELS[mode], "mode": mode,
                     **dict(zip(TABLE_COLUMNS[1:], report.row())),
                     "final_train_loss": result.log[-1]["train_loss"]})
    return rows


def format_table(rows: Sequence[Dict]) -> str:
    lines = [" | ".join(f"{c:>20}" if i == 0 else f"{c:>7}" for i, c in enumerate(TABLE_COLUMNS))]
    for row in rows:
        cells = [f"{row['Method']:>20}"] + [f"{row[c]:7.3f}" for c in TABLE_COLUMNS[1:]]
        lines.append(" | ".join(cells))
    return "\n".join(lines)
