"""Corpus records, JSONL loading, feature resolution and a synthetic template corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from radgen.exceptions import DataError
from radgen.retrieval import FeatureRecord, extract_stub
from radgen.training import Sample

SPLITS = ("train", "val", "test")
STUB_REF = "stub"


@dataclass
class CorpusExample:
    id: str
    feature_ref: str
    report: str
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)


def load_corpus(path) -> List[CorpusExample]:
    """Read corpus JSONL in file order, validating ids, splits and reports."""
    out: List[CorpusExample] = []
    seen: Dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                ex = CorpusExample(str(row["id"]), str(row.get("feature_ref", STUB_REF)), str(row.get("report", "")),
                                   str(row["split"]))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed corpus line ({exc})") from exc
            if ex.id in seen:
                raise DataError(f"{path}: duplicate id {ex.id!r} on lines {seen[ex.id]} and {lineno}")
            if ex.split not in SPLITS:
                raise DataError(f"{path}:{lineno}: split {ex.split!r} is not one of {SPLITS}")
            if ex.split != "test" and not ex.report.strip():
                raise DataError(f"{path}:{lineno}: empty report in {ex.split} split")
            seen[ex.id] = lineno
            out.append(ex)
    return out


def save_corpus(path, examples: Sequence[CorpusExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def resolve_samples(examples: Sequence[CorpusExample], store: Optional[Sequence[FeatureRecord]] = None,
                    d_f: int = 32, p: int = 2, stub_seed: int = 0, force_stub: bool = False) -> List[Sample]:
    """Attach a feature matrix to every example.

    ``feature_ref == "stub"`` (or ``force_stub``) uses the deterministic stub
    extractor on the example id; anything else names a record in ``store``.
    """
    by_id = {r.id: r.features for r in store or ()}
    out = []
    for ex in examples:
        if force_stub or ex.feature_ref == STUB_REF:
            feats = extract_stub(ex.id, d_f, p, stub_seed)
        elif ex.feature_ref in by_id:
            feats = by_id[ex.feature_ref]
        else:
            raise DataError(f"example {ex.id!r}: feature record {ex.feature_ref!r} not found")
        out.append(Sample(ex.id, feats, ex.report, ex.split))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

FINDINGS = {
    "heart": ["the heart size is normal", "the heart is mildly enlarged", "there is moderate cardiomegaly"],
    "mediastinum": ["the mediastinal contours are within normal limits", "the mediastinum is widened"],
    "lungs": ["the lungs are clear", "there is a focal opacity in the right lower lobe",
              "there are bilateral interstitial opacities"],
    "pleura": ["no pleural effusion or pneumothorax", "there is a small left pleural effusion",
               "there is a small right pneumothorax"],
    "bones": ["the osseous structures are intact", "there are degenerative changes of the thoracic spine"],
}


def template_report(choice: Sequence[int]) -> str:
    return ". ".join(FINDINGS[slot][c] for slot, c in zip(FINDINGS, choice)) + "."


def synthetic_corpus(n: int, seed: int = 0, d_f: int = 32, p: int = 2, noise: float = 0.1,
                     ratios=(0.7, 0.1, 0.2)):
    """Template reports with compositional image features.

    Each finding value owns a fixed random feature pattern; an example's
    features are the sum of its findings' patterns plus Gaussian noise, so
    similar findings give similar features. Splits follow ``ratios`` over a
    seeded shuffle. Returns ``(examples, records)``.
    """
    rng = np.random.default_rng(seed)
    examples, records = [], []
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    order = rng.permutation(n)
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    for i in range(n):
        choice = [int(rng.integers(len(v))) for v in FINDINGS.values()]
        feats = sum(extract_stub(f"{slot}={c}", d_f, p, seed) for slot, c in zip(FINDINGS, choice))
        feats = feats + noise * rng.standard_normal((p, d_f))
        rid = f"s{i:05d}"
        examples.append(CorpusExample(rid, rid, template_report(choice), split_of[i]))
        records.append(FeatureRecord(rid, feats.astype(np.float32)))
    return examples, records
