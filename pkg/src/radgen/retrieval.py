"""Image features, the FVEC store, and nearest-report retrieval by cosine similarity."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from radgen.exceptions import DataError, DegenerateInputError, DimensionError, FormatError, RetrievalError

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_HEADER = struct.Struct("<4sBIII")
_U32 = struct.Struct("<I")
_DIGEST_DIM = 32


@dataclass
class FeatureRecord:
    id: str
    features: np.ndarray  # (p, d_f)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DimensionError(f"record {self.id!r}: features must be a non-empty p x d_f matrix, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"record {self.id!r}: non-finite feature values")

    def __eq__(self, other):
        return (
            isinstance(other, FeatureRecord)
            and self.id == other.id
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


def extract_stub(image: Union[bytes, str], d_f: int, p: int, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in extractor: a seeded random projection of a SHA-256 digest.

    ``image`` is raw image bytes or an identifier string. Returns a float32
    ``(p, d_f)`` matrix; the same ``(image, seed)`` always gives the same bits.
    """
    if d_f < 1 or p < 1:
        raise DimensionError(f"d_f and p must be >= 1, got d_f={d_f}, p={p}")
    content = image.encode("utf-8") if isinstance(image, str) else bytes(image)
    digest = np.frombuffer(hashlib.sha256(content).digest(), dtype=np.uint8)
    code = digest.astype(np.float64) / 127.5 - 1.0
    proj = np.random.default_rng(seed).standard_normal((_DIGEST_DIM, p * d_f))
    return (code @ proj / np.sqrt(_DIGEST_DIM)).reshape(p, d_f).astype(np.float32)


# ---------------------------------------------------------------------------
# FVEC container


def save_features(path, records: Sequence[FeatureRecord]) -> None:
    records = list(records)
    p, d_f = records[0].features.shape if records else (0, 0)
    ids = []
    for rec in records:
        if rec.features.shape != (p, d_f):
            raise DimensionError(f"record {rec.id!r} has shape {rec.features.shape}, store uses {(p, d_f)}")
        if not rec.id or "\n" in rec.id:
            raise DataError(f"record id {rec.id!r} is empty or contains a newline")
        ids.append(rec.id)
    id_block = "\n".join(ids).encode("utf-8")
    payload = np.concatenate([r.features.reshape(-1) for r in records]) if records else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, len(records), p, d_f))
        fh.write(payload.astype("<f4").tobytes())
        fh.write(_U32.pack(len(id_block)))
        fh.write(id_block)


def load_features(path) -> List[FeatureRecord]:
    """Read an FVEC file; any structural defect raises :class:`FormatError`."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FVEC_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FVEC_MAGIC!r}", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    _, version, count, p, d_f = _HEADER.unpack_from(buf, 0)
    if version != FVEC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if count and (p < 1 or d_f < 1):
        raise FormatError(f"{path}: zero feature dimensions with {count} records", offset=9)
    start = _HEADER.size
    end = start + 4 * count * p * d_f
    if len(buf) < end:
        raise FormatError(f"{path}: truncated payload, need {end} bytes, file has {len(buf)}", offset=len(buf))
    if len(buf) < end + _U32.size:
        raise FormatError(f"{path}: missing id block length", offset=end)
    (id_len,) = _U32.unpack_from(buf, end)
    id_start = end + _U32.size
    if len(buf) != id_start + id_len:
        raise FormatError(f"{path}: id block declares {id_len} bytes, found {len(buf) - id_start}", offset=id_start)
    try:
        id_text = buf[id_start:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: id block is not UTF-8", offset=id_start + exc.start) from exc
    ids = id_text.split("\n") if id_text else []
    if len(ids) != count:
        raise FormatError(f"{path}: header declares {count} records but id block has {len(ids)}", offset=id_start)
    values = np.frombuffer(buf, dtype="<f4", count=count * p * d_f, offset=start).astype(np.float32)
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        raise FormatError(f"{path}: non-finite feature value", offset=start + 4 * int(bad[0]))
    values = values.reshape(count, p, d_f) if count else values
    return [FeatureRecord(rid, values[i]) for i, rid in enumerate(ids)]


# ---------------------------------------------------------------------------
# similarity


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pool(features) -> np.ndarray:
    """Mean over feature rows, then unit L2 norm (float64)."""
    x = np.asarray(features, dtype=np.float64)
    v = x.mean(axis=0) if x.ndim == 2 else x.reshape(-1)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise DegenerateInputError("pooled feature vector has zero or non-finite norm")
    return v / norm


Hit = Tuple[str, float, str]


class RetrievalIndex:
    """Immutable exhaustive-search store over (image features, report) pairs."""

    def __init__(self, records: Sequence[FeatureRecord], report_map: Dict[str, str]):
        self.records = list(records)
        self.report_map = dict(report_map)
        self.ids = [r.id for r in self.records]
        if len(set(self.ids)) != len(self.ids):
            raise DataError("retrieval index has duplicate record ids")
        missing = [rid for rid in self.ids if rid not in self.report_map]
        if missing:
            raise DataError(f"no report for index record {missing[0]!r}")
        dims = {r.features.shape[1] for r in self.records}
        if len(dims) > 1:
            raise DimensionError(f"index mixes feature dimensions {sorted(dims)}")
        self.d_f = dims.pop() if dims else None
        self._matrix = np.stack([pool(r.features) for r in self.records]) if self.records else np.zeros((0, 0))
        self.pooled = {rid: self._matrix[i] for i, rid in enumerate(self.ids)}

    def __len__(self):
        return len(self.records)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_features(directory / "features.fvec", self.records)
        with open(directory / "reports.jsonl", "w", encoding="utf-8") as fh:
            for rid in self.ids:
                fh.write(json.dumps({"id": rid, "report": self.report_map[rid]}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, directory) -> "RetrievalIndex":
        directory = Path(directory)
        return cls(load_features(directory / "features.fvec"), load_report_map(directory / "reports.jsonl"))


def load_report_map(path) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[str(row["id"])] = str(row["report"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed report line ({exc})") from exc
    return out


def retrieve(index: RetrievalIndex, query, k: int = 1, exclude_id: Optional[str] = None) -> List[Hit]:
    """Top-``k`` records by cosine similarity of pooled features.

    Results are ordered by descending score, ties broken by ascending id.
    ``exclude_id`` removes one record (the query itself during training).
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    q = pool(query)
    if len(index) and q.shape[0] != index.d_f:
        raise DimensionError(f"query dimension {q.shape[0]} does not match index dimension {index.d_f}")
    scores = index._matrix @ q if len(index) else np.zeros(0)
    candidates = [(rid, float(s)) for rid, s in zip(index.ids, scores) if rid != exclude_id]
    if not candidates:
        raise RetrievalError("retrieval index is empty after exclusion")
    candidates.sort(key=lambda h: (-h[1], h[0]))
    return [(rid, s, index.report_map[rid]) for rid, s in candidates[:k]]
