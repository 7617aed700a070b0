"""Flat key-value config files, single-file checkpoints, and JSONL helpers."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from radgen.exceptions import CheckpointMismatchError, ConfigError, DataError, FormatError
from radgen.model import ModelConfig, Params, check_params, param_names
from radgen.tensor import Tensor
from radgen.training import TrainConfig

CKPT_MAGIC = b"RGCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBI")


@dataclass
class Settings:
    """Every tunable of a pipeline run, with defaults used when a config file omits a key."""

    # model
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 512
    dropout_p: float = 0.1
    max_len: int = 60
    literal_residual: bool = True
    use_retrieval: bool = True
    # optimisation and decoding
    epochs: int = 100
    lr_extractor: float = 5e-5
    lr_model: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    beam: int = 3
    top_k: int = 1
    min_freq: int = 3
    # stub extractor
    d_f: int = 32
    p: int = 2
    stub_seed: int = 0

    def model_config(self, vocab_size: int, d_f: Optional[int] = None, **overrides) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)} - {"vocab_size", "d_f"}
        kw = {k: getattr(self, k) for k in keys}
        kw.update(overrides)
        return ModelConfig(vocab_size=vocab_size, d_f=d_f if d_f is not None else self.d_f, **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def replace(self, **changes) -> "Settings":
        d = asdict(self)
        d.update(changes)
        return Settings(**d)


def _parse_value(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_config(text: str, source: str = "<config>") -> Settings:
    """Parse ``key = value`` lines (``#`` starts a comment) over the defaults."""
    types = {f.name: f.type for f in fields(Settings)}
    kinds = {"int": int, "float": float, "bool": bool}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, kinds[types[key]])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return Settings(**values)


def load_config(path) -> Settings:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def dump_config(settings: Settings) -> str:
    out = []
    for k, v in asdict(settings).items():
        out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    vocab_hash: str
    seed: int
    epoch: int
    version: int = CKPT_VERSION
    extra: Dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    check_params(ckpt.params, ckpt.config)
    entries, blobs, offset = [], [], 0
    for name in param_names(ckpt.config):
        blob = np.ascontiguousarray(ckpt.params[name].data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(ckpt.params[name].shape), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = _canonical({
        "format_version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
        "tensors": entries,
    })
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expected_vocab_hash: Optional[str] = None,
                    expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; refuse it when vocab hash or config differ from the expected ones."""
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    _, version, mlen = _CKPT_HEADER.unpack_from(buf, 0)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    start = _CKPT_HEADER.size
    if len(buf) < start + mlen:
        raise FormatError(f"{path}: truncated manifest", offset=len(buf))
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})", offset=start) from exc
    base = start + mlen
    params = {}
    for entry in manifest["tensors"]:
        lo, hi = base + entry["offset"], base + entry["offset"] + entry["length"]
        if hi > len(buf):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past end of file", offset=len(buf))
        shape = tuple(entry["shape"])
        if entry["length"] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: tensor {entry['name']!r} length does not match shape {shape}", offset=lo)
        data = np.frombuffer(buf[lo:hi], dtype="<f4").astype(np.float32).reshape(shape)
        params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    end = base + sum(e["length"] for e in manifest["tensors"])
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor payload", offset=end)
    try:
        check_params(params, config)
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}", offset=base) from exc
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise CheckpointMismatchError(f"{path}: checkpoint was trained with a different vocabulary")
    if expected_config is not None and expected_config != config:
        raise CheckpointMismatchError(f"{path}: checkpoint config {config} does not match {expected_config}")
    return Checkpoint(config, params, manifest["vocab_hash"], manifest["seed"], manifest["epoch"],
                      manifest["format_version"], manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON line ({exc})") from exc
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            rows.append(row)
    return rows
