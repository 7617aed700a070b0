"""Retrieval-fused Transformer encoder-decoder for report generation.

The encoder takes image feature rows (no positional encoding) and, per
layer, mixes image self-attention with cross-attention over the embedded
retrieved report::

    fused = attend(img, img, img) + w * attend(img, rep, rep)

where ``w`` is a learnable scalar per layer, initialised at zero. The
decoder is a conventional pre-norm Transformer decoder over the report
prefix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Dict, List, Optional, Sequence

import numpy as np

from radgen import tensor as T
from radgen.exceptions import ConfigError, DimensionError, VocabRangeError
from radgen.tensor import Tensor
from radgen.text import BOS, PAD

EXTRACTOR_PARAMS = ("img_proj",)


@dataclass
class ModelConfig:
    vocab_size: int
    d_f: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 512
    dropout_p: float = 0.1
    max_len: int = 60
    literal_residual: bool = True
    use_retrieval: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_f", "d_model", "n_heads", "n_layers", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


Params = Dict[str, Tensor]


def _attn_names(prefix: str) -> List[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


def _ln_names(prefix: str) -> List[str]:
    return [f"{prefix}.gain", f"{prefix}.bias"]


def _ffn_names(prefix: str) -> List[str]:
    return [f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2"]


def param_names(config: ModelConfig) -> List[str]:
    """The fixed, ordered parameter name set implied by ``config``."""
    names = ["tok_embed", "img_proj"]
    for i in range(config.n_layers):
        p = f"enc.{i}"
        names += _attn_names(f"{p}.self")
        if config.use_retrieval:
            names += _attn_names(f"{p}.cross") + [f"{p}.mix"]
        names += _ln_names(f"{p}.ln1") + _ln_names(f"{p}.ln2") + _ffn_names(f"{p}.ffn")
    if not config.literal_residual:
        names += _ln_names("enc.ln_f")
    for i in range(config.n_layers):
        p = f"dec.{i}"
        names += _attn_names(f"{p}.self") + _attn_names(f"{p}.cross")
        names += _ln_names(f"{p}.ln1") + _ln_names(f"{p}.ln2") + _ln_names(f"{p}.ln3") + _ffn_names(f"{p}.ffn")
    names += _ln_names("dec.ln_f") + ["out.w", "out.b"]
    return names


def param_shape(name: str, config: ModelConfig) -> tuple:
    d, leaf = config.d_model, name.rsplit(".", 1)[-1]
    if name == "tok_embed":
        return (config.vocab_size, d)
    if name == "img_proj":
        return (config.d_f, d)
    if name == "out.w":
        return (d, config.vocab_size)
    if name == "out.b":
        return (config.vocab_size,)
    if leaf == "mix":
        return ()
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    if leaf == "w1":
        return (d, config.d_ff)
    if leaf == "b1":
        return (config.d_ff,)
    if leaf == "w2":
        return (config.d_ff, d)
    return (d,)  # b2, layernorm gain/bias


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Xavier-uniform projections, N(0, 1/d_model) embeddings, zero biases and mixing weights."""
    params = {}
    for name in param_names(config):
        shape = param_shape(name, config)
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_embed":
            value = rng.normal(0.0, config.d_model ** -0.5, size=shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif leaf == "gain":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


def check_params(params: Params, config: ModelConfig) -> None:
    expected = param_names(config)
    if sorted(params) != sorted(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter set does not match config (missing {missing}, unexpected {extra})")
    for name in expected:
        if params[name].shape != param_shape(name, config):
            raise DimensionError(f"{name}: shape {params[name].shape} != {param_shape(name, config)}")


@lru_cache(maxsize=16)
def _positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.power(10000.0, -(np.arange(d) // 2 * 2) / d)
    angles = pos * rate[None, :]
    enc = np.where(np.arange(d) % 2 == 0, np.sin(angles), np.cos(angles))
    enc.setflags(write=False)
    return enc


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    return _positions(n, d)


# ---------------------------------------------------------------------------
# building blocks


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` with ``mask`` (True = blocked) applied before the softmax."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    return T.matmul(T.softmax_rows(scores, mask), v)


def multi_head(xq: Tensor, xkv: Tensor, params: Params, prefix: str, n_heads: int, mask=None) -> Tensor:
    q = T.matmul(xq, params[f"{prefix}.wq"])
    k = T.matmul(xkv, params[f"{prefix}.wk"])
    v = T.matmul(xkv, params[f"{prefix}.wv"])
    if n_heads == 1:
        heads = attention(q, k, v, mask)
    else:
        dh = q.shape[1] // n_heads
        heads = T.concat_cols([
            attention(T.slice_cols(q, h * dh, (h + 1) * dh), T.slice_cols(k, h * dh, (h + 1) * dh),
                      T.slice_cols(v, h * dh, (h + 1) * dh), mask)
            for h in range(n_heads)
        ])
    return T.matmul(heads, params[f"{prefix}.wo"])


def feed_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layernorm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def embed_report(ids: Sequence[int], params: Params, config: ModelConfig):
    """Scaled token embeddings plus sinusoidal positions; also returns the PAD mask."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise DimensionError(f"token sequence must be a non-empty 1-D list, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise VocabRangeError(f"token id outside [0, {config.vocab_size})")
    table = params["tok_embed"]
    x = T.scale(T.embedding(table, ids), np.sqrt(config.d_model))
    pe = Tensor(sinusoidal_positions(len(ids), config.d_model).astype(table.dtype), dtype=table.dtype)
    return T.add(x, pe), ids == PAD


def fuse(f_img: Tensor, f_rep: Optional[Tensor], rep_mask, params: Params, layer: int, config: ModelConfig) -> Tensor:
    """Image self-attention plus the layer's mixing weight times image-to-report cross-attention.

    With ``f_rep`` of None the cross-attention branch is skipped entirely.
    """
    p = f"enc.{layer}"
    img = multi_head(f_img, f_img, params, f"{p}.self", config.n_heads)
    if f_rep is None:
        return img
    key_mask = None if rep_mask is None or not np.any(rep_mask) else np.broadcast_to(rep_mask, (f_img.shape[0], len(rep_mask)))
    rep = multi_head(f_img, f_rep, params, f"{p}.cross", config.n_heads, key_mask)
    return T.add(img, T.scale(rep, params[f"{p}.mix"]))


def encoder_layer(f: Tensor, f_rep, rep_mask, params: Params, layer: int, config: ModelConfig,
                  training: bool = False, rng=None) -> Tensor:
    p, drop = f"enc.{layer}", config.dropout_p
    if config.literal_residual:
        f = fuse(f, f_rep, rep_mask, params, layer, config)
        f = T.add(f, T.dropout(_ln(f, params, f"{p}.ln1"), drop, training, rng))
        return T.add(f, T.dropout(_ln(feed_forward(f, params, f"{p}.ffn"), params, f"{p}.ln2"), drop, training, rng))
    f = T.add(f, T.dropout(fuse(_ln(f, params, f"{p}.ln1"), f_rep, rep_mask, params, layer, config), drop, training, rng))
    return T.add(f, T.dropout(feed_forward(_ln(f, params, f"{p}.ln2"), params, f"{p}.ffn"), drop, training, rng))


def encode(features, retrieved_ids, params: Params, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Project image rows to ``d_model`` and run the fused encoder stack.

    ``retrieved_ids`` of None (or a config without retrieval) skips fusion.
    """
    proj = params["img_proj"]
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=proj.dtype), dtype=proj.dtype)
    if feats.ndim != 2 or feats.shape[1] != config.d_f:
        raise DimensionError(f"features must be p x {config.d_f}, got {feats.shape}")
    f = T.matmul(feats, proj)
    f_rep = rep_mask = None
    if config.use_retrieval and retrieved_ids is not None and len(retrieved_ids):
        f_rep, rep_mask = embed_report(retrieved_ids, params, config)
    for layer in range(config.n_layers):
        f = encoder_layer(f, f_rep, rep_mask, params, layer, config, training, rng)
    if not config.literal_residual:
        f = _ln(f, params, "enc.ln_f")
    return f


def decode(prefix_ids, memory: Tensor, params: Params, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Logits ``(len(prefix), vocab_size)`` from a causal pre-norm decoder attending to ``memory``."""
    x, _ = embed_report(prefix_ids, params, config)
    n, drop = x.shape[0], config.dropout_p
    causal = np.triu(np.ones((n, n), dtype=bool), k=1)
    for layer in range(config.n_layers):
        p = f"dec.{layer}"
        h = _ln(x, params, f"{p}.ln1")
        x = T.add(x, T.dropout(multi_head(h, h, params, f"{p}.self", config.n_heads, causal), drop, training, rng))
        h = _ln(x, params, f"{p}.ln2")
        x = T.add(x, T.dropout(multi_head(h, memory, params, f"{p}.cross", config.n_heads), drop, training, rng))
        h = _ln(x, params, f"{p}.ln3")
        x = T.add(x, T.dropout(feed_forward(h, params, f"{p}.ffn"), drop, training, rng))
    x = _ln(x, params, "dec.ln_f")
    return T.add(T.matmul(x, params["out.w"]), params["out.b"])


def forward(features, retrieved_ids, target_prefix, params: Params, config: ModelConfig,
            training: bool = False, rng=None) -> Tensor:
    if len(target_prefix) == 0 or int(target_prefix[0]) != BOS:
        raise ConfigError("target prefix must start with BOS")
    memory = encode(features, retrieved_ids, params, config, training, rng)
    return decode(target_prefix, memory, params, config, training, rng)
