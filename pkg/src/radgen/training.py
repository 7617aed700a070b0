"""Teacher-forced cross-entropy training with Adam, and greedy / beam-search decoding."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from radgen import tensor as T
from radgen.exceptions import ConfigError, TrainingError
from radgen.model import EXTRACTOR_PARAMS, ModelConfig, Params, decode, encode, forward, init_params
from radgen.retrieval import RetrievalIndex, retrieve
from radgen.tensor import Tensor, log_softmax_np
from radgen.text import BOS, EOS, PAD, Vocab, encode as encode_text

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_extractor: float = 5e-5
    lr_model: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    beam: int = 3
    top_k: int = 1
    min_freq: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.beam < 1 or self.top_k < 1:
            raise ConfigError("beam and top_k must be >= 1")
        if self.lr_extractor < 0 or self.lr_model < 0:
            raise ConfigError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown training config keys: {sorted(set(d) - known)}")
        return cls(**d)


def cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int = PAD) -> Tensor:
    """Mean token NLL over non-PAD targets (targets are the prefix shifted left by one)."""
    return T.cross_entropy(logits, targets, ignore_index=pad_id)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rates: Dict[str, float] = field(default_factory=dict)


def param_groups(params: Params, lr_extractor: float, lr_model: float) -> Dict[str, float]:
    """Per-parameter learning rates: the image projection trains at the extractor rate."""
    return {name: (lr_extractor if name in EXTRACTOR_PARAMS else lr_model) for name in params}


def adam_step(params: Params, state: OptimState, rates: Optional[Dict[str, float]] = None,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, from each parameter's ``.grad``."""
    rates = rates if rates is not None else state.rates
    b1, b2 = betas
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = rates[name] * (m / c1) / (np.sqrt(v / c2) + eps)
        np.subtract(p.data, update, out=p.data, casting="same_kind")


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Sample:
    """One resolved example: id, image feature matrix, report text and split tag."""

    id: str
    features: np.ndarray
    report: str
    split: str = "train"


def retrieved_tokens(index: Optional[RetrievalIndex], features, vocab: Vocab, max_len: int,
                     k: int = 1, exclude_id: Optional[str] = None) -> Optional[List[int]]:
    if index is None:
        return None
    ids: List[int] = []
    for _, _, report in retrieve(index, features, k=k, exclude_id=exclude_id):
        ids += encode_text(report, vocab, max_len)
    return ids


def _prepare(samples, index, vocab, model_cfg, train_cfg, exclude_self):
    use_index = index if model_cfg.use_retrieval else None
    out = []
    for s in samples:
        target = encode_text(s.report, vocab, model_cfg.max_len)
        rep = retrieved_tokens(use_index, s.features, vocab, model_cfg.max_len, train_cfg.top_k,
                               s.id if exclude_self else None)
        out.append((s, np.asarray(s.features, dtype=np.float32), rep, target))
    return out


def _example_loss(item, params, config, training, rng) -> Tensor:
    _, feats, rep, target = item
    logits = forward(feats, rep, target[:-1], params, config, training, rng)
    return cross_entropy(logits, target[1:])


def evaluate_loss(samples, params, config, index, vocab, train_cfg) -> Optional[float]:
    if not samples:
        return None
    items = _prepare(samples, index, vocab, config, train_cfg, exclude_self=False)
    with T.no_grad():
        losses = [float(_example_loss(it, params, config, False, None).item()) for it in items]
    return float(np.mean(losses))


def train(samples: Sequence[Sample], index: Optional[RetrievalIndex], vocab: Vocab, config: ModelConfig,
          train_cfg: TrainConfig, seed: int = 0, dtype=np.float32, callback: Optional[Callable] = None):
    """Per-example Adam training; returns ``(params, log)`` with one log row per epoch.

    Training retrieval excludes each example's own id from the index. The
    whole run (init, shuffles, dropout masks) draws from one generator
    seeded with ``seed``.
    """
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not train_set:
        raise ConfigError("training split is empty")
    if config.use_retrieval and index is None:
        raise ConfigError("retrieval is enabled but no retrieval index was given")
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, dtype=dtype)
    state = OptimState(rates=param_groups(params, train_cfg.lr_extractor, train_cfg.lr_model))
    items = _prepare(train_set, index, vocab, config, train_cfg, exclude_self=True)
    log = []
    for epoch in range(1, train_cfg.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(items)):
            loss = _example_loss(items[i], params, config, True, rng)
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} on example {items[i][0].id!r}")
            zero_grads(params)
            T.backward(loss)
            adam_step(params, state, betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
            total += value
        row = {"epoch": epoch, "train_loss": total / len(items),
               "val_loss": evaluate_loss(val_set, params, config, index, vocab, train_cfg)}
        logger.info("epoch %d train_loss %.4f val_loss %s", epoch, row["train_loss"], row["val_loss"])
        log.append(row)
        if callback is not None:
            callback(row)
    zero_grads(params)
    return params, log


# ---------------------------------------------------------------------------
# decoding


StepFn = Callable[[Tuple[int, ...]], np.ndarray]


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> List[int]:
    """Argmax decoding (lowest id wins ties) until EOS or ``max_len`` total tokens."""
    seq = [bos]
    while len(seq) < max_len:
        tok = int(np.argmax(step(tuple(seq))))
        seq.append(tok)
        if tok == eos:
            break
    return seq


def beam_search_core(step: StepFn, beam: int, max_len: int, bos: int = BOS, eos: int = EOS) -> List[int]:
    """Length-normalized beam search over a next-token log-probability function.

    ``step(prefix)`` returns log-probabilities for the token after ``prefix``.
    Each round keeps the ``beam`` best extensions by cumulative log-prob;
    those ending in EOS or reaching ``max_len`` tokens retire, the rest stay
    live. The winner maximizes ``logprob / generated_length`` with ties going
    to the lexicographically smaller id sequence.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    live = [((bos,), 0.0)]
    done = []
    while live:
        cands = []
        for seq, score in live:
            logp = np.asarray(step(seq), dtype=np.float64)
            for tok in np.nonzero(np.isfinite(logp))[0]:
                cands.append((seq + (int(tok),), score + float(logp[tok])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for seq, score in cands[:beam]:
            if seq[-1] == eos or len(seq) >= max_len:
                done.append((seq, score))
            else:
                live.append((seq, score))
    best = min(done, key=lambda c: (-c[1] / (len(c[0]) - 1), c[0]))
    return list(best[0])


def model_step_fn(features, retrieved_ids, params: Params, config: ModelConfig) -> StepFn:
    """Next-token log-probabilities from the model; PAD and BOS are never proposed."""
    with T.no_grad():
        memory = encode(features, retrieved_ids, params, config)

    def step(prefix):
        with T.no_grad():
            logits = decode(list(prefix), memory, params, config).data[-1].astype(np.float64)
        logits[PAD] = -np.inf
        logits[BOS] = -np.inf
        return log_softmax_np(logits)

    return step


def beam_search(features, retrieved_ids, params: Params, config: ModelConfig, beam: int = 3,
                max_len: Optional[int] = None) -> List[int]:
    return beam_search_core(model_step_fn(features, retrieved_ids, params, config), beam, max_len or config.max_len)


def greedy_decode(features, retrieved_ids, params: Params, config: ModelConfig, max_len: Optional[int] = None) -> List[int]:
    return greedy_search(model_step_fn(features, retrieved_ids, params, config), max_len or config.max_len)
