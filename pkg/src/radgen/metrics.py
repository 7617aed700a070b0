"""Corpus BLEU-1..4, ROUGE-L and METEOR for generated reports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

from nltk.stem.porter import PorterStemmer

from radgen.exceptions import UsageError
from radgen.text import tokenize

Tokens = Sequence[str]

EXHAUSTIVE_MATCH_LIMIT = 20
_SEARCH_NODE_BUDGET = 200_000


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4):
    """Corpus-pooled clipped n-gram matches and totals, plus hyp/ref lengths."""
    if len(hyps) != len(refs):
        raise UsageError(f"{len(hyps)} hypotheses but {len(refs)} references")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> List[float]:
    """``[BLEU-1, ..., BLEU-max_n]`` with clipped corpus precisions and brevity penalty.

    Any zero precision (including an order with no hypothesis n-grams)
    makes that BLEU-k and all higher orders zero; no smoothing.
    """
    matches, totals, c, r = bleu_stats(hyps, refs, max_n)
    if c == 0:
        return [0.0] * max_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    out, log_sum = [], 0.0
    for k in range(1, max_n + 1):
        m, t = matches[k - 1], totals[k - 1]
        if m == 0 or t == 0 or log_sum == -math.inf:
            log_sum = -math.inf
            out.append(0.0)
            continue
        log_sum += math.log(m / t)
        out.append(bp * math.exp(log_sum / k))
    return out


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens, beta: float = 1.2) -> float:
    if not ref:
        raise UsageError("ROUGE-L needs a non-empty reference")
    if not hyp:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    rec, prec = lcs / len(ref), lcs / len(hyp)
    return (1 + beta ** 2) * rec * prec / (rec + beta ** 2 * prec)


# ---------------------------------------------------------------------------
# METEOR

_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer.stem(word)


def _match_plan(hyp: Tokens, ref: Tokens):
    """Candidate ref positions per hyp position and the staged maximum match counts.

    Stage one pairs identical words; stage two pairs different words with a
    common stem among the words stage one left over.
    """
    hyp_words, ref_words = Counter(hyp), Counter(ref)
    exact_need = {w: min(c, ref_words[w]) for w, c in hyp_words.items() if ref_words[w]}
    left_h, left_r = Counter(), Counter()
    for w, c in hyp_words.items():
        left_h[stem(w)] += c - exact_need.get(w, 0)
    for w, c in ref_words.items():
        left_r[stem(w)] += c - exact_need.get(w, 0)
    stem_need = {s: min(c, left_r[s]) for s, c in left_h.items() if min(c, left_r[s])}
    options = []
    for w in hyp:
        s = stem(w)
        exact = [j for j, x in enumerate(ref) if x == w]
        stemmed = [j for j, x in enumerate(ref) if x != w and stem(x) == s] if s in stem_need else []
        options.append((exact, stemmed))
    return options, exact_need, stem_need


def align(hyp: Tokens, ref: Tokens) -> Tuple[int, int]:
    """``(matches, chunks)`` for the staged maximal alignment with fewest chunks.

    Exhaustive branch-and-bound when there are at most
    ``EXHAUSTIVE_MATCH_LIMIT`` matches, greedy left-to-right beyond that.
    """
    options, exact_need, stem_need = _match_plan(hyp, ref)
    total = sum(exact_need.values()) + sum(stem_need.values())
    if total == 0:
        return 0, 0
    if total <= EXHAUSTIVE_MATCH_LIMIT:
        chunks = _exhaustive_alignment(hyp, options, exact_need, stem_need, total)
        if chunks is not None:
            return total, chunks
    return total, _greedy_alignment(hyp, options, exact_need, stem_need)


def _suffix_counts(hyp):
    n = len(hyp)
    words = [Counter() for _ in range(n + 1)]
    stems = [Counter() for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        words[i] = words[i + 1].copy()
        stems[i] = stems[i + 1].copy()
        words[i][hyp[i]] += 1
        stems[i][stem(hyp[i])] += 1
    return words, stems


def _exhaustive_alignment(hyp, options, exact_need, stem_need, total):
    words_after, stems_after = _suffix_counts(hyp)
    need = {("e", w): c for w, c in exact_need.items()}
    need.update({("s", s): c for s, c in stem_need.items()})
    used = set()
    best = [total + 1]  # any complete alignment has at most `total` chunks
    nodes = [0]

    def feasible(i):
        for (kind, key), c in need.items():
            if c > (words_after[i][key] if kind == "e" else stems_after[i][key]):
                return False
        return True

    def search(i, prev_j, chunks):
        nodes[0] += 1
        if chunks >= best[0] or nodes[0] > _SEARCH_NODE_BUDGET:
            return
        if i == len(hyp):
            best[0] = chunks  # feasibility pruning guarantees every need is met here
            return
        exact, stemmed = options[i]
        choices = []
        if need.get(("e", hyp[i])):
            choices += [(j, ("e", hyp[i])) for j in exact if j not in used]
        if need.get(("s", stem(hyp[i]))):
            choices += [(j, ("s", stem(hyp[i]))) for j in stemmed if j not in used]
        choices.sort(key=lambda c: (prev_j is None or c[0] != prev_j + 1, c[0]))
        for j, key in choices:
            need[key] -= 1
            used.add(j)
            if feasible(i + 1):
                search(i + 1, j, chunks + (0 if prev_j is not None and j == prev_j + 1 else 1))
            used.discard(j)
            need[key] += 1
        if feasible(i + 1):
            search(i + 1, None, chunks)

    search(0, None, 0)
    if best[0] > total:
        return None
    return best[0]


def _greedy_alignment(hyp, options, exact_need, stem_need) -> int:
    need = {("e", w): c for w, c in exact_need.items()}
    need.update({("s", s): c for s, c in stem_need.items()})
    used, prev_j, chunks = set(), None, 0
    for i, w in enumerate(hyp):
        exact, stemmed = options[i]
        key = ("e", w)
        pool = [j for j in exact if j not in used] if need.get(key) else []
        if not pool:
            key = ("s", stem(w))
            pool = [j for j in stemmed if j not in used] if need.get(key) else []
        if not pool:
            prev_j = None
            continue
        j = prev_j + 1 if prev_j is not None and prev_j + 1 in pool else pool[0]
        chunks += 0 if prev_j is not None and j == prev_j + 1 else 1
        need[key] -= 1
        used.add(j)
        prev_j = j
    return chunks


def meteor(hyp: Tokens, ref: Tokens, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Harmonic-mean F with fragmentation penalty ``gamma * (chunks / matches) ** beta``."""
    if not ref:
        raise UsageError("METEOR needs a non-empty reference")
    if not hyp:
        return 0.0
    matches, chunks = align(hyp, ref)
    if matches == 0:
        return 0.0
    p, r = matches / len(hyp), matches / len(ref)
    f = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return f * (1 - penalty)


# ---------------------------------------------------------------------------
# corpus report


@dataclass
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float
    examples: List[Dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3, "bleu4": self.bleu4,
                "rouge_l": self.rouge_l, "meteor": self.meteor, "examples": self.examples}

    def row(self) -> List[float]:
        return [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.meteor]


def score_corpus(pairs: Sequence[Tuple[str, str]], ids: Sequence[str] = None) -> ScoreReport:
    """Score ``(hypothesis, reference)`` text pairs after normalization and whitespace splitting."""
    if not pairs:
        raise UsageError("cannot score an empty corpus")
    hyps = [tokenize(h) for h, _ in pairs]
    refs = [tokenize(r) for _, r in pairs]
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    b = bleu(hyps, refs, 4)
    examples = []
    for rid, h, r in zip(ids, hyps, refs):
        sb = bleu([h], [r], 4)
        examples.append({"id": rid, "bleu1": sb[0], "bleu2": sb[1], "bleu3": sb[2], "bleu4": sb[3],
                         "rouge_l": rouge_l(h, r), "meteor": meteor(h, r)})
    return ScoreReport(*b, rouge_l=sum(e["rouge_l"] for e in examples) / len(examples),
                       meteor=sum(e["meteor"] for e in examples) / len(examples), examples=examples)
