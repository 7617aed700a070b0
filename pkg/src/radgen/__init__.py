"""Retrieval-augmented cross-modal radiology report generation, from scratch on numpy."""

from radgen.estimators import ReportGenerator, ReportRetriever, ReportTokenizer
from radgen.metrics import ScoreReport, bleu, meteor, rouge_l, score_corpus
from radgen.model import ModelConfig
from radgen.retrieval import RetrievalIndex, cosine, extract_stub, load_features, retrieve, save_features
from radgen.tensor import Tensor, no_grad
from radgen.text import Vocab, build_vocab, decode, encode, normalize

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ReportGenerator",
    "ReportRetriever",
    "ReportTokenizer",
    "RetrievalIndex",
    "ScoreReport",
    "Tensor",
    "Vocab",
    "bleu",
    "build_vocab",
    "cosine",
    "decode",
    "encode",
    "extract_stub",
    "load_features",
    "meteor",
    "no_grad",
    "normalize",
    "retrieve",
    "rouge_l",
    "save_features",
    "score_corpus",
]
