"""scikit-learn compatible estimators over the report generation pipeline."""

from __future__ import annotations

from typing import List

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from radgen.io import Settings
from radgen.metrics import ScoreReport, score_corpus
from radgen.pipeline import fit, generate
from radgen.retrieval import FeatureRecord, RetrievalIndex, retrieve
from radgen.text import DEFAULT_MAX_LEN, DEFAULT_MIN_FREQ, build_vocab, decode, encode
from radgen.training import Sample
from radgen.validation import check_feature_batch, check_ids, check_reports


class ReportTokenizer(TransformerMixin, BaseEstimator):
    """Learns a word vocabulary and maps reports to BOS/EOS-wrapped id lists."""

    def __init__(self, min_freq=DEFAULT_MIN_FREQ, max_len=DEFAULT_MAX_LEN):
        self.min_freq = min_freq
        self.max_len = max_len

    def fit(self, X, y=None):
        self.vocab_ = build_vocab(list(X), self.min_freq)
        return self

    def transform(self, X) -> List[List[int]]:
        check_is_fitted(self, "vocab_")
        return [encode(text, self.vocab_, self.max_len) for text in X]

    def inverse_transform(self, X) -> List[str]:
        check_is_fitted(self, "vocab_")
        return [decode(ids, self.vocab_) for ids in X]


class ReportRetriever(BaseEstimator):
    """Exhaustive cosine nearest-report search over pooled image features."""

    def __init__(self, top_k=1):
        self.top_k = top_k

    def fit(self, X, y, ids=None):
        feats = check_feature_batch(X)
        reports = check_reports(y, len(feats))
        ids = check_ids(ids, len(feats))
        self.index_ = RetrievalIndex([FeatureRecord(i, f) for i, f in zip(ids, feats)], dict(zip(ids, reports)))
        self.n_features_in_ = feats[0].shape[1]
        return self

    def kneighbors(self, X, n_neighbors=None, exclude_ids=None):
        """Per query, a list of ``(id, score, report)`` sorted by score then id."""
        check_is_fitted(self, "index_")
        feats = check_feature_batch(X, self.n_features_in_)
        k = n_neighbors or self.top_k
        exclude = exclude_ids if exclude_ids is not None else [None] * len(feats)
        return [retrieve(self.index_, f, k, ex) for f, ex in zip(feats, exclude)]

    def predict(self, X) -> List[str]:
        return [hits[0][2] for hits in self.kneighbors(X, 1)]


class ReportGenerator(BaseEstimator):
    """Retrieval-augmented Transformer that maps image feature matrices to report text.

    ``fit(X, y)`` takes feature matrices ``X`` (each ``(p, d_f)``) and report
    strings ``y``; the training pairs double as the retrieval database.
    ``predict`` beam-decodes one report per feature matrix.
    """

    def __init__(self, d_model=128, n_heads=4, n_layers=3, d_ff=512, dropout=0.1, max_len=DEFAULT_MAX_LEN,
                 literal_residual=True, use_retrieval=True, epochs=100, lr_extractor=5e-5, lr_model=5e-4,
                 beam=3, top_k=1, min_freq=DEFAULT_MIN_FREQ, random_state=0, n_jobs=1):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.dropout = dropout
        self.max_len = max_len
        self.literal_residual = literal_residual
        self.use_retrieval = use_retrieval
        self.epochs = epochs
        self.lr_extractor = lr_extractor
        self.lr_model = lr_model
        self.beam = beam
        self.top_k = top_k
        self.min_freq = min_freq
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _settings(self) -> Settings:
        return Settings(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
                        dropout_p=self.dropout, max_len=self.max_len, literal_residual=self.literal_residual,
                        use_retrieval=self.use_retrieval, epochs=self.epochs, lr_extractor=self.lr_extractor,
                        lr_model=self.lr_model, beam=self.beam, top_k=self.top_k, min_freq=self.min_freq)

    def _samples(self, X, y=None, ids=None, split="train", d_f=None):
        feats = check_feature_batch(X, d_f)
        reports = check_reports(y, len(feats)) if y is not None else [""] * len(feats)
        ids = check_ids(ids, len(feats))
        return [Sample(i, f, r, split) for i, f, r in zip(ids, feats, reports)]

    def fit(self, X, y, ids=None, eval_set=None):
        samples = self._samples(X, y, ids)
        if eval_set is not None:
            X_val, y_val = eval_set
            val_ids = [f"val{i:06d}" for i in range(len(y_val))]
            samples += self._samples(X_val, y_val, val_ids, "val", samples[0].features.shape[1])
        result = fit(samples, self._settings(), seed=self.random_state)
        self.vocab_ = result.vocab
        self.index_ = result.index
        self.config_ = result.config
        self.params_ = result.params
        self.history_ = result.log
        self.n_features_in_ = result.config.d_f
        return self

    def predict(self, X) -> List[str]:
        check_is_fitted(self, "params_")
        samples = self._samples(X, d_f=self.n_features_in_, split="test")
        hyps = generate(samples, self.params_, self.config_, self.vocab_, self.index_, self.beam, self.top_k,
                        self.n_jobs)
        return [h for _, h in hyps]

    def evaluate(self, X, y) -> ScoreReport:
        preds = self.predict(X)
        return score_corpus(list(zip(preds, check_reports(y, len(preds)))))

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the predictions against ``y``."""
        return self.evaluate(X, y).bleu4
