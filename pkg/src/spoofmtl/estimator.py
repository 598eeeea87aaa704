"""scikit-learn style wrappers.

``LFCCExtractor`` turns a list of waveforms into a list of LFCC matrices and
``SpoofDetector`` trains and applies one model variant on such lists.  Both
inputs are ragged, so X is a list rather than a 2-D array.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import Corpus, Utterance, num_embeddings
from .evaluation import compute_eer
from .features import LFCCConfig, extract
from .model import MIN_FRAMES
from .training import TrainConfig, score_utterances, train


def _check_waveforms(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 1:
        raise ValueError("expected a list of waveforms, got a single 1-D array")
    return [check_array(np.asarray(x, dtype=np.float64).reshape(1, -1)).ravel() for x in X]


def _check_features(X, dim: int) -> list[np.ndarray]:
    out = []
    for i, x in enumerate(X):
        x = check_array(x, dtype=np.float32)
        if x.shape[1] != dim:
            raise ValueError(f"item {i}: expected {dim} feature columns, got {x.shape[1]}")
        if x.shape[0] < MIN_FRAMES:
            raise ValueError(f"item {i}: needs at least {MIN_FRAMES} frames, got {x.shape[0]}")
        out.append(x)
    if not out:
        raise ValueError("empty input")
    return out


class LFCCExtractor(TransformerMixin, BaseEstimator):
    def __init__(self, sample_rate: int = 16000, n_filters: int = 20, n_ceps: int = 20, with_deltas: bool = True):
        self.sample_rate = sample_rate
        self.n_filters = n_filters
        self.n_ceps = n_ceps
        self.with_deltas = with_deltas

    def _config(self) -> LFCCConfig:
        return LFCCConfig(sample_rate=self.sample_rate, n_filters=self.n_filters,
                          n_ceps=self.n_ceps, with_deltas=self.with_deltas)

    def fit(self, X, y=None):
        _check_waveforms(X)
        self.n_features_out_ = self._config().dim
        return self

    def transform(self, X) -> list[np.ndarray]:
        cfg = self._config()
        return [extract(x, cfg) for x in _check_waveforms(X)]


class SpoofDetector(BaseEstimator):
    """Partial-spoof detector over LFCC matrices.

    ``y`` holds utterance labels (0 bona fide, 1 spoof).  Variants other
    than Utt also need ``frame_labels``: one 0/1 array per item with one
    entry per 160 ms embedding frame.  ``decision_function`` is higher for
    bona fide; ``predict`` thresholds it at the dev-set EER threshold, or
    mid-gap when the dev scores separate perfectly.
    """

    def __init__(self, variant: str = "Seg", seed: int = 0, max_epochs: int = 30, batch_size: int = 8,
                 lr_init: float = 3e-4, early_stop_patience_epochs: int = 70, dropout: float = 0.5,
                 lstm_hidden: int = 48, se_reduction: int = 2, validation_fraction: float = 0.2,
                 warmup_checkpoint: Optional[str] = None):
        self.variant = variant
        self.seed = seed
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.early_stop_patience_epochs = early_stop_patience_epochs
        self.dropout = dropout
        self.lstm_hidden = lstm_hidden
        self.se_reduction = se_reduction
        self.validation_fraction = validation_fraction
        self.warmup_checkpoint = warmup_checkpoint

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            variant=self.variant, seed=self.seed, max_epochs=self.max_epochs, batch_size=self.batch_size,
            lr_init=self.lr_init, early_stop_patience_epochs=self.early_stop_patience_epochs,
            dropout=self.dropout, lstm_hidden=self.lstm_hidden, se_reduction=self.se_reduction,
            warmup_checkpoint=self.warmup_checkpoint,
        )

    def _utterances(self, X, y=None, frame_labels=None, prefix="x") -> list[Utterance]:
        feats = _check_features(X, 60)
        if y is None:
            y = np.zeros(len(feats), dtype=int)
        y = np.asarray(y).astype(int).ravel()
        if y.size != len(feats):
            raise ValueError(f"{len(feats)} items but {y.size} labels")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 (bona fide) or 1 (spoof)")
        utts = []
        for i, f in enumerate(feats):
            m = num_embeddings(f.shape[0])
            fl = None if frame_labels is None else np.asarray(frame_labels[i], dtype=np.int8)
            if fl is not None and fl.size != m:
                raise ValueError(f"item {i}: {fl.size} frame labels for {m} embedding frames")
            if fl is None:
                fl = np.full(m, y[i], dtype=np.int8)
            utts.append(Utterance(f"{prefix}{i:06d}", f, int(y[i]), fl))
        return utts

    def fit(self, X, y, frame_labels: Optional[Sequence] = None,
            X_dev=None, y_dev=None, frame_labels_dev: Optional[Sequence] = None):
        cfg = self._train_config()
        if cfg.variant != "Utt" and frame_labels is None:
            raise ValueError(f"variant {cfg.variant} needs frame_labels")
        utts = self._utterances(X, y, frame_labels)
        if X_dev is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must be in (0, 1) when no dev set is given")
            rng = np.random.default_rng([self.seed, 11])
            order = rng.permutation(len(utts))
            n_dev = max(1, int(round(self.validation_fraction * len(utts))))
            dev = [utts[i] for i in np.sort(order[:n_dev])]
            tr = [utts[i] for i in np.sort(order[n_dev:])]
        else:
            tr = utts
            dev = self._utterances(X_dev, y_dev, frame_labels_dev, prefix="d")
        result = train(cfg, Corpus({"train": tr, "dev": dev}))
        self.model_ = result.bundle
        self.record_ = result.record
        self.classes_ = np.array([0, 1])
        dev_scores = np.array([r.utt_score for r in score_utterances(self.model_, dev, self.batch_size)])
        labels = np.array([u.utt_label for u in dev])
        if labels.min() != labels.max():
            bona, spoof = dev_scores[labels == 0], dev_scores[labels == 1]
            eer, self.threshold_ = compute_eer(bona, spoof)
            if eer == 0.0:  # centre of the gap rather than its upper edge
                self.threshold_ = 0.5 * (bona.min() + spoof.max())
        else:
            self.threshold_ = 0.0
        return self

    def _records(self, X):
        check_is_fitted(self, "model_")
        return score_utterances(self.model_, self._utterances(X), self.batch_size)

    def decision_function(self, X) -> np.ndarray:
        return np.array([r.utt_score for r in self._records(X)])

    def score_segments(self, X) -> list[np.ndarray]:
        return [r.seg_scores for r in self._records(X)]

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= self.threshold_, 0, 1)

    def score(self, X, y) -> float:
        """1 - utterance EER."""
        s = self.decision_function(X)
        y = np.asarray(y).astype(int)
        return 1.0 - compute_eer(s[y == 0], s[y == 1])[0]
