"""scikit-learn style wrappers.

``VqaCoinClassifier`` takes a sequence of ``VqaExample`` as ``X``; answers
come from the examples themselves or from ``y`` (one list of ten annotator
answers per example).  ``SemanticInfoExtractor`` maps caption lists to
semantic-info word lists and is stateless.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import VqaExample
from .errors import ConfigError, ContractError
from .evaluation import score_predictions
from .model import ModelConfig, VqaCoinModel
from .textprep import (
    DEDUP_THRESHOLD,
    MAX_SELECTED_SENTENCES,
    MAX_SI_WORDS,
    dedup_captions,
    filter_content_words,
    normalize_answer,
)
from .train import TrainSchedule, train_loop


def check_examples(X, require_answers: bool = False) -> list[VqaExample]:
    """Validate ``X`` as a nonempty sequence of examples and return it as a list."""
    if isinstance(X, (str, bytes, np.ndarray)) or not hasattr(X, "__len__"):
        raise ContractError(f"expected a sequence of VqaExample, got {type(X).__name__}")
    items = list(X)
    if not items:
        raise ContractError("expected at least one example")
    bad = [i for i, e in enumerate(items) if not isinstance(e, VqaExample)]
    if bad:
        raise ContractError(f"items {bad[:10]} are not VqaExample instances")
    if require_answers:
        missing = [e.question_id for e in items if not e.has_answers]
        if missing:
            raise ContractError(f"examples without annotator answers: {missing[:10]}")
    return items


def attach_answers(X: Sequence[VqaExample], y) -> list[VqaExample]:
    """Copies of ``X`` carrying the annotator lists in ``y``."""
    if len(y) != len(X):
        raise ContractError(f"X has {len(X)} examples but y has {len(y)} answer lists")
    out = []
    for e, answers in zip(X, y):
        if isinstance(answers, str) or len(answers) != 10:
            raise ContractError(f"question {e.question_id}: y must hold 10 annotator answers per example")
        norm = [normalize_answer(a) for a in answers]
        top = Counter(norm).most_common(1)[0][0]
        out.append(dataclasses.replace(e, answers=norm, canonical_answer=top))
    return out


def _as_config(value, cls):
    if value is None:
        return cls()
    if isinstance(value, cls):
        return value
    if isinstance(value, dict):
        try:
            return cls(**value)
        except TypeError as exc:
            raise ConfigError(f"bad {cls.__name__} keys: {exc}") from None
    raise ConfigError(f"expected {cls.__name__}, dict or None, got {type(value).__name__}")


class VqaCoinClassifier(ClassifierMixin, BaseEstimator):
    """Answer classifier over examples.

    Parameters
    ----------
    config : ModelConfig or dict, optional
        Network extents; desk defaults when omitted.
    schedule : TrainSchedule or dict, optional
        Optimizer schedule; the reference schedule when omitted.
    min_answer_count : int
        Answers seen fewer times in training are not classes.
    seed : int
        Seeds initialization, shuffling and dropout.
    """

    def __init__(self, config=None, schedule=None, min_answer_count: int = 9, seed: int = 0):
        self.config = config
        self.schedule = schedule
        self.min_answer_count = min_answer_count
        self.seed = seed

    def fit(self, X, y=None):
        examples = check_examples(X, require_answers=y is None)
        if y is not None:
            examples = attach_answers(examples, y)
        config = _as_config(self.config, ModelConfig)
        schedule = _as_config(self.schedule, TrainSchedule)
        self.model_ = VqaCoinModel.build(config, examples, self.min_answer_count, self.seed)
        self.trace_ = train_loop(self.model_, examples, schedule, self.seed).trace
        self.classes_ = np.array(self.model_.answers.answers, dtype=object)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.array(self.model_.predict(check_examples(X)), dtype=object)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        m = self.model_
        encoded = m.encode(check_examples(X))
        return np.concatenate([m.forward(m.collate(encoded[i : i + 256])).logits.data for i in range(0, len(encoded), 256)])

    def score(self, X, y=None, sample_weight=None) -> float:
        """Mean soft accuracy, not exact-match accuracy."""
        if sample_weight is not None:
            raise ContractError("sample_weight is not supported")
        examples = check_examples(X, require_answers=y is None)
        if y is not None:
            examples = attach_answers(examples, y)
        return score_predictions(list(self.predict(examples)), examples).overall


class SemanticInfoExtractor(TransformerMixin, BaseEstimator):
    """Caption lists to content-word lists (dedup, keep the first survivors, filter)."""

    def __init__(self, threshold: float = DEDUP_THRESHOLD, max_sentences: int = MAX_SELECTED_SENTENCES,
                 max_words: int = MAX_SI_WORDS):
        self.threshold = threshold
        self.max_sentences = max_sentences
        self.max_words = max_words

    def fit(self, X, y=None):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.max_sentences < 1 or self.max_words < 1:
            raise ConfigError("max_sentences and max_words must be positive")
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> list[list[str]]:
        check_is_fitted(self, "n_features_in_")
        if isinstance(X, str):
            raise ContractError("expected a sequence of caption lists, got one string")
        out = []
        for captions in X:
            if isinstance(captions, str):
                raise ContractError("each item must be a list of captions, not a string")
            kept = dedup_captions(list(captions), self.threshold, self.max_sentences)
            out.append(filter_content_words(kept, self.max_words))
        return out
