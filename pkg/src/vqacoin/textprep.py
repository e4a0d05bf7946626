"""Caption cleanup and text encoding.

Captions for an image are reduced to a short list of content words:
near-duplicate sentences are suppressed greedily (token-level LCS ratio
against already-kept sentences), the first ten survivors are kept, and
stopwords, prepositions and auxiliary verbs are removed using the wordlists
shipped in ``resources/wordlists``.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, ContractError

MAX_QUESTION_TOKENS = 14
MAX_SI_WORDS = 40
MAX_SELECTED_SENTENCES = 10
DEDUP_THRESHOLD = 0.8

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
WORDLISTS = ("stopwords", "prepositions", "auxiliaries")

_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*")
_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation if c != "'"})


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; apostrophes survive only inside a word."""
    return _TOKEN_RE.findall(text.lower())


def tokenize_question(question: str, max_len: int = MAX_QUESTION_TOKENS) -> list[str]:
    tokens = tokenize(question)[:max_len]
    if not tokens:
        raise ContractError(f"question {question!r} has no tokens")
    return tokens


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def similarity(a: Sequence[str], b: Sequence[str]) -> float:
    """``2 * LCS(a, b) / (len(a) + len(b))`` over token sequences."""
    total = len(a) + len(b)
    return 2.0 * lcs_length(a, b) / total if total else 1.0


def dedup_captions(
    captions: Sequence[str],
    threshold: float = DEDUP_THRESHOLD,
    max_keep: int = MAX_SELECTED_SENTENCES,
) -> list[str]:
    """Drop every caption at least ``threshold``-similar to an already kept one.

    Order matters: the scan is greedy in emission order and compares only
    against kept sentences.  At most ``max_keep`` survivors are returned.
    """
    kept: list[str] = []
    kept_tokens: list[list[str]] = []
    for caption in captions:
        if len(kept) == max_keep:
            break
        if not caption.strip():
            raise ContractError("captions must be nonempty after trimming whitespace")
        toks = tokenize(caption)
        if any(similarity(toks, prev) >= threshold for prev in kept_tokens):
            continue
        kept.append(caption)
        kept_tokens.append(toks)
    return kept


@lru_cache(maxsize=None)
def load_wordlist(name: str) -> frozenset[str]:
    if name not in WORDLISTS:
        raise ConfigError(f"unknown wordlist {name!r}; expected one of {WORDLISTS}")
    text = resources.files("vqacoin.resources").joinpath("wordlists").joinpath(f"{name}.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def filtered_words() -> frozenset[str]:
    return frozenset().union(*(load_wordlist(n) for n in WORDLISTS))


def filter_content_words(sentences: Iterable[str], max_words: int = MAX_SI_WORDS) -> list[str]:
    drop = filtered_words()
    words = [tok for s in sentences for tok in tokenize(s) if tok not in drop]
    return words[:max_words]


def semantic_info(captions: Sequence[str]) -> list[str]:
    """Full caption pipeline: dedup, first ten survivors, content-word filter."""
    return filter_content_words(dedup_captions(captions))


def normalize_answer(answer: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = answer.lower().translate(_PUNCT_TABLE).replace("'", "")
    return " ".join(w for w in text.split() if w not in _ARTICLES)


def _ranked(counts: Counter) -> list[str]:
    return sorted(counts, key=lambda tok: (-counts[tok], tok))


@dataclass
class Vocabulary:
    """Token ids: 0 is padding, 1 is unknown, the rest by frequency then spelling."""

    itos: list[str] = field(default_factory=lambda: [PAD_TOKEN, UNK_TOKEN])

    def __post_init__(self):
        if self.itos[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ConfigError("vocabulary must start with the pad and unknown tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for toks in token_lists for tok in toks)
        for special in (PAD_TOKEN, UNK_TOKEN):
            counts.pop(special, None)
        ranked = [t for t in _ranked(counts) if counts[t] >= min_count]
        return cls([PAD_TOKEN, UNK_TOKEN] + ranked)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(tok, 1) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def _canonical(item) -> str:
    if isinstance(item, str):
        return item
    if isinstance(item, Mapping):
        answers = item.get("answers")
        if answers is not None and len(answers) != 10:
            raise ContractError(f"annotation {item.get('question_id')} has {len(answers)} answers, expected 10")
        return normalize_answer(item["multiple_choice_answer"])
    if len(item.answers) != 10:
        raise ContractError(f"example {item.question_id} has {len(item.answers)} answers, expected 10")
    return item.canonical_answer


@dataclass
class AnswerSet:
    """Closed answer vocabulary for the classifier."""

    answers: list[str]

    def __post_init__(self):
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return answer in self.index

    def soft_scores(self, annotator_answers: Sequence[str]) -> dict[int, float]:
        """Class id -> ``min(count / 3, 1)`` for annotator answers in the set."""
        counts = Counter(annotator_answers)
        return {self.index[a]: min(c / 3.0, 1.0) for a, c in counts.items() if a in self.index}


def build_answer_set(annotations: Iterable, min_occurrences: int = 9) -> AnswerSet:
    """Keep canonical answers seen at least ``min_occurrences`` times.

    ``annotations`` may hold VQA annotation dicts, examples with a
    ``canonical_answer`` attribute, or bare answer strings.
    """
    counts = Counter(_canonical(a) for a in annotations)
    kept = [a for a in _ranked(counts) if counts[a] >= min_occurrences]
    if not kept:
        raise ConfigError(f"no answer occurs {min_occurrences} or more times; lower min_occurrences")
    return AnswerSet(kept)
