"""The end-to-end network: encoders, attention branches and classifier."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from ._npzio import read_archive, write_archive
from .attention import BilinearGlimpse, SelfAttentionHead, glimpse_stack, si_branch
from .data import VqaExample
from .diffmath import Tensor
from .errors import CheckpointError, ConfigError, ContractError, DimensionError
from .layers import PAD_ID, EmbeddingTable, GruCell, Linear, Module, WeightNormLinear, dropout, gru_scan
from .textprep import UNK_TOKEN, AnswerSet, Vocabulary, build_answer_set, tokenize_question

CHECKPOINT_FORMAT = "vqacoin-checkpoint"
CHECKPOINT_VERSION = 1
_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    """Network extents and regularization.  Defaults are the desk scale."""

    d_image: int = 64
    d_q_large: int = 64
    d_q_small: int = 32
    d_si: int = 32
    embed_dim: int = 32
    d_hidden: int = 32
    classifier_hidden: int = 0
    n_q_max: int = 14
    si_max: int = 40
    glimpses_image: int = 8
    glimpses_si: int = 1
    answer_count: int = 0
    dropout_classifier: float = 0.5
    dropout_fc: float = 0.2
    loss: str = "bce"
    dtype: str = "float64"

    def validate(self, need_answers: bool = True) -> "ModelConfig":
        extents = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.type == "int"}
        extents.pop("classifier_hidden")
        if not need_answers:
            extents.pop("answer_count")
        bad = [k for k, v in extents.items() if v < 1]
        if bad:
            raise ConfigError(f"model extents must be positive: {bad}")
        if self.classifier_hidden < 0:
            raise ConfigError("classifier_hidden must be >= 0 (0 means 2 * d_q_large)")
        if self.d_q_small != self.d_si:
            raise ConfigError(f"d_q_small ({self.d_q_small}) must equal d_si ({self.d_si})")
        for name in ("dropout_classifier", "dropout_fc"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.loss not in ("bce", "softmax"):
            raise ConfigError(f"loss must be 'bce' or 'softmax', got {self.loss!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def hidden_width(self) -> int:
        return self.classifier_hidden or 2 * self.d_q_large

    @property
    def pooled_width(self) -> int:
        return self.d_q_large + self.d_si + self.d_q_small


# ---------------------------------------------------------------- batches


@dataclass
class EncodedExample:
    question_id: int
    q_ids: np.ndarray
    si_ids: np.ndarray
    feats: np.ndarray
    targets: dict[int, float]
    label: int


@dataclass
class Batch:
    """Padded arrays for one minibatch; masks are True at real positions."""

    q_ids: np.ndarray
    q_mask: np.ndarray
    si_ids: np.ndarray
    si_mask: np.ndarray
    feats: np.ndarray
    obj_mask: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    question_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.q_ids.shape[0]


def _pad(seqs: Sequence[np.ndarray], width: int | None = None):
    n = max(len(s) for s in seqs)
    shape = (len(seqs), n) if width is None else (len(seqs), n, width)
    out = np.zeros(shape, dtype=seqs[0].dtype)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def collate(items: Sequence[EncodedExample], answer_count: int, dtype=np.float64) -> Batch:
    if not items:
        raise ContractError("cannot collate an empty batch")
    q_ids, q_mask = _pad([e.q_ids for e in items])
    si_ids, si_mask = _pad([e.si_ids for e in items])
    feats, obj_mask = _pad([e.feats.astype(dtype, copy=False) for e in items], items[0].feats.shape[1])
    targets = np.zeros((len(items), answer_count), dtype=dtype)
    for i, e in enumerate(items):
        for k, v in e.targets.items():
            targets[i, k] = v
    labels = np.array([e.label for e in items], dtype=np.int64)
    return Batch(q_ids, q_mask, si_ids, si_mask, feats, obj_mask, targets, labels, [e.question_id for e in items])


# ---------------------------------------------------------------- network


@dataclass
class ModelOutputs:
    logits: Tensor
    b_c_v: Tensor
    b_c_si: Tensor
    c_q_s: Tensor
    question_weights: Tensor
    image_maps: list[Tensor]
    si_maps: list[Tensor]


class VqaCoinNet(Module):
    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
        c = config.validate()
        dt = c.np_dtype
        self.config = c
        self.embedding = EmbeddingTable(vocab_size, c.embed_dim, rng, dt)
        self.gru_large = GruCell(c.embed_dim, c.d_q_large, rng, dt)
        self.gru_small = GruCell(c.embed_dim, c.d_q_small, rng, dt)
        self.gru_si = GruCell(c.embed_dim, c.d_si, rng, dt)
        self.self_attention = SelfAttentionHead(c.d_q_small, rng, dt)
        self.image_glimpses = [
            BilinearGlimpse(c.d_image, c.d_q_large, c.d_hidden, c.d_q_large, rng, dt) for _ in range(c.glimpses_image)
        ]
        self.si_glimpses = [
            BilinearGlimpse(c.d_si, c.d_q_small, c.d_hidden, c.d_q_small, rng, dt) for _ in range(c.glimpses_si)
        ]
        self.classifier_fc = WeightNormLinear(c.pooled_width, c.hidden_width, rng, dt)
        self.classifier_out = Linear(c.hidden_width, c.answer_count, rng, dt)
        self.post_glimpse = None

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            head = name.split(".")[0]
            if head in ("image_glimpses", "si_glimpses"):
                head = ".".join(name.split(".")[:2])
            if head == "self_attention":
                head = ".".join(name.split(".")[:2])
            groups.setdefault(head, []).append(p)
        return groups

    def classifier_parameters(self) -> list[Tensor]:
        return self.classifier_fc.parameters() + self.classifier_out.parameters()

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None) -> ModelOutputs:
        c = self.config
        dt = c.np_dtype
        if batch.feats.shape[-1] != c.d_image:
            raise DimensionError(f"image features have width {batch.feats.shape[-1]}, model expects {c.d_image}")
        q_emb = self.embedding(batch.q_ids)
        h_large = gru_scan(self.gru_large, q_emb)
        h_small = gru_scan(self.gru_small, q_emb)
        context, q_weights = self.self_attention(h_small, batch.q_mask)

        feats = Tensor(batch.feats.astype(dt, copy=False))
        q_final, image_maps = glimpse_stack(
            feats, h_large, self.image_glimpses, batch.obj_mask, batch.q_mask, self.post_glimpse
        )

        si_states = gru_scan(self.gru_si, self.embedding(batch.si_ids))
        b_si = context
        si_maps = []
        for glimpse in self.si_glimpses:
            b_si, att = si_branch(si_states, b_si, glimpse, batch.si_mask, batch.q_mask)
            si_maps.append(att)

        logits, pooled = self.classify(q_final, b_si, context, batch.q_mask, training, rng)
        return ModelOutputs(logits, pooled[0], pooled[1], pooled[2], q_weights, image_maps, si_maps)

    def classify(self, b_c_v_seq, b_c_si_seq, c_q_s_seq, q_mask=None, training=False, rng=None):
        """Sum-pool the three sequences, concatenate, and score every answer."""
        c = self.config
        seqs = [b_c_v_seq, b_c_si_seq, c_q_s_seq]
        if q_mask is not None:
            keep = np.asarray(q_mask, dtype=c.np_dtype)[..., None]
            seqs = [s * keep for s in seqs]
        pooled = [dm.reduce_sum(s, axis=-2) for s in seqs]
        z = dm.concat(pooled, axis=-1)
        if z.shape[-1] != c.pooled_width:
            raise DimensionError(f"pooled width {z.shape[-1]} != configured {c.pooled_width}")
        z = dropout(z, c.dropout_classifier, training, rng)
        h = dropout(dm.relu(self.classifier_fc(z)), c.dropout_fc, training, rng)
        return self.classifier_out(h), pooled


def loss_fn(logits: Tensor, soft_targets: np.ndarray, kind: str = "bce", labels: np.ndarray | None = None) -> Tensor:
    """Training loss.

    ``bce``: mean binary cross-entropy against soft scores.  ``softmax``:
    cross-entropy on the canonical answer; rows whose label is -1 (answer
    outside the set) are ignored.
    """
    if kind == "bce":
        return dm.bce_with_logits(logits, soft_targets)
    if kind != "softmax":
        raise ConfigError(f"unknown loss {kind!r}")
    if labels is None:
        raise ContractError("softmax loss needs labels")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    rows = np.flatnonzero(labels >= 0)
    onehot[rows, labels[rows]] = 1.0
    return dm.mul(dm.reduce_sum(dm.log_softmax(logits, axis=-1) * onehot), -1.0 / max(len(rows), 1))


# ---------------------------------------------------------------- bundle


class VqaCoinModel:
    """Network plus the vocabulary and answer set it was built for."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, answers: AnswerSet, seed: int = 0):
        self.config = dataclasses.replace(config, answer_count=len(answers)).validate()
        self.vocab = vocab
        self.answers = answers
        self.seed = seed
        self.net = VqaCoinNet(self.config, len(vocab), np.random.default_rng(seed))

    @classmethod
    def build(cls, config: ModelConfig, examples: Sequence[VqaExample], min_answer_count: int = 9, seed: int = 0):
        """Vocabulary and answer set from training examples, then a fresh network."""
        vocab = Vocabulary.build(
            [tokenize_question(e.question, config.n_q_max) for e in examples]
            + [e.si_words[: config.si_max] for e in examples]
        )
        answers = build_answer_set(examples, min_answer_count)
        return cls(config, vocab, answers, seed)

    def encode(self, examples: Sequence[VqaExample]) -> list[EncodedExample]:
        c = self.config
        out = []
        for e in examples:
            q = tokenize_question(e.question, c.n_q_max)
            si = e.si_words[: c.si_max] or [UNK_TOKEN]
            feats = np.asarray(e.image_feats)
            if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] != c.d_image:
                raise DimensionError(
                    f"question {e.question_id}: image features {feats.shape} do not match (f_i >= 1, {c.d_image})"
                )
            label = self.answers.index.get(e.canonical_answer, -1) if e.canonical_answer is not None else -1
            out.append(
                EncodedExample(
                    question_id=e.question_id,
                    q_ids=np.array(self.vocab.encode(q), dtype=np.int64),
                    si_ids=np.array(self.vocab.encode(si), dtype=np.int64),
                    feats=feats,
                    targets=self.answers.soft_scores(e.answers),
                    label=label,
                )
            )
        return out

    def collate(self, items: Sequence[EncodedExample]) -> Batch:
        return collate(items, len(self.answers), self.config.np_dtype)

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ModelOutputs:
        return self.net.forward(batch, training, rng)

    def loss(self, outputs: ModelOutputs, batch: Batch) -> Tensor:
        return loss_fn(outputs.logits, batch.targets, self.config.loss, batch.labels)

    def predict_ids(self, examples: Sequence[VqaExample], batch_size: int = 256) -> np.ndarray:
        encoded = self.encode(examples)
        out = []
        for start in range(0, len(encoded), batch_size):
            logits = self.forward(self.collate(encoded[start : start + batch_size])).logits.data
            out.append(np.argmax(logits, axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def predict(self, examples: Sequence[VqaExample], batch_size: int = 256) -> list[str]:
        return [self.answers.answers[i] for i in self.predict_ids(examples, batch_size)]

    def num_parameters(self) -> int:
        return self.net.num_parameters()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: VqaCoinModel, path: str | Path, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Write config, vocabulary, answers and weights into one zip archive.

    ``meta.json`` holds the JSON parts; each parameter is ``param/<name>.npy``.
    ``extra``/``arrays`` let the trainer stash optimizer state alongside.
    The bytes depend only on the contents.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "vocab": model.vocab.itos,
        "answers": model.answers.answers,
        "extra": extra or {},
    }
    blobs = {f"param/{name}": p.data for name, p in model.net.named_parameters()}
    blobs.update(arrays or {})
    write_archive(path, blobs, {"meta.json": json.dumps(meta, sort_keys=True, indent=1)})


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        arrays, texts = read_archive(path)
        meta = json.loads(texts["meta.json"])
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(exc).__name__}: {exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
    return meta, arrays


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> VqaCoinModel:
    """Rebuild a model; a ``config`` that disagrees with the stored one is an error."""
    meta, arrays = read_checkpoint(path)
    stored = ModelConfig(**meta["config"])
    if config is not None:
        expect = dataclasses.asdict(config)
        diffs = {k: (v, expect[k]) for k, v in dataclasses.asdict(stored).items() if expect[k] != v}
        if diffs:
            raise ConfigError(f"checkpoint config mismatch (stored, requested): {diffs}")
    model = VqaCoinModel(stored, Vocabulary(meta["vocab"]), AnswerSet(meta["answers"]), meta["seed"])
    for name, p in model.net.named_parameters():
        blob = arrays.get(f"param/{name}")
        if blob is None or blob.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or misshapen")
        p.data = blob.astype(p.dtype, copy=False)
    model.checkpoint_meta = meta
    model.checkpoint_arrays = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return model
