"""Soft accuracy, per-category reports, result export, scaling runs and attention dumps."""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attention import AttentionMap
from .data import CATEGORIES, SCALE_FRACTIONS, VqaExample, scale_split
from .errors import ContractError, DataError
from .textprep import normalize_answer, tokenize_question


def soft_accuracy(predicted: str, annotators: Sequence[str], exact: bool = False) -> float:
    """``min(matches / 3, 1)`` over ten annotator answers.

    With ``exact`` the score is averaged over the ten leave-one-out subsets
    of nine annotators, as the official evaluation does.
    """
    if len(annotators) != 10:
        raise ContractError(f"soft accuracy needs 10 annotator answers, got {len(annotators)}")
    matches = sum(a == predicted for a in annotators)
    if not exact:
        return min(matches / 3.0, 1.0)
    # closed form over the match count keeps the result independent of annotator order
    return (matches * min((matches - 1) / 3.0, 1.0) + (10 - matches) * min(matches / 3.0, 1.0)) / 10.0


@dataclass
class EvalReport:
    overall: float
    per_category: dict[str, float]
    counts: dict[str, int]
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def table(self) -> str:
        cols = [c for c in CATEGORIES if self.counts.get(c)] + [c for c in self.counts if c not in CATEGORIES]
        head = " | ".join(f"{c:>8}" for c in cols + ["overall"])
        vals = " | ".join(f"{100 * self.per_category[c]:8.2f}" for c in cols) + f" | {100 * self.overall:8.2f}"
        n = " | ".join(f"{self.counts[c]:8d}" for c in cols) + f" | {sum(self.counts.values()):8d}"
        return f"{head}\n{vals}\n{n}"


def report_from_scores(scores: Sequence[float], categories: Sequence[str | None], provenance=None) -> EvalReport:
    if not scores:
        raise ContractError("cannot evaluate an empty example set")
    groups: dict[str, list[float]] = {}
    for s, c in zip(scores, categories):
        groups.setdefault(c or "unknown", []).append(s)
    per = {c: math.fsum(v) / len(v) for c, v in groups.items()}
    counts = {c: len(v) for c, v in groups.items()}
    return EvalReport(math.fsum(scores) / len(scores), per, counts, dict(provenance or {}))


def evaluate(model, examples: Sequence[VqaExample], exact: bool = False, provenance=None) -> EvalReport:
    """Mean soft accuracy of ``model.predict`` over annotated examples."""
    if not examples:
        raise ContractError("cannot evaluate an empty example set")
    if not all(e.has_answers for e in examples):
        raise ContractError("evaluation needs annotator answers (test splits have none)")
    predictions = model.predict(examples)
    return score_predictions(predictions, examples, exact, provenance)


def score_predictions(predictions: Sequence[str], examples: Sequence[VqaExample], exact=False, provenance=None):
    scores = [
        soft_accuracy(normalize_answer(p), [normalize_answer(a) for a in e.answers], exact)
        for p, e in zip(predictions, examples)
    ]
    return report_from_scores(scores, [e.category for e in examples], provenance)


# ---------------------------------------------------------------- export


def export_results(predictions: Mapping[int, str] | Sequence[tuple[int, str]], path: str | Path | None = None,
                   expected_ids: Sequence[int] | None = None) -> str:
    """Serialize ``[{"question_id", "answer"}]`` sorted by question id.

    Duplicate ids, or ids missing relative to ``expected_ids``, are errors.
    Returns the JSON text and writes it when ``path`` is given.
    """
    pairs = list(predictions.items()) if isinstance(predictions, Mapping) else list(predictions)
    ids = [int(q) for q, _ in pairs]
    dupes = sorted(q for q, c in Counter(ids).items() if c > 1)
    if dupes:
        raise DataError(f"duplicate question_id in predictions: {dupes[:20]}")
    if expected_ids is not None:
        missing = sorted(set(expected_ids) - set(ids))
        if missing:
            raise DataError(f"no prediction for question_id {missing[:20]}")
    records = [{"question_id": int(q), "answer": str(a)} for q, a in sorted(pairs, key=lambda qa: int(qa[0]))]
    text = json.dumps(records, indent=None, separators=(", ", ": ")) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_results(path: str | Path) -> dict[int, str]:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON array")
    out = {}
    for r in records:
        if set(r) != {"question_id", "answer"}:
            raise DataError(f"{path}: record {r} must have exactly question_id and answer")
        out[int(r["question_id"])] = r["answer"]
    return out


# ---------------------------------------------------------------- scaling


@dataclass
class ScalingReport:
    rows: list[dict]

    def means(self) -> dict[float, float]:
        by: dict[float, list[float]] = {}
        for r in self.rows:
            by.setdefault(r["fraction"], []).append(r["val_accuracy"])
        return {f: math.fsum(v) / len(v) for f, v in sorted(by.items())}

    def to_json(self) -> dict:
        return {"rows": self.rows, "mean": {str(f): m for f, m in self.means().items()}}

    def table(self) -> str:
        seeds = sorted({r["seed"] for r in self.rows})
        head = f"{'Scale%':>7} | {'mean':>7} | " + " | ".join(f"seed {s:>3}" for s in seeds)
        lines = [head, "-" * len(head)]
        for f, m in self.means().items():
            accs = {r["seed"]: r["val_accuracy"] for r in self.rows if r["fraction"] == f}
            cells = " | ".join(f"{100 * accs[s]:8.2f}" if s in accs else f"{'-':>8}" for s in seeds)
            lines.append(f"{100 * f:7.0f} | {100 * m:7.2f} | {cells}")
        return "\n".join(lines)


def train_and_score(train_examples, val_examples, model_config, schedule, seed, min_answer_count=9):
    """Build a model on ``train_examples``, train it, and evaluate on ``val_examples``."""
    from .model import VqaCoinModel
    from .train import train_loop

    model = VqaCoinModel.build(model_config, train_examples, min_answer_count, seed)
    result = train_loop(model, train_examples, schedule, seed)
    return model, result, evaluate(model, val_examples)


def _scale_job(job) -> dict:
    train_examples, val_examples, model_config, schedule, fraction, seed, min_answer_count = job
    subset = scale_split(train_examples, fraction, seed)
    _, result, report = train_and_score(subset, val_examples, model_config, schedule, seed, min_answer_count)
    return {
        "fraction": fraction,
        "seed": seed,
        "n_train": len(subset),
        "val_accuracy": report.overall,
        "per_category": report.per_category,
        "final_train_loss": result.trace[-1]["train_loss"],
    }


def scaling_experiment(
    train_examples: Sequence[VqaExample],
    val_examples: Sequence[VqaExample],
    model_config,
    schedule,
    fractions: Sequence[float] = SCALE_FRACTIONS,
    seeds: Sequence[int] = (0, 1, 2),
    min_answer_count: int = 9,
    progress=None,
    workers: int = 1,
) -> ScalingReport:
    """Train on nested fractions of the training split and score on a fixed val split.

    Every (fraction, seed) run is independent, so ``workers > 1`` spreads
    them over processes without changing any number in the report.
    """
    if not seeds:
        raise ContractError("scaling experiment needs at least one seed")
    bad = [f for f in fractions if f not in SCALE_FRACTIONS]
    if bad:
        raise ContractError(f"fractions {bad} are not in {SCALE_FRACTIONS}")
    jobs = [
        (train_examples, val_examples, model_config, schedule, f, s, min_answer_count) for s in seeds for f in fractions
    ]
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_scale_job, jobs):
                rows.append(row)
                if progress is not None:
                    progress(row)
    else:
        for job in jobs:
            rows.append(_scale_job(job))
            if progress is not None:
                progress(rows[-1])
    rows.sort(key=lambda r: (r["fraction"], r["seed"]))
    return ScalingReport(rows)


# ---------------------------------------------------------------- attention dumps


def attention_maps(model, example: VqaExample) -> dict:
    """Attention maps of one example in eval mode, with token labels."""
    c = model.config
    batch = model.collate(model.encode([example]))
    out = model.forward(batch)
    q_tokens = tokenize_question(example.question, c.n_q_max)
    si_tokens = example.si_words[: c.si_max] or ["<unk>"]
    objects = [f"object_{i}" for i in range(np.asarray(example.image_feats).shape[0])]

    def norm(a):
        w = np.asarray(a, dtype=np.float64)
        return w / w.sum()

    si_map = AttentionMap(norm(out.si_maps[0].data[0]), si_tokens, q_tokens)
    image_maps = [AttentionMap(norm(m.data[0]), objects, q_tokens) for m in out.image_maps]
    return {
        "question_id": example.question_id,
        "question": example.question,
        "question_tokens": q_tokens,
        "si_tokens": si_tokens,
        "map": si_map.weights.tolist(),
        "si_map": si_map.to_json(),
        "image_maps": [m.to_json() for m in image_maps],
        "question_weights": out.question_weights.data[0].tolist(),
    }


def dump_attention(model, example: VqaExample, path: str | Path) -> dict:
    record = attention_maps(model, example)
    Path(path).write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")
    return record
