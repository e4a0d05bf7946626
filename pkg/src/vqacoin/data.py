"""VQA-v2-shaped dataset files and a deterministic synthetic scene corpus.

Synthetic images are scenes of up to 16 objects on a 4x4 grid.  Each object
becomes one feature row: one-hot shape, color, grid row and grid column in
the first 22 coordinates, Gaussian noise in the rest.  Questions come from
three templates (existence, counting, color-of-unique-shape) whose answers
are computed from the scene, and semantic info is produced by running
per-object caption fragments through the caption pipeline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._npzio import write_archive
from .errors import ConfigError, DataError
from .textprep import normalize_answer, semantic_info

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "diamond", "star", "hexagon")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")
GRID = 4
ONE_HOT_WIDTH = len(SHAPES) + len(COLORS) + 2 * GRID
CATEGORIES = ("yes/no", "number", "other")
TEMPLATES = ("exist", "count", "color")
N_ANNOTATORS = 10
SCALE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)

FILES = {
    "questions": "questions.json",
    "annotations": "annotations.json",
    "features": "features.json",
    "si": "si.json",
}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int

    def count(self, shape: str, color: str | None = None) -> int:
        return sum(o.shape == shape and (color is None or o.color == color) for o in self.objects)


@dataclass(eq=False)
class VqaExample:
    question_id: int
    image_id: int
    question: str
    image_feats: np.ndarray
    si_words: list[str]
    answers: list[str] = field(default_factory=list)
    canonical_answer: str | None = None
    category: str | None = None

    @property
    def has_answers(self) -> bool:
        return bool(self.answers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VqaExample):
            return NotImplemented
        return (
            (self.question_id, self.image_id, self.question, self.si_words, self.answers)
            == (other.question_id, other.image_id, other.question, other.si_words, other.answers)
            and (self.canonical_answer, self.category) == (other.canonical_answer, other.category)
            and self.image_feats.shape == other.image_feats.shape
            and np.array_equal(self.image_feats, other.image_feats)
        )


# ---------------------------------------------------------------- scenes


def gen_scene(seed: int, object_count_range: tuple[int, int] = (1, 6)) -> SceneSpec:
    lo, hi = object_count_range
    if not 1 <= lo <= hi <= GRID * GRID:
        raise ConfigError(f"object count range {object_count_range} must lie within [1, {GRID * GRID}]")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    shapes = rng.integers(len(SHAPES), size=n)
    colors = rng.integers(len(COLORS), size=n)
    objects = tuple(SceneObject(SHAPES[s], COLORS[c], int(cell)) for s, c, cell in zip(shapes, colors, cells))
    return SceneSpec(objects, seed)


def scene_to_features(scene: SceneSpec, d_image: int, noise_sigma: float, seed: int) -> np.ndarray:
    if d_image < ONE_HOT_WIDTH:
        raise ConfigError(f"d_image must be at least {ONE_HOT_WIDTH} to hold the attribute blocks, got {d_image}")
    rng = np.random.default_rng(seed)
    feats = np.zeros((len(scene.objects), d_image))
    for i, obj in enumerate(scene.objects):
        feats[i, SHAPES.index(obj.shape)] = 1.0
        feats[i, len(SHAPES) + COLORS.index(obj.color)] = 1.0
        base = len(SHAPES) + len(COLORS)
        feats[i, base + obj.row] = 1.0
        feats[i, base + GRID + obj.col] = 1.0
    if noise_sigma > 0 and d_image > ONE_HOT_WIDTH:
        feats[:, ONE_HOT_WIDTH:] = rng.normal(0.0, noise_sigma, size=(len(scene.objects), d_image - ONE_HOT_WIDTH))
    return feats


def scene_captions(scene: SceneSpec, rng: np.random.Generator, dup_rate: float = 0.35) -> list[str]:
    """Caption fragments in object order, with near-duplicate restatements."""
    captions = []
    for obj in scene.objects:
        filler = ("a ", "the ", "")[int(rng.integers(3))]
        captions.append(f"{filler}{obj.color} {obj.shape}")
        if rng.random() < dup_rate:
            captions.append(f"{obj.color} {obj.shape}" if filler else f"a {obj.color} {obj.shape}")
    return captions


# ---------------------------------------------------------------- questions


def answer_pool(category: str, max_objects: int = GRID * GRID) -> list[str]:
    if category == "yes/no":
        return ["yes", "no"]
    if category == "number":
        return [str(k) for k in range(max_objects + 1)]
    return list(COLORS)


def _question(template: str, scene: SceneSpec, rng: np.random.Generator) -> tuple[str, str, str] | None:
    """``(question, canonical answer, category)`` or None when not askable."""
    if template == "exist":
        if rng.random() < 0.5:
            obj = scene.objects[int(rng.integers(len(scene.objects)))]
            shape, color = obj.shape, obj.color
        else:
            shape, color = SHAPES[int(rng.integers(len(SHAPES)))], COLORS[int(rng.integers(len(COLORS)))]
        truth = "yes" if scene.count(shape, color) else "no"
        return f"Is there a {color} {shape}?", truth, "yes/no"
    if template == "count":
        if rng.random() < 0.5:
            shape = scene.objects[int(rng.integers(len(scene.objects)))].shape
        else:
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
        return f"How many {shape}s are there?", str(scene.count(shape)), "number"
    if template == "color":
        unique = [o for o in scene.objects if scene.count(o.shape) == 1]
        if not unique:
            return None
        obj = unique[int(rng.integers(len(unique)))]
        return f"What color is the {obj.shape}?", obj.color, "other"
    raise ConfigError(f"unknown question template {template!r}")


def oracle_answer(question: str, scene: SceneSpec) -> str:
    """Recompute a template question's answer directly from the scene."""
    words = question.lower().rstrip("?").split()
    if words[:3] == ["is", "there", "a"]:
        return "yes" if scene.count(words[4], words[3]) else "no"
    if words[:2] == ["how", "many"]:
        return str(scene.count(words[2][:-1]))
    if words[:3] == ["what", "color", "is"]:
        (obj,) = [o for o in scene.objects if o.shape == words[4]]
        return obj.color
    raise DataError(f"not a template question: {question!r}")


def annotate(truth: str, category: str, noise: float, rng: np.random.Generator) -> list[str]:
    pool = [a for a in answer_pool(category) if a != truth]
    out = []
    for _ in range(N_ANNOTATORS):
        flip = rng.random() < noise
        out.append(pool[int(rng.integers(len(pool)))] if flip else truth)
    return out


def gen_examples(
    scene: SceneSpec,
    image_id: int,
    feats: np.ndarray,
    rng: np.random.Generator,
    annotator_noise: float = 0.1,
    templates: Sequence[str] = TEMPLATES,
) -> list[VqaExample]:
    si = semantic_info(scene_captions(scene, rng))
    examples = []
    for k, template in enumerate(templates):
        asked = _question(template, scene, rng)
        if asked is None:
            continue
        question, truth, category = asked
        examples.append(
            VqaExample(
                question_id=image_id * 10 + k,
                image_id=image_id,
                question=question,
                image_feats=feats,
                si_words=list(si),
                answers=annotate(truth, category, annotator_noise, rng),
                canonical_answer=truth,
                category=category,
            )
        )
    return examples


@dataclass
class SyntheticConfig:
    n_train: int = 5000
    n_val: int = 1000
    d_image: int = 64
    noise_sigma: float = 0.1
    annotator_noise: float = 0.1
    object_count_min: int = 1
    object_count_max: int = 6
    seed: int = 0
    features_format: str = "json"

    def validate(self) -> None:
        if self.n_train < 1 or self.n_val < 0:
            raise ConfigError("n_train must be >= 1 and n_val >= 0")
        if not 0.0 <= self.annotator_noise <= 1.0 or self.noise_sigma < 0:
            raise ConfigError("annotator_noise must lie in [0, 1] and noise_sigma be >= 0")
        if self.features_format not in ("json", "npz"):
            raise ConfigError(f"features_format must be 'json' or 'npz', got {self.features_format!r}")
        if self.d_image < ONE_HOT_WIDTH:
            raise ConfigError(f"d_image must be at least {ONE_HOT_WIDTH}")
        if not 1 <= self.object_count_min <= self.object_count_max <= GRID * GRID:
            raise ConfigError("object count range must lie within [1, 16]")


_SPLIT_CODE = {"train": 0, "val": 1}
_IMAGE_ID_BASE = {"train": 0, "val": 1_000_000}


def generate_split(cfg: SyntheticConfig, split: str, n_examples: int | None = None) -> list[VqaExample]:
    """Examples for one split; image ``i`` draws from seed ``(seed, split, i)``."""
    cfg.validate()
    n = n_examples if n_examples is not None else (cfg.n_train if split == "train" else cfg.n_val)
    out: list[VqaExample] = []
    i = 0
    while len(out) < n:
        image_id = _IMAGE_ID_BASE[split] + i
        scene_seed = int(np.random.SeedSequence([cfg.seed, _SPLIT_CODE[split], i]).generate_state(1)[0])
        scene = gen_scene(scene_seed, (cfg.object_count_min, cfg.object_count_max))
        feats = scene_to_features(scene, cfg.d_image, cfg.noise_sigma, scene_seed + 1)
        rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], i, 7])
        out.extend(gen_examples(scene, image_id, feats, rng, cfg.annotator_noise))
        i += 1
    return out[:n]


def regenerate_scene(cfg: SyntheticConfig, split: str, image_id: int) -> SceneSpec:
    i = image_id - _IMAGE_ID_BASE[split]
    scene_seed = int(np.random.SeedSequence([cfg.seed, _SPLIT_CODE[split], i]).generate_state(1)[0])
    return gen_scene(scene_seed, (cfg.object_count_min, cfg.object_count_max))


# ---------------------------------------------------------------- files


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def save_dataset(examples: Sequence[VqaExample], out_dir: str | Path, features_format: str = "json") -> dict[str, Path]:
    """Write the four VQA-shaped files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images: dict[int, VqaExample] = {}
    for ex in examples:
        images.setdefault(ex.image_id, ex)
    questions = [{"question_id": e.question_id, "image_id": e.image_id, "question": e.question} for e in examples]
    paths = {k: out / v for k, v in FILES.items()}
    _dump({"questions": questions}, paths["questions"])
    if all(e.has_answers for e in examples):
        annotations = [
            {
                "question_id": e.question_id,
                "image_id": e.image_id,
                "answers": [{"answer": a, "answer_id": k + 1} for k, a in enumerate(e.answers)],
                "multiple_choice_answer": e.canonical_answer,
                "answer_type": e.category,
            }
            for e in examples
        ]
        _dump({"annotations": annotations}, paths["annotations"])
    else:
        paths.pop("annotations")
    if features_format == "npz":
        paths["features"] = out / "features.npz"
        write_archive(paths["features"], {str(i): e.image_feats for i, e in sorted(images.items())})
    else:
        _dump({str(i): e.image_feats.tolist() for i, e in sorted(images.items())}, paths["features"])
    _dump({str(i): e.si_words for i, e in sorted(images.items())}, paths["si"])
    return paths


def read_json(path: str | Path):
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(raw[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from None


def load_features(path: str | Path) -> dict[int, np.ndarray]:
    path = Path(path)
    if path.suffix == ".npz":
        if not path.exists():
            raise DataError(f"missing file: {path}")
        with np.load(path, allow_pickle=False) as npz:
            return {int(k): npz[k] for k in npz.files}
    return {int(k): np.asarray(v, dtype=np.float64) for k, v in read_json(path).items()}


def load_dataset(
    questions_path: str | Path,
    annotations_path: str | Path | None,
    features_path: str | Path,
    si_path: str | Path | None = None,
) -> list[VqaExample]:
    """Join the VQA-shaped files into examples, in question-file order.

    Without annotations the examples carry no answers (a test split).
    Images missing from the SI file get empty semantic info and are counted
    in a warning.
    """
    questions = read_json(questions_path).get("questions")
    if questions is None:
        raise DataError(f"{questions_path}: no 'questions' list")
    feats = load_features(features_path)
    si = {int(k): v for k, v in read_json(si_path).items()} if si_path is not None else {}

    dangling = sorted({q["image_id"] for q in questions} - feats.keys())
    if dangling:
        raise DataError(f"questions reference images without features: {dangling[:20]}")

    annotations = {}
    if annotations_path is not None and Path(annotations_path).exists():
        for a in read_json(annotations_path).get("annotations", []):
            annotations[a["question_id"]] = a
        missing = [q["question_id"] for q in questions if q["question_id"] not in annotations]
        if missing:
            raise DataError(f"questions without annotations: {missing[:20]}")

    examples = []
    no_si = set()
    for q in questions:
        image_id = q["image_id"]
        if image_id not in si:
            no_si.add(image_id)
        ann = annotations.get(q["question_id"])
        answers = [normalize_answer(a["answer"]) for a in ann["answers"]] if ann else []
        examples.append(
            VqaExample(
                question_id=q["question_id"],
                image_id=image_id,
                question=q["question"],
                image_feats=feats[image_id],
                si_words=list(si.get(image_id, [])),
                answers=answers,
                canonical_answer=normalize_answer(ann["multiple_choice_answer"]) if ann else None,
                category=ann.get("answer_type") if ann else None,
            )
        )
    if no_si:
        log.warning("%d images have no semantic info; using empty word lists", len(no_si))
    return examples


def split_paths(split_dir: str | Path) -> dict[str, Path | None]:
    d = Path(split_dir)
    feats = d / "features.npz" if (d / "features.npz").exists() else d / FILES["features"]
    ann = d / FILES["annotations"]
    si = d / FILES["si"]
    return {
        "questions_path": d / FILES["questions"],
        "annotations_path": ann if ann.exists() else None,
        "features_path": feats,
        "si_path": si if si.exists() else None,
    }


def load_split(split_dir: str | Path) -> list[VqaExample]:
    return load_dataset(**split_paths(split_dir))


# ---------------------------------------------------------------- scaling


def scale_split(examples: Sequence[VqaExample], fraction: float, seed: int) -> list[VqaExample]:
    """The first ``ceil(fraction * n)`` items of a seeded shuffle.

    Subsets for one seed are nested as the fraction grows.  The returned
    items keep their original relative order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(examples)
    k = math.ceil(round(fraction * n, 9))
    keep = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    return [examples[i] for i in keep]


def category_counts(examples: Iterable[VqaExample]) -> dict[str, int]:
    counts = {c: 0 for c in CATEGORIES}
    for e in examples:
        if e.category in counts:
            counts[e.category] += 1
    return counts
