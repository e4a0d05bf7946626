import json
import logging

import numpy as np
import pytest

from vqacoin.data import (
    COLORS,
    ONE_HOT_WIDTH,
    SHAPES,
    SceneObject,
    SceneSpec,
    SyntheticConfig,
    category_counts,
    gen_examples,
    gen_scene,
    generate_split,
    load_dataset,
    load_split,
    oracle_answer,
    regenerate_scene,
    save_dataset,
    scale_split,
    scene_to_features,
    split_paths,
)
from vqacoin.errors import ConfigError, DataError
from vqacoin.textprep import filtered_words


def test_scene_determinism_and_count():
    assert gen_scene(11) == gen_scene(11)
    assert all(len(gen_scene(s, (3, 3)).objects) == 3 for s in range(20))
    with pytest.raises(ConfigError):
        gen_scene(0, (0, 4))
    with pytest.raises(ConfigError):
        gen_scene(0, (2, 17))


def test_scene_cells_are_distinct():
    for s in range(200):
        cells = [o.cell for o in gen_scene(s, (1, 16)).objects]
        assert len(cells) == len(set(cells)) <= 16


def test_attribute_marginals_are_uniform():
    shapes, colors = {}, {}
    total = 0
    for s in range(10_000):
        for o in gen_scene(s).objects:
            shapes[o.shape] = shapes.get(o.shape, 0) + 1
            colors[o.color] = colors.get(o.color, 0) + 1
            total += 1
    assert all(abs(c / total - 1 / len(SHAPES)) <= 0.03 for c in shapes.values())
    assert all(abs(c / total - 1 / len(COLORS)) <= 0.03 for c in colors.values())


def test_noiseless_features_are_one_hot():
    scene = gen_scene(4, (5, 5))
    feats = scene_to_features(scene, 30, 0.0, seed=1)
    assert feats.shape == (5, 30)
    assert np.all(feats[:, ONE_HOT_WIDTH:] == 0)
    assert np.all(feats.sum(axis=1) == 4.0)
    with pytest.raises(ConfigError):
        scene_to_features(scene, 21, 0.0, seed=1)


def test_same_attributes_differ_only_in_position():
    scene = SceneSpec((SceneObject("star", "red", 0), SceneObject("star", "red", 15)), seed=0)
    a, b = scene_to_features(scene, 22, 0.0, seed=0)
    differ = np.flatnonzero(a != b)
    assert differ.min() >= len(SHAPES) + len(COLORS)


def test_template_fixtures(rng):
    red_circle = SceneSpec((SceneObject("circle", "red", 3),), seed=0)
    assert oracle_answer("Is there a red circle?", red_circle) == "yes"
    squares = SceneSpec(tuple(SceneObject("square", c, i) for i, c in enumerate(["red", "blue", "red"])), seed=0)
    assert oracle_answer("How many squares are there?", squares) == "3"
    examples = gen_examples(red_circle, 0, np.zeros((1, 22)), rng, annotator_noise=0.0)
    assert len(examples) == 3
    assert all(e.answers == [e.canonical_answer] * 10 for e in examples)


def test_color_question_skipped_for_ambiguous_scene(rng):
    squares = SceneSpec((SceneObject("square", "red", 0), SceneObject("square", "blue", 1)), seed=0)
    examples = gen_examples(squares, 0, np.zeros((2, 22)), rng)
    assert [e.category for e in examples] == ["yes/no", "number"]


def test_every_question_is_answerable():
    cfg = SyntheticConfig(seed=9)
    for e in generate_split(cfg, "train", 600):
        assert oracle_answer(e.question, regenerate_scene(cfg, "train", e.image_id)) == e.canonical_answer
        assert len(e.answers) == 10


def test_generated_semantic_info_passes_textprep_invariants():
    drop = filtered_words()
    for e in generate_split(SyntheticConfig(seed=2), "train", 300):
        assert len(e.si_words) <= 40 and not set(e.si_words) & drop


def test_annotator_noise_rate():
    examples = generate_split(SyntheticConfig(annotator_noise=0.1, seed=1), "train", 2000)
    flips = sum(a != e.canonical_answer for e in examples for a in e.answers)
    assert abs(flips / (10 * len(examples)) - 0.1) < 0.01


def test_categories_are_covered():
    counts = category_counts(generate_split(SyntheticConfig(), "train", 900))
    assert set(counts) == {"yes/no", "number", "other"}


def test_serialized_dataset_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(seed=4)
    for run in ("a", "b"):
        save_dataset(generate_split(cfg, "train", 50), tmp_path / run)
    for name in ("questions.json", "annotations.json", "features.json", "si.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("fmt", ["json", "npz"])
def test_round_trip(tmp_path, fmt):
    examples = generate_split(SyntheticConfig(seed=6), "val", 40)
    save_dataset(examples, tmp_path, fmt)
    assert load_split(tmp_path) == examples


def test_test_split_has_no_answers(tmp_path):
    examples = generate_split(SyntheticConfig(seed=6), "val", 12)
    paths = save_dataset(examples, tmp_path)
    loaded = load_dataset(paths["questions"], None, paths["features"], paths["si"])
    assert all(not e.has_answers and e.category is None for e in loaded)


def test_malformed_json_reports_byte_offset(tmp_path):
    examples = generate_split(SyntheticConfig(seed=6), "val", 5)
    paths = save_dataset(examples, tmp_path)
    paths["questions"].write_text('{"questions": [ {"question_id": 1,, }]}', encoding="utf-8")
    with pytest.raises(DataError, match="byte offset 34"):
        load_split(tmp_path)


def test_dangling_image_reference(tmp_path):
    examples = generate_split(SyntheticConfig(seed=6), "val", 5)
    paths = save_dataset(examples, tmp_path)
    q = json.loads(paths["questions"].read_text())
    q["questions"][0]["image_id"] = 424242
    paths["questions"].write_text(json.dumps(q))
    with pytest.raises(DataError, match="424242"):
        load_split(tmp_path)


def test_missing_semantic_info_warns(tmp_path, caplog):
    examples = generate_split(SyntheticConfig(seed=6), "val", 6)
    paths = save_dataset(examples, tmp_path)
    paths["si"].write_text("{}")
    with caplog.at_level(logging.WARNING):
        loaded = load_split(tmp_path)
    assert all(e.si_words == [] for e in loaded)
    assert "no semantic info" in caplog.text


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "q.json", None, tmp_path / "f.json")
    assert split_paths(tmp_path)["annotations_path"] is None


def test_scale_split_fixtures():
    items = generate_split(SyntheticConfig(seed=1), "train", 1000)
    assert scale_split(items, 1.0, 0) == items
    quarter, half = scale_split(items, 0.25, 3), scale_split(items, 0.5, 3)
    assert len(quarter) == 250 and len(half) == 500
    ids = lambda xs: {e.question_id for e in xs}
    assert ids(quarter) < ids(half) < ids(scale_split(items, 0.75, 3))
    assert scale_split(items, 0.25, 3) == quarter
    assert ids(scale_split(items, 0.25, 4)) != ids(quarter)
    order = [e.question_id for e in half]
    assert order == sorted(order, key=[e.question_id for e in items].index)
    with pytest.raises(ConfigError):
        scale_split(items, 0.0, 0)


def test_scale_split_size_is_ceiling():
    items = generate_split(SyntheticConfig(seed=1), "train", 10)
    assert len(scale_split(items, 0.25, 0)) == 3
    assert len(scale_split(items, 0.5, 0)) == 5


def test_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(annotator_noise=1.5).validate()
    with pytest.raises(ConfigError):
        SyntheticConfig(features_format="hdf5").validate()
    with pytest.raises(ConfigError):
        SyntheticConfig(d_image=10).validate()
