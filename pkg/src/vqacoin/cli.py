"""Command-line entry point: ``vqacoin <subcommand> ...``.

Configs are JSON objects with flat dotted keys (``model.d_hidden``,
``train.epochs``, ``data.n_train``, plus ``seed``, ``parallelism`` and
``min_answer_count``).  ``--config`` takes a file path or a bundled preset
name (``desk``, ``paper``); ``--set key=value`` overrides single keys.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
contract failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .data import SyntheticConfig, generate_split, load_dataset, load_split, save_dataset
from .errors import ConfigError, DataError, VqaCoinError
from .evaluation import dump_attention, evaluate, export_results, scaling_experiment
from .model import ModelConfig, VqaCoinModel, load_checkpoint
from .textprep import dedup_captions, filter_content_words, semantic_info
from .train import TrainSchedule, train_loop

log = logging.getLogger("vqacoin")

PRESETS = ("desk", "paper")
_SECTIONS = {"model": ModelConfig, "train": TrainSchedule, "data": SyntheticConfig}
_TOP_LEVEL = {"seed": 0, "parallelism": 1, "min_answer_count": 9}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainSchedule
    data: SyntheticConfig
    seed: int = 0
    parallelism: int = 1
    min_answer_count: int = 9

    def flat(self) -> dict:
        out = {k: getattr(self, k) for k in _TOP_LEVEL}
        for section in _SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return dict(sorted(out.items()))


def load_preset(name: str) -> dict:
    text = resources.files("vqacoin.resources").joinpath("presets").joinpath(f"{name}.json").read_text("utf-8")
    return json.loads(text)


def _read_config(spec: str | None) -> dict:
    if spec is None:
        return load_preset("desk")
    if spec in PRESETS and not Path(spec).exists():
        return load_preset(spec)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"config file not found: {spec}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: malformed JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{spec}: config must be a JSON object")
    return raw


def _parse_override(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def resolve_config(spec: str | None, overrides=()) -> RunConfig:
    """Merge config file and overrides, reject unknown keys, validate everything."""
    flat = dict(_read_config(spec))
    flat.update(_parse_override(o) for o in overrides)
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    top = dict(_TOP_LEVEL)
    unknown = []
    for key, value in flat.items():
        head, dot, tail = key.partition(".")
        if not dot:
            if key in top:
                top[key] = value
            else:
                unknown.append(key)
        elif head in _SECTIONS and tail in {f.name for f in dataclasses.fields(_SECTIONS[head])}:
            sections[head][tail] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k in _TOP_LEVEL:
        if not isinstance(top[k], int) or isinstance(top[k], bool):
            raise ConfigError(f"{k} must be an integer")
    if top["parallelism"] < 1 or top["min_answer_count"] < 1:
        raise ConfigError("parallelism and min_answer_count must be >= 1")
    try:
        cfg = RunConfig(**{s: cls(**sections[s]) for s, cls in _SECTIONS.items()}, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.model.validate(need_answers=False)
    cfg.train.validate()
    cfg.data.validate()
    if cfg.data.d_image != cfg.model.d_image:
        raise ConfigError(f"data.d_image ({cfg.data.d_image}) != model.d_image ({cfg.model.d_image})")
    return cfg


# ---------------------------------------------------------------- manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name != "manifest.json" and f.exists():
                out[str(f)] = sha256_file(f)
    return out


def write_manifest(path: str | Path, command: str, args: dict, config: RunConfig | None, inputs=(), outputs=()) -> dict:
    """Record what ran and on what, with content hashes of inputs and outputs."""
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(args.items()) if k not in ("func", "command")},
        "config": config.flat() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------- subcommands


def _data_dir(root: str | Path, split: str) -> Path:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    return root / split if (root / split).is_dir() else root


def cmd_gen_data(a) -> int:
    cfg = resolve_config(a.config, a.set)
    out = Path(a.out)
    d = cfg.data
    for split, n in (("train", d.n_train), ("val", d.n_val)):
        if n:
            save_dataset(generate_split(d, split, n), out / split, d.features_format)
    write_manifest(out / "manifest.json", "gen-data", vars(a), cfg, outputs=[out])
    print(f"wrote {d.n_train} train / {d.n_val} val examples to {out}")
    return 0


def cmd_prep(a) -> int:
    src = Path(a.captions)
    if not src.exists():
        raise DataError(f"missing file: {src}")
    if src.suffix == ".json":
        try:
            mapping = json.loads(src.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{src}: malformed JSON ({exc})") from None
        if not isinstance(mapping, dict):
            raise DataError(f"{src}: expected an object of image_id -> caption list")
        result = {str(k): semantic_info(v) for k, v in sorted(mapping.items(), key=lambda kv: str(kv[0]))}
    else:
        captions = [line.strip() for line in src.read_text(encoding="utf-8").splitlines() if line.strip()]
        kept = dedup_captions(captions)
        result = {"sentences": kept, "words": filter_content_words(kept)}
    Path(a.out).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(Path(a.out).with_suffix(".manifest.json"), "prep", vars(a), None, [src], [a.out])
    return 0


def cmd_train(a) -> int:
    cfg = resolve_config(a.config, a.set)
    train = load_split(_data_dir(a.data, "train"))
    val_dir = Path(a.data) / "val"
    val = load_split(val_dir) if val_dir.is_dir() else None
    model = VqaCoinModel.build(cfg.model, train, cfg.min_answer_count, cfg.seed)
    log.info("model has %d parameters, %d answers", model.num_parameters(), len(model.answers))
    out = Path(a.out)
    result = train_loop(model, train, cfg.train, cfg.seed, val, out_dir=out, resume_from=a.resume)
    last = result.trace[-1]
    print(f"epochs {last['epoch']}  final train loss {last['train_loss']:.5f}  best val {result.best_val}")
    inputs = [a.data] + ([a.resume] if a.resume else [])
    outputs = [out / n for n in ("best.ckpt", "last.ckpt", "metrics.jsonl")]
    write_manifest(out / "manifest.json", "train", vars(a), cfg, inputs, outputs)
    return 0


def cmd_eval(a) -> int:
    model = load_checkpoint(a.checkpoint)
    examples = load_split(_data_dir(a.data, a.split))
    report = evaluate(model, examples, exact=a.exact, provenance={"checkpoint": str(a.checkpoint)})
    print(report.table())
    if a.out:
        Path(a.out).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(Path(a.out).with_suffix(".manifest.json"), "eval", vars(a), None,
                       [a.checkpoint, a.data], [a.out])
    return 0


def cmd_predict(a) -> int:
    model = load_checkpoint(a.checkpoint)
    examples = load_dataset(a.questions, None, a.features, a.si)
    predictions = dict(zip((e.question_id for e in examples), model.predict(examples)))
    export_results(predictions, a.out, expected_ids=[e.question_id for e in examples])
    inputs = [p for p in (a.checkpoint, a.questions, a.features, a.si) if p]
    write_manifest(Path(a.out).with_suffix(".manifest.json"), "predict", vars(a), None, inputs, [a.out])
    print(f"wrote {len(predictions)} predictions to {a.out}")
    return 0


def cmd_scale(a) -> int:
    cfg = resolve_config(a.config, a.set)
    try:
        fractions = [float(f) for f in a.fractions.split(",")]
    except ValueError:
        raise ConfigError(f"--fractions must be comma-separated numbers, got {a.fractions!r}") from None
    if a.data:
        train, val = load_split(_data_dir(a.data, "train")), load_split(Path(a.data) / "val")
    else:
        train, val = generate_split(cfg.data, "train"), generate_split(cfg.data, "val")
    seeds = [cfg.seed + i for i in range(a.seeds)]

    def progress(row):
        log.info("fraction %.2f seed %d: val %.4f", row["fraction"], row["seed"], row["val_accuracy"])

    report = scaling_experiment(train, val, cfg.model, cfg.train, fractions, seeds, cfg.min_answer_count,
                                progress, workers=cfg.parallelism)
    print(report.table())
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scaling.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n", "utf-8")
        write_manifest(out / "manifest.json", "scale", vars(a), cfg, [a.data] if a.data else [], [out / "scaling.json"])
    return 0


def cmd_attn_dump(a) -> int:
    model = load_checkpoint(a.checkpoint)
    examples = load_split(_data_dir(a.data, a.split))
    match = [e for e in examples if e.question_id == a.question_id]
    if not match:
        raise DataError(f"question_id {a.question_id} not found under {a.data}")
    dump_attention(model, match[0], a.out)
    write_manifest(Path(a.out).with_suffix(".manifest.json"), "attn-dump", vars(a), None,
                   [a.checkpoint, a.data], [a.out])
    print(f"wrote attention maps for question {a.question_id} to {a.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqacoin", description="Question answering over image features and captions.")
    p.add_argument("--version", action="version", version=f"vqacoin {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file or preset name (desk, paper); default desk")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("gen-data", help="write a synthetic corpus")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("prep", help="caption dedup and content-word filtering")
    sp.add_argument("--captions", required=True, help=".json {image_id: [captions]} or text, one caption per line")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prep)

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--data", required=True, help="corpus directory with train/ and optionally val/")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="last.ckpt of an interrupted run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--exact", action="store_true", help="average over leave-one-out annotator subsets")
    sp.add_argument("--out", help="also write the report as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write challenge-format predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--questions", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--si")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("scale", help="train on fractions of the training split")
    with_config(sp)
    sp.add_argument("--fractions", default="0.25,0.5,0.75,1.0")
    sp.add_argument("--seeds", type=int, default=3, help="number of seeds, counting up from the config seed")
    sp.add_argument("--data", help="corpus directory; generated from the config when omitted")
    sp.add_argument("--out", help="directory for scaling.json and a manifest")
    sp.set_defaults(func=cmd_scale)

    sp = sub.add_parser("attn-dump", help="write attention maps for one question")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--question-id", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attn_dump)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VQACOIN_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VqaCoinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
