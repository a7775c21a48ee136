"""Flat dotted-key run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected; every key has a documented default; a fully
resolved copy is written into each run directory so any reported number can
be re-derived. CLI overrides arrive as raw ``key=value`` strings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    default: object
    type: type
    help: str
    choices: tuple | None = None


SCHEMA: dict[str, Key] = {
    "seed": Key(0, int, "root seed; all subsystem seeds derive from it"),
    "run.out_dir": Key("runs", str, "directory that holds run directories"),
    "run.name": Key("", str, "run directory name; empty derives it from the config fingerprint"),
    "dataset.kind": Key(
        "synthetic", str, "dataset source", ("synthetic", "class_folders", "packed_binary")
    ),
    "dataset.path": Key(
        "", str, "dataset location for class_folders/packed_binary; relative paths resolve "
        "against $RELDISTILL_DATA_ROOT when set"
    ),
    "dataset.min_per_category": Key(1, int, "fail loading when a category has fewer images"),
    "dataset.synthetic.categories": Key(8, int, "synthetic: number of categories"),
    "dataset.synthetic.per_category": Key(50, int, "synthetic: images per category"),
    "dataset.synthetic.image_size": Key(16, int, "synthetic: square image side"),
    "dataset.synthetic.noise_sigma": Key(0.05, float, "synthetic: Gaussian pixel noise sigma"),
    "dataset.synthetic.channels": Key(1, int, "synthetic: image channels"),
    "dataset.split.train": Key(3, int, "categories assigned to the train split"),
    "dataset.split.val": Key(0, int, "categories assigned to the val split"),
    "dataset.split.test": Key(5, int, "categories assigned to the test split"),
    "model.architecture": Key("tiny", str, "encoder family", ("tiny", "convnet4", "resnet12")),
    "model.pooling": Key("gap", str, "embedding pooling", ("gap", "flatten")),
    "stage1.batch_size": Key(64, int, "stage 1: mini-batch size before rotation expansion"),
    "stage1.epochs": Key(90, int, "stage 1: training epochs"),
    "stage1.lr_init": Key(0.05, float, "stage 1: initial learning rate (alternate preset: 0.1)"),
    "stage1.poly_power": Key(0.9, float, "stage 1: polynomial decay power"),
    "stage1.weight_decay": Key(5e-4, float, "stage 1: SGD weight decay"),
    "stage1.momentum": Key(0.9, float, "stage 1: SGD momentum"),
    "stage2.lr": Key(1e-3, float, "stage 2: learning rate"),
    "stage2.epochs": Key(15, int, "stage 2: training epochs"),
    "stage2.episodes_per_epoch": Key(100, int, "stage 2: episodes per epoch"),
    "stage2.gamma": Key(0.2, float, "stage 2: weight of the regularizer against the KL loss"),
    "stage2.temperature": Key(4.0, float, "stage 2: distillation softmax temperature"),
    "stage2.lr_decay_factor": Key(0.1, float, "stage 2: late-epoch learning-rate factor"),
    "stage2.decay_start_epoch": Key(
        -1, int, "stage 2: first decayed epoch; -1 means epochs - 5"
    ),
    "stage2.ablation": Key(
        "full", str, "stage 2: training objective variant",
        ("full", "whole_matrix", "no_regularizer", "episodic_labels_only"),
    ),
    "stage2.student_init": Key(
        "from_stage1", str, "stage 2: student initialization", ("from_stage1", "random")
    ),
    "stage2.student_checkpoint": Key(
        "", str, "stage 2: stage-1 checkpoint for the student when its architecture "
        "differs from the teacher's"
    ),
    "stage2.way": Key(5, int, "stage 2: classes per training episode"),
    "stage2.shot": Key(1, int, "stage 2: support samples per class"),
    "stage2.queries_per_class": Key(15, int, "stage 2: query samples per class"),
    "stage2.val_episodes": Key(50, int, "stage 2: validation episodes per epoch (0 disables)"),
    "stage2.momentum": Key(0.9, float, "stage 2: SGD momentum"),
    "stage2.weight_decay": Key(5e-4, float, "stage 2: SGD weight decay"),
    "eval.split": Key("test", str, "evaluation split", ("train", "val", "test")),
    "eval.way": Key(5, int, "evaluation: classes per episode"),
    "eval.shot": Key(1, int, "evaluation: support samples per class"),
    "eval.queries_per_class": Key(15, int, "evaluation: query samples per class"),
    "eval.episodes": Key(600, int, "evaluation: number of episodes"),
    "export.split": Key("test", str, "embedding export split", ("train", "val", "test")),
    "export.n_samples": Key(100, int, "embedding export sample count"),
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read raw key/value strings; unknown and duplicate keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, raw: object, spec: Key) -> object:
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if spec.type is bool:
                if text.lower() in ("true", "1", "yes"):
                    value = True
                elif text.lower() in ("false", "0", "no"):
                    value = False
                else:
                    raise ValueError(text)
            elif spec.type is int:
                value = int(text)
            elif spec.type is float:
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ConfigError(
                f"config key {key!r}: cannot parse {raw!r} as {spec.type.__name__}"
            ) from None
    elif spec.type is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        value = float(raw)
    elif isinstance(raw, spec.type) and not (spec.type is int and isinstance(raw, bool)):
        value = raw
    else:
        raise ConfigError(
            f"config key {key!r}: expected {spec.type.__name__}, got {type(raw).__name__}"
        )
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"config key {key!r}: {value!r} not in {spec.choices}")
    return value


def resolve_config(*value_maps: dict[str, object]) -> dict[str, object]:
    """Merge defaults with the given maps (later maps win) and type-check."""
    resolved = {key: spec.default for key, spec in SCHEMA.items()}
    for values in value_maps:
        for key, raw in values.items():
            spec = SCHEMA.get(key)
            if spec is None:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, raw, spec)
    return resolved


def format_config(resolved: dict[str, object]) -> str:
    return "".join(f"{key} = {resolved[key]}\n" for key in sorted(resolved))


def config_fingerprint(resolved: dict[str, object]) -> str:
    payload = json.dumps(resolved, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:12]
