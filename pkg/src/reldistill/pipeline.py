"""Run orchestration: wires config to the training/evaluation modules.

Every command materializes a run directory containing the fully resolved
config, a manifest with all derived seeds and the code version, a metrics
stream (line-delimited JSON), and any produced checkpoints or result files.
Nothing in those files depends on wall-clock time, so identical configs
yield byte-identical metric streams.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_fingerprint, format_config, resolve_config
from .data import Dataset, load_dataset, make_synthetic, split_categories
from .encoders import build_encoder, build_heads, load_checkpoint
from .errors import ConfigError
from .evaluation import ablation_table, evaluate, export_embeddings
from .global_stage import StageOneConfig, train_global
from .meta_stage import StageTwoConfig, train_meta

DATA_ROOT_ENV = "RELDISTILL_DATA_ROOT"

# fixed spawn keys so every subsystem gets an independent, reproducible seed
_SUBSYSTEM_KEYS = {"data": 0, "split": 1, "stage1": 2, "stage2": 3, "eval": 4}


def derive_seed(root_seed: int, subsystem: str) -> int:
    key = _SUBSYSTEM_KEYS[subsystem]
    return int(np.random.SeedSequence(entropy=root_seed, spawn_key=(key,)).generate_state(1)[0])


class JsonlWriter:
    """Append-only metrics sink; sorted keys keep the stream byte-stable."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def prepare_run(config_values: dict | None = None, command: str = "run") -> tuple[dict, Path]:
    """Resolve config, create the run directory, write config + manifest."""
    resolved = resolve_config(config_values or {})
    fingerprint = config_fingerprint(resolved)
    name = resolved["run.name"] or f"{command}-{fingerprint}"
    run_dir = Path(resolved["run.out_dir"]) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(format_config(resolved))
    seed = resolved["seed"]
    manifest = {
        "command": command,
        "version": __version__,
        "config_fingerprint": fingerprint,
        "seed": seed,
        "derived_seeds": {name: derive_seed(seed, name) for name in _SUBSYSTEM_KEYS},
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return resolved, run_dir


def build_dataset(resolved: dict) -> Dataset:
    seed = resolved["seed"]
    kind = resolved["dataset.kind"]
    if kind == "synthetic":
        dataset = make_synthetic(
            resolved["dataset.synthetic.categories"],
            resolved["dataset.synthetic.per_category"],
            resolved["dataset.synthetic.image_size"],
            resolved["dataset.synthetic.noise_sigma"],
            seed=derive_seed(seed, "data"),
            channels=resolved["dataset.synthetic.channels"],
        )
    else:
        path = Path(resolved["dataset.path"])
        if not resolved["dataset.path"]:
            raise ConfigError("dataset.path is required for non-synthetic datasets")
        root = os.environ.get(DATA_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        dataset = load_dataset(path, kind, resolved["dataset.min_per_category"])
    return split_categories(
        dataset,
        resolved["dataset.split.train"],
        resolved["dataset.split.val"],
        resolved["dataset.split.test"],
        seed=derive_seed(seed, "split"),
    )


def _stage1_config(resolved: dict) -> StageOneConfig:
    return StageOneConfig(
        batch_size=resolved["stage1.batch_size"],
        epochs=resolved["stage1.epochs"],
        lr_init=resolved["stage1.lr_init"],
        poly_power=resolved["stage1.poly_power"],
        weight_decay=resolved["stage1.weight_decay"],
        momentum=resolved["stage1.momentum"],
        seed=derive_seed(resolved["seed"], "stage1"),
    )


def _stage2_config(resolved: dict) -> StageTwoConfig:
    return StageTwoConfig(
        lr2=resolved["stage2.lr"],
        epochs=resolved["stage2.epochs"],
        episodes_per_epoch=resolved["stage2.episodes_per_epoch"],
        gamma=resolved["stage2.gamma"],
        temperature=resolved["stage2.temperature"],
        lr_decay_factor=resolved["stage2.lr_decay_factor"],
        decay_start_epoch=resolved["stage2.decay_start_epoch"],
        ablation=resolved["stage2.ablation"],
        student_init=resolved["stage2.student_init"],
        seed=derive_seed(resolved["seed"], "stage2"),
        way=resolved["stage2.way"],
        shot=resolved["stage2.shot"],
        queries_per_class=resolved["stage2.queries_per_class"],
        val_episodes=resolved["stage2.val_episodes"],
        momentum=resolved["stage2.momentum"],
        weight_decay=resolved["stage2.weight_decay"],
    )


def run_pretrain(config_values: dict | None = None) -> dict:
    resolved, run_dir = prepare_run(config_values, "pretrain")
    dataset = build_dataset(resolved)
    stage1 = _stage1_config(resolved)
    encoder = build_encoder(
        resolved["model.architecture"],
        dataset.image_shape,
        seed=stage1.seed,
        pooling=resolved["model.pooling"],
    )
    n_train_cats = len(dataset.categories_in_split("train"))
    category_head, rotation_head = build_heads(encoder.embed_dim, n_train_cats, seed=stage1.seed)
    metrics = JsonlWriter(run_dir / "stage1.jsonl")
    try:
        result = train_global(
            dataset,
            encoder,
            category_head,
            rotation_head,
            stage1,
            metrics=metrics,
            checkpoint_path=run_dir / "stage1.npz",
        )
    finally:
        metrics.close()
    return {
        "run_dir": str(run_dir),
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(run_dir / "stage1.jsonl"),
        "epochs": stage1.epochs,
        "final_l_c": result.history[-1].l_c,
        "final_l_r": result.history[-1].l_r,
        "final_train_accuracy": result.train_accuracy[-1],
    }


def run_distill(config_values: dict | None, teacher_checkpoint: str) -> dict:
    resolved, run_dir = prepare_run(config_values, "distill")
    dataset = build_dataset(resolved)
    stage2 = _stage2_config(resolved)
    teacher = load_checkpoint(teacher_checkpoint)
    student = build_encoder(
        resolved["model.architecture"],
        dataset.image_shape,
        seed=stage2.seed,
        pooling=resolved["model.pooling"],
    )
    student_source = None
    if resolved["stage2.student_checkpoint"]:
        student_source = load_checkpoint(resolved["stage2.student_checkpoint"])
    metrics = JsonlWriter(run_dir / "stage2.jsonl")
    try:
        result = train_meta(
            teacher,
            student,
            dataset,
            stage2,
            metrics=metrics,
            checkpoint_path=run_dir / "stage2.npz",
            student_source=student_source,
        )
    finally:
        metrics.close()
    return {
        "run_dir": str(run_dir),
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(run_dir / "stage2.jsonl"),
        "epochs": stage2.epochs,
        "ablation": stage2.ablation,
        "best_val_accuracy": result.best_val_accuracy,
        "best_epoch": result.best_epoch,
    }


def run_eval(config_values: dict | None, student_checkpoint: str) -> dict:
    resolved, run_dir = prepare_run(config_values, "eval")
    dataset = build_dataset(resolved)
    student = load_checkpoint(student_checkpoint).encoder
    result = evaluate(
        student,
        dataset,
        resolved["eval.split"],
        resolved["eval.way"],
        resolved["eval.shot"],
        resolved["eval.queries_per_class"],
        resolved["eval.episodes"],
        seed=derive_seed(resolved["seed"], "eval"),
    )
    result_path = run_dir / "eval_result.json"
    result_path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return {
        "run_dir": str(run_dir),
        "result_path": str(result_path),
        **result.to_dict(),
    }


def run_export(
    config_values: dict | None,
    student_checkpoint: str,
    out_path: str | None = None,
    n_samples: int | None = None,
) -> dict:
    resolved, run_dir = prepare_run(config_values, "export")
    dataset = build_dataset(resolved)
    student = load_checkpoint(student_checkpoint).encoder
    n = n_samples if n_samples is not None else resolved["export.n_samples"]
    path = Path(out_path) if out_path else run_dir / "embeddings.bin"
    export_embeddings(student, dataset, resolved["export.split"], n, path)
    return {
        "run_dir": str(run_dir),
        "path": str(path),
        "count": n,
        "dim": int(student.embed_dim),
    }


def run_ablate(
    config_values: dict | None, teacher_checkpoint: str, modes: list[str]
) -> dict:
    resolved, run_dir = prepare_run(config_values, "ablate")
    dataset = build_dataset(resolved)
    stage2 = _stage2_config(resolved)
    metrics = JsonlWriter(run_dir / "ablate.jsonl")
    try:
        rows = ablation_table(
            teacher_checkpoint,
            dataset,
            modes,
            stage2,
            split=resolved["eval.split"],
            c=resolved["eval.way"],
            k=resolved["eval.shot"],
            q_per_class=resolved["eval.queries_per_class"],
            n_episodes=resolved["eval.episodes"],
            eval_seed=derive_seed(resolved["seed"], "eval"),
            metrics=metrics,
        )
    finally:
        metrics.close()
    table = [
        {"mode": row.mode, **row.result.to_dict()}
        for row in rows
    ]
    table_path = run_dir / "ablation_table.json"
    table_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return {"run_dir": str(run_dir), "table_path": str(table_path), "rows": table}
