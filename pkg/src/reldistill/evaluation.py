"""Inductive episodic evaluation and embedding export.

Queries are classified one at a time: each query image gets its own forward
pass and its score row depends only on that query and the support set, so
adding or removing other queries cannot change a prediction.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .encoders import embed_images, load_checkpoint, state_hash
from .episodes import Episode, episode_stream
from .errors import ConfigError, DataError
from .relatedness import class_scores, relatedness

_EMB_HEADER = struct.Struct("<2I")  # u32 count, u32 dim; then f32 rows, then i32 labels


@dataclass
class EvalResult:
    n_episodes: int
    per_episode_accuracy: np.ndarray
    mean_accuracy: float
    ci95_halfwidth: float
    config_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "config_fingerprint": self.config_fingerprint,
        }


def summarize_accuracies(accuracies: np.ndarray, fingerprint: str = "") -> EvalResult:
    """Mean accuracy with a 95% interval half-width 1.96 * sample std / sqrt(n)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    n = len(acc)
    if n == 0:
        raise ConfigError("cannot summarize zero episodes")
    ci = 1.96 * float(np.std(acc, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return EvalResult(
        n_episodes=n,
        per_episode_accuracy=acc,
        mean_accuracy=float(np.mean(acc)),
        ci95_halfwidth=ci,
        config_fingerprint=fingerprint,
    )


def classify_queries(student: nn.Module, episode: Episode) -> np.ndarray:
    """Predict an episode-local label for every query.

    Argmax of the relatedness-weighted class scores; ties break toward the
    lowest class index. Each query is embedded independently.
    """
    support_emb = embed_images(student, episode.support_images)
    query_emb = embed_images(student, episode.query_images, per_sample=True)
    matrix = relatedness(support_emb, query_emb, source="student")
    scores = class_scores(matrix, torch.from_numpy(episode.support_labels), episode.n_way)
    return np.argmax(scores.scores.numpy(), axis=1).astype(np.int64)


def episode_accuracy(student: nn.Module, episode: Episode) -> float:
    predictions = classify_queries(student, episode)
    return float(np.mean(predictions == episode.query_labels))


def evaluate(
    student: nn.Module,
    dataset: Dataset,
    split: str,
    c: int,
    k: int,
    q_per_class: int,
    n_episodes: int,
    seed: int,
) -> EvalResult:
    """Mean episodic accuracy with 95% interval over n_episodes fresh episodes."""
    fingerprint = hashlib.sha256(
        json.dumps(
            {
                "split": split,
                "c": c,
                "k": k,
                "q_per_class": q_per_class,
                "n_episodes": n_episodes,
                "seed": seed,
                "architecture": student.architecture,
                "pooling": student.pooling,
                "state": state_hash(student),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()[:16]
    accuracies = [
        episode_accuracy(student, episode)
        for episode in episode_stream(dataset, split, c, k, q_per_class, n_episodes, seed)
    ]
    return summarize_accuracies(np.asarray(accuracies), fingerprint)


@dataclass
class AblationRow:
    mode: str
    result: EvalResult


ABLATION_TABLE_MODES = (
    "full",
    "whole_matrix",
    "no_regularizer",
    "episodic_labels_only",
    "stage1_only",  # no stage-2 training at all: evaluate the initialized student
)


def ablation_table(
    teacher_ckpt: str | Path,
    dataset: Dataset,
    modes: list[str],
    stage2_config,
    split: str = "test",
    c: int = 5,
    k: int = 1,
    q_per_class: int = 15,
    n_episodes: int = 600,
    eval_seed: int = 0,
    metrics: Callable[[dict], None] | None = None,
) -> list[AblationRow]:
    """Train and evaluate one student per mode under a shared seed.

    All modes share the stage-2 seed, the student init, and the evaluation
    episode stream, so rows differ only in the training objective.
    """
    from .encoders import build_encoder
    from .meta_stage import train_meta

    for mode in modes:
        if mode not in ABLATION_TABLE_MODES:
            raise ConfigError(
                f"unknown ablation mode {mode!r}, expected one of {ABLATION_TABLE_MODES}"
            )
    bundle = load_checkpoint(teacher_ckpt)
    rows: list[AblationRow] = []
    for mode in modes:
        if mode == "stage1_only":
            cfg = replace(stage2_config, epochs=0)
        else:
            cfg = replace(stage2_config, ablation=mode)
        student = build_encoder(
            bundle.encoder.architecture,
            bundle.encoder.input_shape,
            seed=cfg.seed,
            pooling=bundle.encoder.pooling,
        )
        tagged = (lambda rec, m=mode: metrics({**rec, "ablation": m})) if metrics else None
        train_meta(bundle, student, dataset, cfg, metrics=tagged)
        result = evaluate(student, dataset, split, c, k, q_per_class, n_episodes, seed=eval_seed)
        rows.append(AblationRow(mode=mode, result=result))
    return rows


def export_embeddings(
    student: nn.Module,
    dataset: Dataset,
    split: str,
    n_samples: int,
    out_path: str | Path,
) -> Path:
    """Write the first n_samples split embeddings plus global labels.

    Layout: little-endian u32 (count, dim), count*dim float32 embeddings,
    count int32 labels. Plotting (t-SNE and friends) happens elsewhere.
    """
    cats = set(dataset.categories_in_split(split))
    idx = np.flatnonzero(np.isin(dataset.labels, list(cats)))
    if len(idx) < n_samples:
        raise DataError(
            f"split {split!r} has {len(idx)} samples, requested {n_samples}"
        )
    idx = idx[:n_samples]
    embeddings = embed_images(student, dataset.images[idx]).numpy().astype("<f4")
    labels = dataset.labels[idx].astype("<i4")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(len(idx), embeddings.shape[1]))
        fh.write(np.ascontiguousarray(embeddings).tobytes())
        fh.write(np.ascontiguousarray(labels).tobytes())
    return out_path


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read back an embeddings file written by export_embeddings."""
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise DataError(f"embeddings file {path} too short for header")
    count, dim = _EMB_HEADER.unpack_from(raw)
    expected = _EMB_HEADER.size + count * dim * 4 + count * 4
    if len(raw) != expected:
        raise DataError(f"embeddings file {path} has {len(raw)} bytes, expected {expected}")
    emb = np.frombuffer(raw, "<f4", count * dim, _EMB_HEADER.size).reshape(count, dim)
    labels = np.frombuffer(raw, "<i4", count, _EMB_HEADER.size + count * dim * 4)
    return emb.astype(np.float32), labels.astype(np.int64)
