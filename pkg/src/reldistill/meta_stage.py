"""Stage 2: episodic training of the meta learner against a frozen teacher.

Per episode both learners embed the support and query sets; the teacher's
relatedness matrix is decoupled into per-support distributions and distilled
into the student row by row, with the relatedness-weighted episode-label
cross-entropy as a regularizer. Only student parameters are updated.

Ablation modes:
  full                  decoupled distillation + gamma * regularizer
  whole_matrix          distill the relatedness as one flattened distribution
  no_regularizer        distillation only (gamma forced to 0)
  episodic_labels_only  skip distillation, train on the regularizer alone
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .encoders import CheckpointBundle, image_batch, load_checkpoint, save_checkpoint
from .episodes import Episode, episode_stream
from .errors import ConfigError, DivergenceError
from .evaluation import evaluate
from .relatedness import (
    class_scores,
    combined_meta_loss,
    decouple,
    kl_distill_loss,
    regularizer_loss,
    relatedness,
    whole_matrix_distill_loss,
)

ABLATIONS = ("full", "whole_matrix", "no_regularizer", "episodic_labels_only")
STUDENT_INITS = ("from_stage1", "random")

MetricsSink = Callable[[dict], None]

# spawn keys for deriving independent substreams from the stage-2 seed
_TRAIN_STREAM_KEY = 0
_VAL_STREAM_KEY = 1


@dataclass
class StageTwoConfig:
    lr2: float = 1e-3
    epochs: int = 15
    episodes_per_epoch: int = 100
    gamma: float = 0.2
    temperature: float = 4.0
    lr_decay_factor: float = 0.1
    decay_start_epoch: int = -1  # -1 means epochs - 5
    ablation: str = "full"
    student_init: str = "from_stage1"
    seed: int = 0
    way: int = 5
    shot: int = 1
    queries_per_class: int = 15
    val_episodes: int = 50
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def validate(self) -> None:
        if self.lr2 < 0:
            raise ConfigError(f"lr2 must be >= 0, got {self.lr2}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.student_init not in STUDENT_INITS:
            raise ConfigError(
                f"unknown student_init {self.student_init!r}, expected one of {STUDENT_INITS}"
            )

    def lr_at(self, epoch: int) -> float:
        start = self.decay_start_epoch if self.decay_start_epoch >= 0 else max(self.epochs - 5, 0)
        return self.lr2 * self.lr_decay_factor if epoch >= start else self.lr2


@dataclass
class MetaLossReport:
    l_kl: float
    l_rt: float
    total: float
    episode: int


@dataclass
class StageTwoResult:
    history: list[MetaLossReport] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    checkpoint_path: Path | None = None


def episode_losses(
    teacher: nn.Module, student: nn.Module, episode: Episode, config: StageTwoConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Distillation and regularizer losses for one episode.

    Teacher embeddings are computed in eval mode under no_grad, so the
    teacher is a constant of the optimization.
    """
    dtype = next(student.parameters()).dtype
    support = image_batch(episode.support_images, dtype)
    query = image_batch(episode.query_images, dtype)

    teacher_was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            t_support = teacher(support.to(next(teacher.parameters()).dtype))
            t_query = teacher(query.to(next(teacher.parameters()).dtype))
    finally:
        teacher.train(teacher_was_training)

    s_support = student(support)
    s_query = student(query)
    student_matrix = relatedness(s_support, s_query, source="student")

    if config.ablation == "episodic_labels_only":
        l_kl = torch.zeros((), dtype=dtype)
    elif config.ablation == "whole_matrix":
        teacher_matrix = relatedness(t_support, t_query, source="teacher")
        l_kl = whole_matrix_distill_loss(teacher_matrix, student_matrix, config.temperature)
    else:
        teacher_matrix = relatedness(t_support, t_query, source="teacher")
        l_kl = kl_distill_loss(
            decouple(teacher_matrix, config.temperature),
            decouple(student_matrix, config.temperature),
        )

    scores = class_scores(
        student_matrix, torch.from_numpy(episode.support_labels), episode.n_way
    )
    l_rt = regularizer_loss(scores, torch.from_numpy(episode.query_labels))
    return l_kl, l_rt


def _objective(l_kl: torch.Tensor, l_rt: torch.Tensor, config: StageTwoConfig) -> torch.Tensor:
    if config.ablation == "episodic_labels_only":
        return l_rt
    gamma = 0.0 if config.ablation == "no_regularizer" else config.gamma
    return combined_meta_loss(l_kl, l_rt, gamma)


def distill_step(
    teacher: nn.Module,
    student: nn.Module,
    episode: Episode,
    config: StageTwoConfig,
    optimizer: torch.optim.Optimizer | None = None,
) -> MetaLossReport:
    """One SGD step on the student; the teacher is untouched."""
    config.validate()
    if optimizer is None:
        optimizer = torch.optim.SGD(
            student.parameters(),
            lr=config.lr2,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
    l_kl, l_rt = episode_losses(teacher, student, episode, config)
    total = _objective(l_kl, l_rt, config)
    if not torch.isfinite(total):
        raise DivergenceError("non-finite stage-2 loss")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return MetaLossReport(l_kl.item(), l_rt.item(), total.item(), episode=-1)


def _resolve_teacher(teacher: nn.Module | CheckpointBundle | str | Path) -> nn.Module:
    if isinstance(teacher, (str, Path)):
        teacher = load_checkpoint(teacher)
    if isinstance(teacher, CheckpointBundle):
        teacher = teacher.encoder
    return teacher


def _init_student(
    student: nn.Module, teacher: nn.Module, config: StageTwoConfig,
    student_source: CheckpointBundle | None,
) -> None:
    if config.student_init == "random":
        return
    if student_source is not None:
        source_state = student_source.encoder.state_dict()
    elif student.architecture == teacher.architecture:
        source_state = teacher.state_dict()
    else:
        raise ConfigError(
            "student_init='from_stage1' with mismatched architectures "
            f"({student.architecture} vs teacher {teacher.architecture}) needs an "
            "explicit stage-1 student checkpoint"
        )
    try:
        student.load_state_dict(source_state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"stage-1 state does not fit the student: {exc}") from exc


def train_meta(
    teacher: nn.Module | CheckpointBundle | str | Path,
    student: nn.Module,
    dataset: Dataset,
    config: StageTwoConfig,
    metrics: MetricsSink | None = None,
    checkpoint_path: str | Path | None = None,
    student_source: CheckpointBundle | None = None,
) -> StageTwoResult:
    """Run the full episodic distillation schedule.

    The learning rate drops by lr_decay_factor from decay_start_epoch on
    (by default the last five epochs). After each epoch the student is
    scored on validation episodes when the val split supports them; the
    best-on-validation parameters are what ends up in the checkpoint.
    """
    config.validate()
    teacher = _resolve_teacher(teacher)
    teacher.eval()
    teacher.requires_grad_(False)
    _init_student(student, teacher, config, student_source)

    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=config.lr2,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    result = StageTwoResult()
    seed_root = np.random.SeedSequence(config.seed)
    train_seed, val_seed = (int(s.generate_state(1)[0]) for s in seed_root.spawn(2))

    val_cats = dataset.categories_in_split("val")
    can_validate = config.val_episodes > 0 and len(val_cats) >= config.way and all(
        len(dataset.indices_of(c)) >= config.shot + config.queries_per_class
        for c in val_cats
    )

    total_episodes = config.epochs * config.episodes_per_epoch
    stream = (
        episode_stream(
            dataset,
            "train",
            config.way,
            config.shot,
            config.queries_per_class,
            total_episodes,
            seed=train_seed,
        )
        if total_episodes
        else iter(())
    )

    last_good = {k: v.detach().clone() for k, v in student.state_dict().items()}
    best_state: dict | None = None
    episode_index = 0
    for epoch in range(config.epochs):
        student.train()
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_kl = epoch_rt = epoch_total = 0.0
        for _ in range(config.episodes_per_epoch):
            episode = next(stream)
            l_kl, l_rt = episode_losses(teacher, student, episode, config)
            total = _objective(l_kl, l_rt, config)
            if not torch.isfinite(total):
                student.load_state_dict(last_good)
                if checkpoint_path is not None:
                    result.checkpoint_path = _write_checkpoint(
                        checkpoint_path, student, config, result
                    )
                raise DivergenceError(f"non-finite stage-2 loss at episode {episode_index}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            last_good = {k: v.detach().clone() for k, v in student.state_dict().items()}

            report = MetaLossReport(l_kl.item(), l_rt.item(), total.item(), episode_index)
            result.history.append(report)
            if metrics is not None:
                metrics(
                    {
                        "stage": 2,
                        "epoch": epoch,
                        "episode": episode_index,
                        "l_kl": report.l_kl,
                        "l_rt": report.l_rt,
                        "total": report.total,
                        "lr": lr,
                    }
                )
            epoch_kl += report.l_kl
            epoch_rt += report.l_rt
            epoch_total += report.total
            episode_index += 1

        epoch_record = {
            "stage": 2,
            "epoch": epoch,
            "episode": episode_index - 1,
            "l_kl": epoch_kl / config.episodes_per_epoch,
            "l_rt": epoch_rt / config.episodes_per_epoch,
            "total": epoch_total / config.episodes_per_epoch,
            "lr": lr,
        }
        if can_validate:
            val = evaluate(
                student,
                dataset,
                "val",
                config.way,
                config.shot,
                config.queries_per_class,
                config.val_episodes,
                seed=val_seed,
            )
            result.val_accuracy.append(val.mean_accuracy)
            epoch_record["val_acc"] = val.mean_accuracy
            if result.best_val_accuracy is None or val.mean_accuracy > result.best_val_accuracy:
                result.best_val_accuracy = val.mean_accuracy
                result.best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in student.state_dict().items()}
        if metrics is not None:
            metrics(epoch_record)

    if best_state is not None:
        student.load_state_dict(best_state)
    if checkpoint_path is not None:
        result.checkpoint_path = _write_checkpoint(checkpoint_path, student, config, result)
    return result


def _write_checkpoint(
    path: str | Path, student: nn.Module, config: StageTwoConfig, result: StageTwoResult
) -> Path:
    return save_checkpoint(
        path,
        student,
        stage=2,
        extra={
            "ablation": config.ablation,
            "stage2_seed": config.seed,
            "best_val_accuracy": result.best_val_accuracy,
            "best_epoch": result.best_epoch,
        },
    )
