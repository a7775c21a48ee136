"""Stage 1: train the global learner on the whole train split.

Joint objective: category cross-entropy over all rotated samples plus the
rotation-prediction cross-entropy, optimized with SGD under a polynomial
learning-rate decay. Both losses use the negative-log-likelihood sign, so
minimizing them maximizes the printed-formula objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, augment_rotations
from .encoders import image_batch, save_checkpoint
from .errors import ConfigError, DataError, DivergenceError

MetricsSink = Callable[[dict], None]


@dataclass
class StageOneConfig:
    batch_size: int = 64
    epochs: int = 90
    lr_init: float = 5e-2  # the update-rule default; 1e-1 is the alternate preset
    poly_power: float = 0.9
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.lr_init < 0:
            raise ConfigError(f"lr_init must be >= 0, got {self.lr_init}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.poly_power < 0:
            raise ConfigError(f"poly_power must be >= 0, got {self.poly_power}")


@dataclass
class LossReport:
    l_c: float
    l_r: float
    total: float
    iteration: int


@dataclass
class StageOneResult:
    history: list[LossReport] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    train_categories: list[int] = field(default_factory=list)
    checkpoint_path: Path | None = None


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")


def category_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true category."""
    if not torch.isfinite(logits).all():
        raise DivergenceError("non-finite category logits")
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels)


def rotation_loss(rotation_logits: torch.Tensor, rotation_labels: torch.Tensor) -> torch.Tensor:
    """Same as category_loss with the four rotation classes."""
    if rotation_logits.shape[1] != 4:
        raise ConfigError(f"rotation logits must have 4 columns, got {rotation_logits.shape[1]}")
    return category_loss(rotation_logits, rotation_labels)


def poly_lr(lr_init: float, iteration: int, total_iterations: int, power: float) -> float:
    """lr_init * (1 - iter/iter_total)^power; equals lr_init exactly at iter 0."""
    if iteration == 0:
        return lr_init
    return lr_init * (1.0 - iteration / total_iterations) ** power


def _clone_state(modules: dict[str, nn.Module]) -> dict[str, dict]:
    return {
        name: {k: v.detach().clone() for k, v in m.state_dict().items()}
        for name, m in modules.items()
    }


def _restore_state(modules: dict[str, nn.Module], snapshot: dict[str, dict]) -> None:
    for name, m in modules.items():
        m.load_state_dict(snapshot[name])


def train_global(
    dataset: Dataset,
    encoder: nn.Module,
    category_head: nn.Linear,
    rotation_head: nn.Linear,
    config: StageOneConfig,
    metrics: MetricsSink | None = None,
    checkpoint_path: str | Path | None = None,
) -> StageOneResult:
    """Jointly train encoder and both heads on the train split.

    Every mini-batch is expanded with its three rotations before the forward
    pass; the category head sees remapped train-category labels, and the
    rotation head predicts the rotation from the category logits. On a
    non-finite loss the step is not applied, the last good parameters are
    written to the checkpoint path, and DivergenceError is raised.
    """
    config.validate()
    train_cats = dataset.categories_in_split("train")
    if not train_cats:
        raise DataError("train split has no categories")
    if category_head.out_features != len(train_cats):
        raise ConfigError(
            f"category head has {category_head.out_features} outputs for "
            f"{len(train_cats)} train categories"
        )
    label_map = {cat: i for i, cat in enumerate(train_cats)}
    train_idx = np.flatnonzero(np.isin(dataset.labels, train_cats))
    mapped_labels = np.array([label_map[int(l)] for l in dataset.labels[train_idx]])

    modules = {"encoder": encoder, "category_head": category_head, "rotation_head": rotation_head}
    for m in modules.values():
        m.train()
    dtype = next(encoder.parameters()).dtype
    optimizer = torch.optim.SGD(
        [p for m in modules.values() for p in m.parameters()],
        lr=config.lr_init,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    rng = np.random.default_rng(config.seed)
    iters_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    total_iters = config.epochs * iters_per_epoch
    result = StageOneResult(train_categories=train_cats)
    last_good = _clone_state(modules)
    iteration = 0

    def _abort() -> None:
        _restore_state(modules, last_good)
        if checkpoint_path is not None:
            result.checkpoint_path = _write_checkpoint(
                checkpoint_path, encoder, category_head, rotation_head, train_cats, config
            )
        raise DivergenceError(f"non-finite stage-1 loss at iteration {iteration}")

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_idx))
        epoch_l_c = epoch_l_r = 0.0
        correct = seen = 0
        last_lr = config.lr_init
        for start in range(0, len(order), config.batch_size):
            batch = train_idx[order[start : start + config.batch_size]]
            rotated = augment_rotations(dataset.images[batch], mapped_labels[order[start : start + config.batch_size]])
            images = image_batch(rotated.images, dtype)
            cat_labels = torch.from_numpy(rotated.category_labels)
            rot_labels = torch.from_numpy(rotated.rotation_labels)

            lr = poly_lr(config.lr_init, iteration, total_iters, config.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            last_lr = lr

            features = encoder(images)
            cat_logits = category_head(features)
            rot_logits = rotation_head(cat_logits)
            try:
                l_c = category_loss(cat_logits, cat_labels)
                l_r = rotation_loss(rot_logits, rot_labels)
            except DivergenceError:
                _abort()
            total = l_c + l_r
            if not torch.isfinite(total):
                _abort()

            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            last_good = _clone_state(modules)

            report = LossReport(l_c.item(), l_r.item(), total.item(), iteration)
            result.history.append(report)
            if metrics is not None:
                metrics(
                    {
                        "stage": 1,
                        "epoch": epoch,
                        "iter": iteration,
                        "l_c": report.l_c,
                        "l_r": report.l_r,
                        "lr": lr,
                    }
                )
            epoch_l_c += report.l_c
            epoch_l_r += report.l_r
            correct += int((cat_logits.argmax(dim=1) == cat_labels).sum())
            seen += len(cat_labels)
            iteration += 1

        acc = correct / seen if seen else 0.0
        result.train_accuracy.append(acc)
        if metrics is not None:
            n_batches = iters_per_epoch
            metrics(
                {
                    "stage": 1,
                    "epoch": epoch,
                    "iter": iteration - 1,
                    "l_c": epoch_l_c / n_batches,
                    "l_r": epoch_l_r / n_batches,
                    "lr": last_lr,
                    "train_acc": acc,
                }
            )

    if checkpoint_path is not None:
        result.checkpoint_path = _write_checkpoint(
            checkpoint_path, encoder, category_head, rotation_head, train_cats, config
        )
    return result


def _write_checkpoint(
    path: str | Path,
    encoder: nn.Module,
    category_head: nn.Linear,
    rotation_head: nn.Linear,
    train_cats: list[int],
    config: StageOneConfig,
) -> Path:
    return save_checkpoint(
        path,
        encoder,
        heads={"category_head": category_head, "rotation_head": rotation_head},
        stage=1,
        extra={"train_categories": train_cats, "stage1_seed": config.seed},
    )
