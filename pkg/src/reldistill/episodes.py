"""C-way K-shot episode sampling with disjoint support and query sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError


@dataclass
class Episode:
    support_images: np.ndarray  # C*K x H x W x C
    support_labels: np.ndarray  # episode-local labels in [0, C)
    query_images: np.ndarray  # C*q x H x W x C
    query_labels: np.ndarray  # episode-local labels, hidden from inference
    category_map: np.ndarray  # local label -> global category id
    support_indices: np.ndarray  # dataset row indices, for disjointness checks
    query_indices: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.category_map)


def sample_episode(
    dataset: Dataset,
    split: str,
    c: int,
    k: int,
    q_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode: c categories, k support and q query samples each.

    Support and query instances come from a single draw without replacement,
    so they are disjoint. Episode-local labels follow sorted global category
    order, which keeps fixtures deterministic.
    """
    if c < 1 or k < 1 or q_per_class < 1:
        raise ConfigError(f"c, k, q_per_class must be >= 1, got {(c, k, q_per_class)}")
    categories = dataset.categories_in_split(split)
    if len(categories) < c:
        raise DataError(
            f"split {split!r} has {len(categories)} categories, need {c}"
        )
    chosen = np.sort(rng.choice(np.asarray(categories), size=c, replace=False))

    support_idx: list[np.ndarray] = []
    query_idx: list[np.ndarray] = []
    for cat in chosen.tolist():
        pool = dataset.indices_of(cat)
        if len(pool) < k + q_per_class:
            raise DataError(
                f"category id {cat} has {len(pool)} images, need {k + q_per_class}"
            )
        picked = rng.choice(pool, size=k + q_per_class, replace=False)
        support_idx.append(picked[:k])
        query_idx.append(picked[k:])

    sup = np.concatenate(support_idx)
    qry = np.concatenate(query_idx)
    return Episode(
        support_images=dataset.images[sup],
        support_labels=np.repeat(np.arange(c, dtype=np.int64), k),
        query_images=dataset.images[qry],
        query_labels=np.repeat(np.arange(c, dtype=np.int64), q_per_class),
        category_map=chosen.astype(np.int64),
        support_indices=sup,
        query_indices=qry,
    )


def episode_stream(
    dataset: Dataset,
    split: str,
    c: int,
    k: int,
    q_per_class: int,
    n_episodes: int,
    seed: int,
) -> Iterator[Episode]:
    """Yield a deterministic sequence of independent episodes.

    Episode i draws from its own generator derived from (seed, i), so a
    parallel consumer fanning out over episode indices sees the same
    episodes as a serial one.
    """
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    for child in children:
        yield sample_episode(dataset, split, c, k, q_per_class, np.random.default_rng(child))
