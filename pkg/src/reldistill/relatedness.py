"""Query-support relatedness and the distillation/regularization losses.

Everything here is a pure, differentiable function of torch tensors and
works in float32 or float64. Conventions:

* relatedness R is the N_S x N_Q matrix of cosines between support and
  query embeddings; zero-norm embeddings are an error, never silently
  epsilon-patched.
* "decoupling" turns each support row of R into a temperature-softened
  distribution over queries; distilling those rows one by one keeps the
  target distributions sharp.
* the distillation loss is the SUM of per-row KL divergences
  KL(teacher || student), not the mean, so larger support sets weigh more.
* class scores follow the relatedness-weighted one-hot sum, then a softmax
  over classes so the log in the regularizer is always defined; losses use
  the negative-log-likelihood sign convention.

Teachers are constants: teacher inputs are detached, so no gradient ever
flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ZeroNormError


@dataclass
class RelatednessMatrix:
    values: torch.Tensor  # N_S x N_Q cosines in [-1, 1]
    source: str = "student"  # "teacher" or "student"

    @property
    def n_support(self) -> int:
        return self.values.shape[0]

    @property
    def n_query(self) -> int:
        return self.values.shape[1]


@dataclass
class DecoupledRelatedness:
    log_groups: torch.Tensor  # N_S x N_Q log-probabilities, one group per support row
    temperature: float

    @property
    def groups(self) -> torch.Tensor:
        return self.log_groups.exp()

    @property
    def n_groups(self) -> int:
        return self.log_groups.shape[0]


@dataclass
class ClassScores:
    log_scores: torch.Tensor  # N_Q x C log-probabilities

    @property
    def scores(self) -> torch.Tensor:
        return self.log_scores.exp()


def _check_norms(embeddings: torch.Tensor, role: str) -> torch.Tensor:
    norms = embeddings.norm(dim=1)
    zero = (norms.detach() == 0).nonzero(as_tuple=True)[0]
    if len(zero):
        raise ZeroNormError(
            f"{role} embedding {int(zero[0])} has zero norm; cosine is undefined"
        )
    return norms


def relatedness(
    support_emb: torch.Tensor, query_emb: torch.Tensor, source: str = "student"
) -> RelatednessMatrix:
    """Cosine similarity between every support and query embedding pair."""
    if support_emb.dim() != 2 or query_emb.dim() != 2:
        raise ConfigError("embeddings must be 2-d (batch x dim)")
    if support_emb.shape[1] != query_emb.shape[1]:
        raise ConfigError(
            f"embedding dims differ: {support_emb.shape[1]} vs {query_emb.shape[1]}"
        )
    s_norm = _check_norms(support_emb, "support")
    q_norm = _check_norms(query_emb, "query")
    values = (support_emb / s_norm[:, None]) @ (query_emb / q_norm[:, None]).t()
    return RelatednessMatrix(values=values, source=source)


def decouple(matrix: RelatednessMatrix, temperature: float) -> DecoupledRelatedness:
    """Per-support-row softmax over queries at the given temperature."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    log_groups = F.log_softmax(matrix.values / temperature, dim=1)
    return DecoupledRelatedness(log_groups=log_groups, temperature=float(temperature))


def kl_distill_loss(
    teacher: DecoupledRelatedness, student: DecoupledRelatedness
) -> torch.Tensor:
    """Sum over support rows of KL(teacher row || student row).

    The teacher side is detached; KL(p||q) = sum p * (log p - log q).
    """
    if teacher.log_groups.shape != student.log_groups.shape:
        raise ConfigError(
            f"group shapes differ: {tuple(teacher.log_groups.shape)} vs "
            f"{tuple(student.log_groups.shape)}"
        )
    log_p = teacher.log_groups.detach()
    return (log_p.exp() * (log_p - student.log_groups)).sum()


def whole_matrix_distill_loss(
    teacher_matrix: RelatednessMatrix,
    student_matrix: RelatednessMatrix,
    temperature: float,
) -> torch.Tensor:
    """Ablation baseline: one softmax over all N_S*N_Q entries, single KL."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if teacher_matrix.values.shape != student_matrix.values.shape:
        raise ConfigError(
            f"matrix shapes differ: {tuple(teacher_matrix.values.shape)} vs "
            f"{tuple(student_matrix.values.shape)}"
        )
    log_p = F.log_softmax(teacher_matrix.values.detach().flatten() / temperature, dim=0)
    log_q = F.log_softmax(student_matrix.values.flatten() / temperature, dim=0)
    return (log_p.exp() * (log_p - log_q)).sum()


def class_scores(
    student_matrix: RelatednessMatrix, support_labels: torch.Tensor, c: int
) -> ClassScores:
    """Relatedness-weighted class distribution per query.

    Raw score of class j for query q is the sum of R[i, q] over supports i
    labelled j; a softmax over classes turns each row into a distribution.
    """
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    if labels.numel() != student_matrix.n_support:
        raise ConfigError(
            f"{labels.numel()} support labels for {student_matrix.n_support} rows"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"support labels must lie in [0, {c})")
    one_hot = F.one_hot(labels, c).to(student_matrix.values.dtype)
    raw = student_matrix.values.t() @ one_hot  # N_Q x C
    return ClassScores(log_scores=F.log_softmax(raw, dim=1))


def regularizer_loss(scores: ClassScores, query_labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log score at the true episode label of each query."""
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    n_query, c = scores.log_scores.shape
    if labels.numel() != n_query:
        raise ConfigError(f"{labels.numel()} query labels for {n_query} score rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"query labels must lie in [0, {c})")
    picked = scores.log_scores[torch.arange(n_query), labels]
    return -picked.mean()


def combined_meta_loss(
    l_kl: torch.Tensor | float, l_rt: torch.Tensor | float, gamma: float
) -> torch.Tensor | float:
    """Distillation loss plus gamma-weighted regularizer."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    return l_kl + gamma * l_rt
