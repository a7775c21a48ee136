"""Independent brute-force reference implementations.

Everything here is scalar loops over python floats (float64), deliberately
ignorant of the vectorized code paths it checks. No torch.
"""

from __future__ import annotations

import math

import numpy as np


def cosine_matrix_ref(support: np.ndarray, query: np.ndarray) -> np.ndarray:
    n_s, d = support.shape
    n_q = query.shape[0]
    out = np.zeros((n_s, n_q))
    for i in range(n_s):
        for j in range(n_q):
            dot = sum(float(support[i, t]) * float(query[j, t]) for t in range(d))
            ns = math.sqrt(sum(float(support[i, t]) ** 2 for t in range(d)))
            nq = math.sqrt(sum(float(query[j, t]) ** 2 for t in range(d)))
            out[i, j] = dot / (ns * nq)
    return out


def decouple_ref(matrix: np.ndarray, temperature: float) -> np.ndarray:
    n_s, n_q = matrix.shape
    out = np.zeros((n_s, n_q))
    for i in range(n_s):
        exps = [math.exp(float(matrix[i, j]) / temperature) for j in range(n_q)]
        denom = sum(exps)
        for j in range(n_q):
            out[i, j] = exps[j] / denom
    return out


def kl_sum_ref(teacher_groups: np.ndarray, student_groups: np.ndarray) -> float:
    total = 0.0
    for i in range(teacher_groups.shape[0]):
        for j in range(teacher_groups.shape[1]):
            p = float(teacher_groups[i, j])
            q = float(student_groups[i, j])
            total += p * math.log(p / q)
    return total


def whole_matrix_kl_ref(
    teacher_matrix: np.ndarray, student_matrix: np.ndarray, temperature: float
) -> float:
    p_flat = [math.exp(float(v) / temperature) for v in teacher_matrix.flatten()]
    q_flat = [math.exp(float(v) / temperature) for v in student_matrix.flatten()]
    p_sum, q_sum = sum(p_flat), sum(q_flat)
    total = 0.0
    for p_raw, q_raw in zip(p_flat, q_flat):
        p, q = p_raw / p_sum, q_raw / q_sum
        total += p * math.log(p / q)
    return total


def class_scores_ref(matrix: np.ndarray, support_labels: np.ndarray, c: int) -> np.ndarray:
    n_s, n_q = matrix.shape
    out = np.zeros((n_q, c))
    for q in range(n_q):
        raw = [0.0] * c
        for i in range(n_s):
            raw[int(support_labels[i])] += float(matrix[i, q])
        exps = [math.exp(v) for v in raw]
        denom = sum(exps)
        for j in range(c):
            out[q, j] = exps[j] / denom
    return out


def class_raw_sums_ref(matrix: np.ndarray, support_labels: np.ndarray, c: int) -> np.ndarray:
    n_s, n_q = matrix.shape
    out = np.zeros((n_q, c))
    for q in range(n_q):
        for i in range(n_s):
            out[q, int(support_labels[i])] += float(matrix[i, q])
    return out


def regularizer_ref(scores: np.ndarray, query_labels: np.ndarray) -> float:
    n_q = scores.shape[0]
    total = 0.0
    for q in range(n_q):
        total += -math.log(float(scores[q, int(query_labels[q])]))
    return total / n_q


def cross_entropy_ref(logits: np.ndarray, labels: np.ndarray) -> float:
    n, c = logits.shape
    total = 0.0
    for i in range(n):
        exps = [math.exp(float(logits[i, j])) for j in range(c)]
        total += -math.log(exps[int(labels[i])] / sum(exps))
    return total / n


def rotate90_ccw_ref(image: np.ndarray) -> np.ndarray:
    """Index-mapping oracle: pixel (r, c) of an H x W image lands at (W-1-c, r)."""
    h, w = image.shape[:2]
    out = np.zeros((w, h) + image.shape[2:], dtype=image.dtype)
    for r in range(h):
        for c in range(w):
            out[w - 1 - c, r] = image[r, c]
    return out
