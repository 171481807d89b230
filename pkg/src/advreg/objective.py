"""Soft-target cross entropy, the combined min-max loss, and VQA accuracy."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, Tensor

NUM_ANNOTATORS = 10


class DataError(ValueError):
    """Malformed targets or annotations."""


@dataclass(frozen=True)
class LossBreakdown:
    l_vqa: float
    l_adv: float
    l_total: float
    lambda_adv: float


def soft_cross_entropy(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of ``-sum_i a_i * log p_i`` for soft targets ``a`` in [0, 1]."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != log_probs.shape:
        raise ad.DimensionError(f"targets {targets.shape} do not match log-probs {log_probs.shape}")
    if np.any(targets < 0.0) or np.any(targets > 1.0):
        raise DataError("soft targets must lie in [0, 1]")
    weights = log_probs.tape.leaf(-targets / targets.shape[0])
    return ad.total(ad.mul(weights, log_probs))


def total_loss(l_vqa: Tensor, l_adv: Tensor, lambda_adv: float) -> Tensor:
    """``l_vqa - lambda_adv * l_adv`` as a tape node."""
    if not lambda_adv >= 0:
        raise ParameterError(f"lambda_adv must be >= 0, got {lambda_adv}")
    return ad.sub(l_vqa, ad.scale(l_adv, lambda_adv))


def annotator_soft_targets(annotator_answers: Sequence[int], vocab_size: int) -> np.ndarray:
    if len(annotator_answers) != NUM_ANNOTATORS:
        raise DataError(f"expected {NUM_ANNOTATORS} annotator answers, got {len(annotator_answers)}")
    target = np.zeros(vocab_size)
    for answer, k in Counter(annotator_answers).items():
        if not 0 <= answer < vocab_size:
            raise DataError(f"answer id {answer} outside vocabulary of size {vocab_size}")
        target[answer] = min(k / 3.0, 1.0)
    return target


def vqa_score(predicted_answer: int, annotator_answers: Sequence[int]) -> float:
    matches = sum(1 for a in annotator_answers if a == predicted_answer)
    return min(matches / 3.0, 1.0)


def batch_vqa_scores(predictions: np.ndarray, annotators: np.ndarray) -> np.ndarray:
    """Vectorised :func:`vqa_score` over a batch (``annotators`` is B x 10)."""
    matches = (annotators == np.asarray(predictions)[:, None]).sum(axis=1)
    return np.minimum(matches / 3.0, 1.0)


def argmax_answers(log_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest answer id on ties
    return np.argmax(log_probs, axis=1)
