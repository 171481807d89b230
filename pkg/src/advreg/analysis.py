"""Per-type scoring, the weighted difference metric, blind-predictor oracle, correlation."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ANSWER_TYPES, ChangingPriorsSpec, DatasetBundle, Split
from .model import ModelConfig, ModelParams, predict_answers, predict_question_only
from .schedule import ScheduleParams
from .objective import NUM_ANNOTATORS, batch_vqa_scores


class DataError(ValueError):
    pass


class UndefinedError(ArithmeticError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


@dataclass(frozen=True)
class TypeScore:
    question_type_id: int
    answer_type: str
    n_examples: int
    score: float


def example_scores(params: ModelParams, split: Split) -> np.ndarray:
    """VQA score of the base model's argmax answer for every example."""
    preds = predict_answers(params, split.images, split.bags)
    return batch_vqa_scores(preds, split.annotators)


def score_by_type(params: ModelParams, split: Split, scores: np.ndarray | None = None) -> list[TypeScore]:
    if len(split) == 0:
        raise DataError("cannot score an empty split")
    if scores is None:
        scores = example_scores(params, split)
    out = []
    for t, answer_type in enumerate(split.answer_type_of):
        mask = split.type_ids == t
        n = int(mask.sum())
        out.append(TypeScore(t, answer_type, n, float(scores[mask].mean()) if n else 0.0))
    return out


def aggregate(type_scores: Sequence[TypeScore]) -> dict[str, float]:
    """Example-weighted overall and per-answer-type scores (NaN for absent types)."""
    def weighted(rows):
        n = sum(r.n_examples for r in rows)
        return sum(r.n_examples * r.score for r in rows) / n if n else float("nan")

    out = {"overall": weighted(type_scores)}
    for at in ANSWER_TYPES:
        out[at] = weighted([r for r in type_scores if r.answer_type == at])
    return out


def evaluate(params: ModelParams, split: Split) -> dict[str, float]:
    return aggregate(score_by_type(params, split))


def delta_metric(n: int, score_base: float, score_reg: float) -> float:
    """Count-weighted score difference; positive when the regularized model is better."""
    return n / 100.0 * (score_reg - score_base)


def _expected_score(p_match: float) -> float:
    """E[min(K/3, 1)] for K ~ Binomial(10, p_match)."""
    n = NUM_ANNOTATORS
    return sum(
        comb(n, k) * p_match**k * (1.0 - p_match) ** (n - k) * min(k / 3.0, 1.0)
        for k in range(n + 1)
    )


def _match_prob(predicted: int, ground: int, k: int, noise: float) -> float:
    if k == 1:
        return 1.0
    return 1.0 - noise if predicted == ground else noise / (k - 1)


def _cue_likelihood(cue: int, ground: int, k: int, reliability: float) -> float:
    if k == 1:
        return 1.0
    return reliability if cue == ground else (1.0 - reliability) / (k - 1)


def blind_oracle_by_type(spec: ChangingPriorsSpec, split_prior: str = "train") -> list[float]:
    """Expected score of the best question-only predictor, per question type.

    The predictor is fitted to the train prior (and, where present, the
    answer cue token); it is evaluated on answers drawn from ``split_prior``
    ("train", "val" or "test").  Everything is enumerated exactly: ground
    answer, cue value and the binomial count of agreeing annotators.
    """
    if split_prior not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split_prior!r}")
    answer_id = {a: i for i, a in enumerate(spec.answer_vocab)}
    out = []
    for qt in spec.question_types:
        k = len(qt.candidates)
        fit = qt.train_prior
        evalp = qt.test_prior if split_prior == "test" else qt.train_prior
        has_cue = qt.answer_type in spec.cue_answer_types
        cues = range(k) if has_cue else [None]
        # candidate indices ordered by global answer id, for lowest-id tie breaking
        by_id = sorted(range(k), key=lambda i: answer_id[qt.candidates[i]])
        total = 0.0
        for cue in cues:
            def posterior(g):
                lik = 1.0 if cue is None else _cue_likelihood(cue, g, k, spec.cue_reliability)
                return fit[g] * lik

            best = max(by_id, key=lambda g: (posterior(g), -by_id.index(g)))
            for g in range(k):
                p_cue = 1.0 if cue is None else _cue_likelihood(cue, g, k, spec.cue_reliability)
                if evalp[g] == 0.0 or p_cue == 0.0:
                    continue
                total += evalp[g] * p_cue * _expected_score(_match_prob(best, g, k, spec.annotator_noise))
        out.append(total)
    return out


def blind_oracle_score(spec: ChangingPriorsSpec, split_prior: str = "train") -> float:
    """Overall expected question-only score (question types are equiprobable)."""
    per_type = blind_oracle_by_type(spec, split_prior)
    return float(sum(per_type) / len(per_type))


def pearson(xs: np.ndarray, ys: np.ndarray) -> float:
    xc, yc = xs - xs.mean(), ys - ys.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0.0:
        raise UndefinedError("correlation is undefined for zero-variance data")
    return float(xc @ yc / denom)


def correlate(xs: Sequence[float], ys: Sequence[float], n_permutations: int = 10_000,
              seed: int = 0) -> tuple[float, float]:
    """Pearson r with a two-sided permutation p-value."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("xs and ys must be equal-length 1-d sequences")
    if len(x) < 3:
        raise DataError(f"need at least 3 paired observations, got {len(x)}")
    r = pearson(x, y)
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.tile(y, (n_permutations, 1)), axis=1)
    xc = x - x.mean()
    yc = perms - perms.mean(axis=1, keepdims=True)
    r_perm = (yc @ xc) / np.sqrt((xc @ xc) * (yc * yc).sum(axis=1))
    extreme = np.count_nonzero(np.abs(r_perm) >= abs(r) - 1e-12)
    return r, (extreme + 1) / (n_permutations + 1)


def question_only_score(params: ModelParams, split: Split) -> float:
    """Mean VQA score of the question-only head (see ``trainer.train_question_only``)."""
    preds = predict_question_only(params, split.bags)
    return float(batch_vqa_scores(preds, split.annotators).mean())


SWEEP_HEADER = ("lambda_adv", "lambda_grl", "mu", "w", "c", "status", "best_iter",
                "val_overall", "test_overall", "test_yesno", "test_number", "test_other")


@dataclass(frozen=True)
class SweepRow:
    lambda_adv: float
    schedule: ScheduleParams
    status: str
    best_iter: int | None
    stopped_at: int | None
    val_overall: float
    test_overall: float
    test_yesno: float
    test_number: float
    test_other: float

    def csv_fields(self) -> list[str]:
        s = self.schedule
        lam_grl = repr(float(s.c)) if s.is_static else ""
        best = "" if self.best_iter is None else str(self.best_iter)
        scores = (self.val_overall, self.test_overall, self.test_yesno, self.test_number, self.test_other)
        return [repr(float(self.lambda_adv)), lam_grl, str(s.mu), str(s.w), repr(float(s.c)),
                self.status, best, *(repr(float(v)) for v in scores)]


@dataclass
class SweepReport:
    rows: list[SweepRow]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def completed(self) -> list[SweepRow]:
        return [r for r in self.rows if r.status == "ok"]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            for r in self.rows:
                w.writerow(r.csv_fields())
        tmp.replace(path)


def _sweep_one(args) -> SweepRow:
    from .trainer import train

    lambda_adv, schedule, base_config, model_config, bundle = args
    config = replace(base_config, lambda_adv=lambda_adv, schedule=schedule)
    log = train(model_config, config, bundle).log
    nan = float("nan")
    if log.best_iteration is None:
        val = test = None
    else:
        val = log.score_at(log.best_iteration, "val")
        test = log.score_at(log.best_iteration, "test") if "test" in config.eval_splits else None
    return SweepRow(
        lambda_adv=lambda_adv, schedule=schedule, status=log.status,
        best_iter=log.best_iteration if log.status == "ok" else log.failed_at,
        stopped_at=log.stopped_at,
        val_overall=nan if val is None else val.overall,
        test_overall=nan if test is None else test.overall,
        test_yesno=nan if test is None else test.yesno,
        test_number=nan if test is None else test.number,
        test_other=nan if test is None else test.other,
    )


def run_sweep(grid: Sequence[tuple[float, ScheduleParams]], base_config, model_config: ModelConfig,
              bundle: DatasetBundle, jobs: int = 1) -> SweepReport:
    """Train one run per grid entry and collect scores at each run's best-val checkpoint.

    Runs are independent and share ``base_config.seed``; with ``jobs > 1``
    they execute in worker processes.  Rows follow grid order regardless of
    completion order.  Diverged runs are kept with ``status="diverged"`` and
    their failure iteration in ``best_iter``.
    """
    tasks = [(float(lam), sched, base_config, model_config, bundle) for lam, sched in grid]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    return SweepReport(rows)


def lambda_grid(lambda_advs: Sequence[float] = (0.001, 0.005, 0.01, 0.1, 1.0),
                lambda_grls: Sequence[float] = (0.1, 1.0)) -> list[tuple[float, ScheduleParams]]:
    """Static-weight grid, lambda_adv major."""
    return [(a, ScheduleParams(0, 1, float(g))) for a in lambda_advs for g in lambda_grls]

