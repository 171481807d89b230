"""Co-training of the base model and the adversary.

Each step runs two backward passes over one tape: the answer loss through
the base model, then ``lambda_adv * l_adv`` through the adversary and the
gradient reversal layer.  The two gradient maps are summed on the question
encoder; the base groups and the adversary have separate Adamax optimizers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .analysis import evaluate
from .autodiff import NonFiniteError, Tape
from .dataset import DatasetBundle, Split
from .model import BASE_GROUPS, ModelConfig, ModelParams, adversary_head, encode_bag, forward, init_params
from .objective import soft_cross_entropy, total_loss
from .schedule import ScheduleParams, lambda_grl_at

STEP_HEADER = ("t", "l_vqa", "l_adv", "l_total", "lambda_grl", "gn_q_vqa", "gn_q_adv", "gn_adv")
EVAL_HEADER = ("t", "split", "overall", "yesno", "number", "other")


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"training diverged at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    lambda_adv: float = 0.0
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    batch_size: int = 512
    learning_rate: float = 0.001
    max_iterations: int = 2000
    eval_every: int = 100
    patience: float = 10
    seed: int = 0
    eval_splits: tuple[str, ...] = ("train", "val", "test")

    def __post_init__(self):
        if not self.lambda_adv >= 0:
            raise ValueError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.batch_size < 1 or self.max_iterations < 1 or self.eval_every < 1:
            raise ValueError("batch_size, max_iterations and eval_every must be positive")
        if not self.patience >= 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if "val" not in self.eval_splits:
            raise ValueError("the val split must be evaluated (it drives early stopping)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        d["eval_splits"] = list(self.eval_splits)
        if math.isinf(self.patience):
            d["patience"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = ScheduleParams.from_dict(d["schedule"])
        if d.get("patience", 0) is None:
            d["patience"] = math.inf
        if "eval_splits" in d:
            d["eval_splits"] = tuple(d["eval_splits"])
        return cls(**d)


class Adamax:
    """Adamax with a fixed learning rate; one instance per parameter set."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.u: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], iteration: int | None = None) -> None:
        """Update ``params`` in place."""
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(self.t + 1 if iteration is None else iteration, f"non-finite gradient for {key}")
        self.t += 1
        step_size = self.lr / (1.0 - self.beta1**self.t)
        for key, g in grads.items():
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(g)
                self.u[key] = np.zeros_like(g)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            u = np.maximum(self.beta2 * self.u[key], np.abs(g))
            self.u[key] = u
            params[key] -= step_size * m / (u + self.eps)


def adamax_update(param: np.ndarray, grad: np.ndarray, state: Adamax, lr: float | None = None) -> np.ndarray:
    """Single-parameter convenience wrapper around :class:`Adamax`; returns the new value."""
    if lr is not None:
        state.lr = lr
    holder = {"p": param.copy()}
    state.step(holder, {"p": grad})
    return holder["p"]


@dataclass(frozen=True)
class StepStats:
    t: int
    l_vqa: float
    l_adv: float
    l_total: float
    lambda_grl: float
    grad_norm_q_from_vqa: float
    grad_norm_q_from_adv: float
    grad_norm_adv: float

    def row(self) -> tuple:
        return tuple(asdict(self).values())


@dataclass(frozen=True)
class EvalRow:
    t: int
    split: str
    overall: float
    yesno: float
    number: float
    other: float

    def row(self) -> tuple:
        return tuple(asdict(self).values())


@dataclass
class RunLog:
    steps: list[StepStats] = field(default_factory=list)
    evals: list[EvalRow] = field(default_factory=list)
    status: str = "ok"
    failed_at: int | None = None
    best_iteration: int | None = None
    stopped_at: int | None = None

    def eval_series(self, split: str, column: str = "overall") -> tuple[np.ndarray, np.ndarray]:
        rows = [r for r in self.evals if r.split == split]
        return np.array([r.t for r in rows]), np.array([getattr(r, column) for r in rows])

    def score_at(self, t: int, split: str) -> EvalRow:
        for r in self.evals:
            if r.t == t and r.split == split:
                return r
        raise KeyError((t, split))

    def write_csv(self, out_dir: str | Path, step_name: str = "runlog.csv", eval_name: str = "eval.csv") -> None:
        out = Path(out_dir)
        _write_rows(out / step_name, STEP_HEADER, (s.row() for s in self.steps))
        _write_rows(out / eval_name, EVAL_HEADER, (e.row() for e in self.evals))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    tmp.replace(path)


class EarlyStopping:
    """Patience counter that only runs once the schedule's delay has passed.

    Improvements are tracked at every evaluation, but an evaluation only
    counts against ``patience`` when ``t > mu``; with evaluations every
    ``e`` iterations the earliest possible stop is ``mu + patience * e``.
    """

    def __init__(self, mu: int, patience: float):
        self.mu = mu
        self.patience = patience
        self.best = -math.inf
        self.stale = 0

    def update(self, t: int, score: float) -> bool:
        """Record an evaluation; return True when training should stop."""
        if score > self.best:
            self.best = score
            self.stale = 0
        elif t > self.mu:
            self.stale += 1
        return self.stale >= self.patience


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless minibatch indices, reshuffled every epoch; the ragged tail is dropped."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start:start + size]


class Trainer:
    """Holds parameters and optimizer state for one run.

    ``adversary=False`` builds the plain base-model trainer: no adversary
    forward pass, no second backward pass, no adversary optimizer.
    """

    def __init__(self, model_config: ModelConfig, config: TrainConfig, adversary: bool = True,
                 params: ModelParams | None = None):
        self.model_config = model_config
        self.config = config
        self.adversary = adversary
        self.params = init_params(model_config) if params is None else params
        self.opt_vqa = Adamax(lr=config.learning_rate)
        self.opt_adv = Adamax(lr=config.learning_rate)

    def step(self, split: Split, idx: np.ndarray, t: int) -> StepStats:
        cfg = self.config
        lam_grl = lambda_grl_at(t, cfg.schedule)
        tape = Tape()
        bound = self.params.bind(tape)
        try:
            fwd = forward(bound, tape.leaf(split.images[idx]), tape.leaf(split.bags[idx]),
                          lam_grl if self.adversary else None)
            l_vqa = soft_cross_entropy(fwd.vqa_log_probs, split.targets[idx])
            grads_vqa = dict(tape.backward(l_vqa))
            tape.zero_grad()
            if self.adversary:
                l_adv = soft_cross_entropy(fwd.adv_log_probs, split.targets[idx])
                l_tot = total_loss(l_vqa, l_adv, cfg.lambda_adv)
                grads_adv = dict(tape.backward(ad.scale(l_adv, cfg.lambda_adv)))
                l_adv_value, l_tot_value = float(l_adv.data[0]), float(l_tot.data[0])
            else:
                grads_adv = {}
                l_adv_value, l_tot_value = 0.0, float(l_vqa.data[0])
        except NonFiniteError as exc:
            raise DivergenceError(t, str(exc)) from exc

        q_params = bound["theta_q"].values()
        stats = StepStats(
            t=t,
            l_vqa=float(l_vqa.data[0]),
            l_adv=l_adv_value,
            l_total=l_tot_value,
            lambda_grl=lam_grl,
            grad_norm_q_from_vqa=ad.grad_norm(q_params, grads_vqa),
            grad_norm_q_from_adv=ad.grad_norm(q_params, grads_adv),
            grad_norm_adv=ad.grad_norm(bound["theta_adv"].values(), grads_adv),
        )

        base_params, base_grads = {}, {}
        for g in BASE_GROUPS:
            for name, leaf in bound[g].items():
                key = f"{g}/{name}"
                grad = grads_vqa.get(leaf.node_id, 0.0)
                if leaf.node_id in grads_adv:
                    grad = grad + grads_adv[leaf.node_id]
                base_params[key] = self.params[g][name]
                base_grads[key] = grad if isinstance(grad, np.ndarray) else np.zeros_like(leaf.data)
        self.opt_vqa.step(base_params, base_grads, iteration=t)
        if self.adversary:
            adv_grads = {n: grads_adv.get(leaf.node_id, np.zeros_like(leaf.data))
                         for n, leaf in bound["theta_adv"].items()}
            self.opt_adv.step(self.params["theta_adv"], adv_grads, iteration=t)
        return stats


def train_step(trainer: Trainer, split: Split, idx: np.ndarray, t: int) -> StepStats:
    return trainer.step(split, idx, t)


def _eval_rows(params: ModelParams, bundle: DatasetBundle, t: int, splits) -> list[EvalRow]:
    rows = []
    for name in splits:
        s = evaluate(params, bundle.splits()[name])
        rows.append(EvalRow(t, name, s["overall"], s["YesNo"], s["Number"], s["Other"]))
    return rows


@dataclass
class TrainResult:
    params: ModelParams
    log: RunLog
    final_params: ModelParams


def train(model_config: ModelConfig, config: TrainConfig, bundle: DatasetBundle,
          adversary: bool = True, params: ModelParams | None = None) -> TrainResult:
    """Run training with periodic evaluation and early stopping.

    Returns the best-val parameters (for delayed schedules only evaluations
    after the delay are eligible), the final parameters and the run log.
    Divergence is not raised: the log is returned with ``status="diverged"``.
    """
    trainer = Trainer(model_config, config, adversary=adversary, params=params)
    log = RunLog()
    mu = config.schedule.mu
    stopper = EarlyStopping(mu, config.patience)
    rng = np.random.default_rng(config.seed)
    best_score, best_params = -math.inf, None
    batch_iter = batches(len(bundle.train), config.batch_size, rng)
    t = 0
    for t in range(1, config.max_iterations + 1):
        try:
            log.steps.append(trainer.step(bundle.train, next(batch_iter), t))
        except DivergenceError as exc:
            log.status, log.failed_at, log.stopped_at = "diverged", exc.iteration, exc.iteration
            break
        if t % config.eval_every and t != config.max_iterations:
            continue
        rows = _eval_rows(trainer.params, bundle, t, config.eval_splits)
        log.evals.extend(rows)
        val = next(r.overall for r in rows if r.split == "val")
        if (mu == 0 or t > mu) and val > best_score:
            best_score, best_params, log.best_iteration = val, trainer.params.copy(), t
        if stopper.update(t, val):
            break
    if log.stopped_at is None:
        log.stopped_at = t
    if best_params is None:
        best_params = trainer.params.copy()
    return TrainResult(best_params, log, trainer.params)


def train_question_only(model_config: ModelConfig, split: Split, iterations: int = 2000,
                        batch_size: int = 128, learning_rate: float = 0.001, seed: int = 0) -> ModelParams:
    """Fit the question encoder plus adversary head as a plain classifier (no image, no reversal).

    Only ``theta_q`` and ``theta_adv`` of the returned parameters are trained.
    """
    params = init_params(model_config)
    opt = Adamax(lr=learning_rate)
    rng = np.random.default_rng(seed)
    batch_iter = batches(len(split), batch_size, rng)
    for t in range(1, iterations + 1):
        idx = next(batch_iter)
        tape = Tape()
        bound = params.bind(tape)
        q = encode_bag(tape.leaf(split.bags[idx]), bound["theta_q"])
        loss = soft_cross_entropy(adversary_head(q, bound["theta_adv"]), split.targets[idx])
        grads = tape.backward(loss)
        keyed, values = {}, {}
        for g in ("theta_q", "theta_adv"):
            for name, leaf in bound[g].items():
                keyed[f"{g}/{name}"] = params[g][name]
                values[f"{g}/{name}"] = grads[leaf.node_id]
        opt.step(keyed, values, iteration=t)
    return params
