"""Acceptance suite: one recorded pass/fail line per criterion.

Training-based criteria run at desk scale: 2000 iterations, batch 128,
adversary of 2 x 128 units, schedule grids rescaled by 2000/16000.
"""

import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from advreg import autodiff as ad
from advreg import cli
from advreg.analysis import blind_oracle_score, delta_metric, question_only_score
from advreg.autodiff import Tape
from advreg.dataset import default_spec, generate
from advreg.model import ModelConfig, adversary_head, bag_of_words, encode_bag, forward, init_params
from advreg.objective import annotator_soft_targets, soft_cross_entropy, total_loss
from advreg.schedule import ScheduleParams, desk_scale, lambda_grl_at, rescale, static_schedule
from advreg.trainer import EarlyStopping, TrainConfig, Trainer, train, train_question_only

from oracles import central_difference, max_rel_error

DESK_ITERATIONS = 2000
DESK = dict(batch_size=128, max_iterations=DESK_ITERATIONS, eval_every=100, patience=math.inf)
SEEDS = (0, 1, 2)


def desk_model(bundle, seed):
    s = bundle.spec
    return ModelConfig(question_vocab_size=len(s.token_vocab), image_input_dim=s.image_feature_dim,
                       answer_vocab_size=len(s.answer_vocab), adversary_hidden_units=128, seed=seed)


def final_row(log, split):
    return log.score_at(log.stopped_at, split)


# ---------------------------------------------------------------- 1


class _Recorder:
    """Stands in for an optimizer and keeps the gradients it was handed."""

    def __init__(self):
        self.grads = {}

    def step(self, params, grads, iteration=None):
        self.grads.update({k: np.array(v, copy=True) for k, v in grads.items()})


def _random_problem(rng):
    cfg = ModelConfig(
        question_vocab_size=int(rng.integers(5, 9)), image_input_dim=int(rng.integers(2, 5)),
        answer_vocab_size=int(rng.integers(2, 5)), embed_dim=int(rng.integers(2, 4)),
        question_hidden_dim=int(rng.integers(2, 4)), fused_dim=int(rng.integers(2, 4)),
        adversary_hidden_layers=int(rng.integers(1, 4)), adversary_hidden_units=int(rng.integers(2, 5)),
        seed=int(rng.integers(1 << 30)),
    )
    params = init_params(cfg)
    for _, _, v in params.items():
        v[...] = rng.normal(scale=0.8, size=v.shape)
    b = int(rng.integers(2, 5))
    bags = bag_of_words([list(rng.integers(0, cfg.question_vocab_size, size=3)) for _ in range(b)],
                        cfg.question_vocab_size)
    images = rng.normal(size=(b, cfg.image_input_dim))
    targets = np.stack([annotator_soft_targets(list(rng.integers(0, cfg.answer_vocab_size, size=10)),
                                               cfg.answer_vocab_size) for _ in range(b)])
    return cfg, params, images, bags, targets


def _losses(params, images, bags, targets, lambda_adv):
    """(l_vqa, l_adv, l_total) with the adversary read straight off q."""
    tape = Tape()
    bound = params.bind(tape)
    fwd = forward(bound, tape.leaf(images), tape.leaf(bags), None)
    l_vqa = soft_cross_entropy(fwd.vqa_log_probs, targets)
    l_adv = soft_cross_entropy(adversary_head(fwd.q, bound["theta_adv"]), targets)
    return tape, bound, l_vqa, l_adv, total_loss(l_vqa, l_adv, lambda_adv)


def test_criterion_1_gradient_correctness(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_total = worst_map = 0.0
    n_checked = 0
    for _ in range(50):
        cfg, params, images, bags, targets = _random_problem(rng)
        lambda_adv, lambda_grl = float(rng.uniform(0, 1)), float(rng.uniform(0, 2))

        tape, bound, l_vqa, l_adv, l_tot = _losses(params, images, bags, targets, lambda_adv)
        tape.backward(l_tot)

        trainer = Trainer(cfg, TrainConfig(lambda_adv=lambda_adv, schedule=static_schedule(lambda_grl)),
                          params=params.copy())
        trainer.opt_vqa, trainer.opt_adv = _Recorder(), _Recorder()
        batch = SimpleNamespace(images=images, bags=bags, targets=targets)
        trainer.step(batch, np.arange(len(images)), t=1)

        for g, n, value in params.items():
            def value_at(x, which):
                trial = params.copy()
                trial[g][n][...] = x
                out = _losses(trial, images, bags, targets, lambda_adv)
                return float(out[which].data[0])

            fd_vqa = central_difference(lambda x: value_at(x, 2), value)
            fd_adv = central_difference(lambda x: value_at(x, 3), value)
            fd_total = central_difference(lambda x: value_at(x, 4), value)
            worst_total = max(worst_total, max_rel_error(tape.grad_of(bound[g][n]), fd_total))

            # the map the optimizers receive: descent on l_adv for theta_adv,
            # reversed and scaled l_adv for theta_q, l_vqa elsewhere
            if g == "theta_adv":
                applied, expected = trainer.opt_adv.grads[n], lambda_adv * fd_adv
            elif g == "theta_q":
                applied = trainer.opt_vqa.grads[f"{g}/{n}"]
                expected = fd_vqa - lambda_adv * lambda_grl * fd_adv
            else:
                applied, expected = trainer.opt_vqa.grads[f"{g}/{n}"], fd_vqa
            worst_map = max(worst_map, max_rel_error(applied, expected))
            n_checked += value.size
    elapsed = time.perf_counter() - start
    ok = worst_total < 1e-4 and worst_map < 1e-4 and elapsed < 60
    criterion(1, ok, f"gradient check on 50 models ({n_checked} entries): max rel err l_total {worst_total:.1e}, "
                     f"two-pass map {worst_map:.1e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_grl_contract(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    forward_identical = True
    for _ in range(20):
        cfg, params, images, bags, targets = _random_problem(rng)
        lambda_adv, lambda_grl = float(rng.uniform(0.01, 1)), float(rng.uniform(0.01, 3))

        # identity oracle: adversary loss read straight off q, no reversal
        tape = Tape()
        bound = params.bind(tape)
        q = encode_bag(tape.leaf(bags), bound["theta_q"])
        oracle_out = adversary_head(q, bound["theta_adv"])
        tape.backward(soft_cross_entropy(oracle_out, targets))
        oracle = {n: tape.grad_of(t) for n, t in bound["theta_q"].items()}

        # pass 2 of the trainer: lambda_adv * l_adv through the GRL
        tape = Tape()
        bound = params.bind(tape)
        fwd = forward(bound, tape.leaf(images), tape.leaf(bags), lambda_grl)
        forward_identical &= fwd.adv_log_probs.data.tobytes() == oracle_out.data.tobytes()
        tape.backward(ad.scale(soft_cross_entropy(fwd.adv_log_probs, targets), lambda_adv))
        for n, t in bound["theta_q"].items():
            expected = -lambda_grl * lambda_adv * oracle[n]
            got = tape.grad_of(t)
            scale = np.maximum(np.abs(expected), 1e-300)
            worst = max(worst, float((np.abs(got - expected) / scale)[np.abs(expected) > 0].max(initial=0.0)))
            assert not np.any(got[expected == 0])
    ok = forward_identical and worst <= 1e-12
    criterion(2, ok, f"GRL forward bitwise identical: {forward_identical}; reversed gradient rel err {worst:.1e} "
                     f"(tol 1e-12)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_schedule_exactness(criterion):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        mu, w = int(rng.integers(0, 8000)), int(rng.integers(1, 8000))
        c = float(rng.uniform(0, 5))
        t = int(rng.integers(0, mu + w + 2000))
        s = ScheduleParams(mu, w, c)
        if t <= mu:
            expected = 0.0
        elif t <= mu + w:
            expected = c * (t - mu) / w
        else:
            expected = c
        mismatches += lambda_grl_at(t, s) != expected
    point = lambda_grl_at(3000, ScheduleParams(2000, 4000, 1.0))
    ok = mismatches == 0 and point == 0.25
    criterion(3, ok, f"schedule: {mismatches}/1000 mismatches; mu=2000 w=4000 c=1 t=3000 gives {point} (want 0.25)")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_baseline_equivalence(criterion):
    bundle = generate(default_spec(1, examples_per_split=2000))
    mc = desk_model(bundle, 0)
    common = dict(batch_size=128, max_iterations=300, eval_every=50, patience=math.inf)
    reg = train(mc, TrainConfig(lambda_adv=0.0, schedule=static_schedule(1.0), **common), bundle)
    base = train(mc, TrainConfig(**common), bundle, adversary=False)
    same_params = all(reg.final_params[g][n].tobytes() == base.final_params[g][n].tobytes()
                      for g in ("theta_v", "theta_q", "theta_z", "theta_vqa") for n in base.final_params[g])
    same_evals = [e.row() for e in reg.log.evals] == [e.row() for e in base.log.evals]
    ok = same_params and same_evals
    criterion(4, ok, f"lambda_adv=0 (lambda_grl=1) vs adversary removed, 300 steps: params bitwise equal "
                     f"{same_params}, eval rows equal {same_evals}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_changing_priors(criterion):
    start = time.perf_counter()
    spec = default_spec(1)
    assert spec.examples_per_split == 10_000 and spec.signal_strength == 0.7 and spec.cue_reliability == 0.8
    bundle = generate(spec)
    log = train(desk_model(bundle, 0), TrainConfig(**DESK), bundle, adversary=False).log
    t_test, test = log.eval_series("test")
    _, val = log.eval_series("val")
    peak = int(np.argmax(test))
    decline = test[peak] - test[-1]
    val_gain = val[-1] - val[peak]
    part_a = decline >= 0.01 and val_gain >= 0.0 and peak < len(test) - 1

    blind = train_question_only(desk_model(bundle, 0), bundle.train, iterations=DESK_ITERATIONS, batch_size=128)
    blind_val = question_only_score(blind, bundle.val)
    oracle = blind_oracle_score(spec, "train")
    part_b = blind_val <= oracle + 0.02
    elapsed = time.perf_counter() - start
    ok = part_a and part_b and elapsed < 300
    criterion(5, ok, f"baseline test peaks {test[peak]:.3f} at t={t_test[peak]} then ends {test[-1]:.3f} "
                     f"(drop {decline:.3f}, need >= 0.01) while val goes {val[peak]:.3f} -> {val[-1]:.3f}; "
                     f"question-only classifier {blind_val:.3f} <= oracle {oracle:.3f} + 0.02: {part_b}; "
                     f"{elapsed:.0f}s (limit 300s)")
    assert ok


# ---------------------------------------------------------------- 6 and 7


@pytest.fixture(scope="module")
def lambda_grid_runs():
    """Baseline and the (lambda_adv, lambda_grl) grid on version 1, three seeds each."""
    bundle = generate(default_spec(1))
    out = {}
    for seed in SEEDS:
        mc = desk_model(bundle, seed)
        out[("base", seed)] = train(mc, TrainConfig(seed=seed, **DESK), bundle, adversary=False).log
        for lam_adv in (0.005, 0.01):
            for lam_grl in (0.1, 1.0):
                cfg = TrainConfig(lambda_adv=lam_adv, schedule=static_schedule(lam_grl), seed=seed, **DESK)
                out[(lam_adv, lam_grl, seed)] = train(mc, cfg, bundle).log
    return out


def _seed_mean(runs, key, split, column):
    return float(np.mean([getattr(final_row(runs[(*key, s)], split), column) for s in SEEDS]))


def _best_setting(runs):
    settings = [(a, g) for a in (0.005, 0.01) for g in (0.1, 1.0)]
    return max(settings, key=lambda k: _seed_mean(runs, k, "test", "overall"))


def test_criterion_6_out_of_domain_benefit(criterion, lambda_grid_runs):
    runs = lambda_grid_runs
    best = _best_setting(runs)
    base_test = _seed_mean(runs, ("base",), "test", "overall")
    base_yesno = _seed_mean(runs, ("base",), "test", "yesno")
    reg_test = _seed_mean(runs, best, "test", "overall")
    reg_yesno = _seed_mean(runs, best, "test", "yesno")
    gain, yesno_gain = reg_test - base_test, reg_yesno - base_yesno
    ok = gain >= 0.05 and yesno_gain >= 0.15
    criterion(6, ok, f"best setting lambda_adv={best[0]} lambda_grl={best[1]}: test {reg_test:.3f} vs baseline "
                     f"{base_test:.3f} (gain {100 * gain:+.1f} pts, need +5); YesNo gain {100 * yesno_gain:+.1f} pts "
                     f"(need +15); 3-seed means")
    assert ok


def test_criterion_7_in_domain_cost(criterion, lambda_grid_runs):
    runs = lambda_grid_runs
    best = _best_setting(runs)
    val_drop = _seed_mean(runs, ("base",), "val", "overall") - _seed_mean(runs, best, "val", "overall")
    yesno_delta = _seed_mean(runs, best, "test", "yesno") - _seed_mean(runs, ("base",), "test", "yesno")
    other_delta = _seed_mean(runs, best, "test", "other") - _seed_mean(runs, ("base",), "test", "other")
    ok = val_drop >= 0.03 and other_delta < yesno_delta
    criterion(7, ok, f"same setting: val drop {100 * val_drop:+.1f} pts (need >= 3); test delta Other "
                     f"{100 * other_delta:+.1f} vs YesNo {100 * yesno_delta:+.1f} pts (need Other < YesNo)")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_scheduling(criterion):
    bundle = generate(default_spec(2))
    scale = desk_scale(DESK_ITERATIONS)
    schedules = [ScheduleParams(rescale(mu, scale), max(1, rescale(w, scale)), 1.0)
                 for mu in (0, 2000, 4000) for w in (1000, 4000)]
    static_final, sched_final = {}, {}
    delay_norms_zero = True
    for seed in SEEDS:
        mc = desk_model(bundle, seed)
        log = train(mc, TrainConfig(lambda_adv=1.0, schedule=static_schedule(1.0), seed=seed, **DESK), bundle).log
        static_final[seed] = final_row(log, "test").overall
        for s in schedules:
            log = train(mc, TrainConfig(lambda_adv=1.0, schedule=s, seed=seed, **DESK), bundle).log
            sched_final[(s, seed)] = final_row(log, "test").overall
            delay = [st.grad_norm_q_from_adv for st in log.steps if st.t <= s.mu]
            if delay:
                delay_norms_zero &= float(np.mean(delay)) == 0.0
    best = max(schedules, key=lambda s: np.mean([sched_final[(s, k)] for k in SEEDS]))
    wins = sum(sched_final[(best, k)] >= static_final[k] for k in SEEDS)
    ok = delay_norms_zero and wins >= 2
    per_seed = ", ".join(f"{sched_final[(best, k)]:.3f}/{static_final[k]:.3f}" for k in SEEDS)
    criterion(8, ok, f"v2 lambda_adv=1 c=1: adversary grad norm over delay is 0: {delay_norms_zero}; best schedule "
                     f"mu={best.mu} w={best.w} beats static on {wins}/3 seeds (schedule/static test {per_seed})")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_delta_metric(criterion):
    value = delta_metric(6501, 0.1675, 0.9341)
    rng = np.random.default_rng(9)
    antisym = all(
        delta_metric(n, a, b) == -delta_metric(n, b, a)
        for n, a, b in zip(rng.integers(0, 10_000, 100), rng.uniform(0, 1, 100), rng.uniform(0, 1, 100))
    )
    ok = abs(value - 49.84) <= 0.05 and antisym
    criterion(9, ok, f"delta(6501, 0.1675, 0.9341) = {value:.4f} (want 49.84 +- 0.05); antisymmetry over 100 "
                     f"random triples exact: {antisym}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_early_stopping(criterion):
    # constructed score sequences: a stop is never signalled at or before mu
    rng = np.random.default_rng(10)
    early = 0
    for _ in range(500):
        mu, every, patience = int(rng.integers(0, 20)) * 100, 100, int(rng.integers(1, 5))
        stop = EarlyStopping(mu, patience)
        for t in range(every, 5000, every):
            if stop.update(t, float(rng.uniform())):
                early += t <= mu or t < mu + patience * every
                break

    # the worked example, through the training loop: flat val score from the start
    bundle = generate(default_spec(1, examples_per_split=200))
    mc = ModelConfig(len(bundle.spec.token_vocab), bundle.spec.image_feature_dim, len(bundle.spec.answer_vocab),
                     embed_dim=4, question_hidden_dim=4, fused_dim=4, adversary_hidden_units=4)
    cfg = TrainConfig(lambda_adv=0.01, schedule=ScheduleParams(3000, 1000, 1.0), batch_size=8,
                      learning_rate=1e-12, max_iterations=10_000, eval_every=500, patience=2,
                      eval_splits=("val",))
    log = train(mc, cfg, bundle).log
    stopper = EarlyStopping(3000, 2)
    direct = next(t for t in range(500, 10_001, 500) if stopper.update(t, 0.5))
    ok = early == 0 and log.stopped_at == 4000 and direct == 4000
    criterion(10, ok, f"no stop before mu in 500 constructed logs ({early} violations); mu=3000, eval every 500, "
                      f"patience 2 stops at {log.stopped_at} in training and {direct} on the rule (want 4000)")
    assert ok


# ---------------------------------------------------------------- 11


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_reproducibility(criterion, tmp_path):
    def run_all(root):
        root.mkdir()
        codes = [cli.main(["generate", "--version", "2", "--examples", "400", "--seed", "5",
                           "--out", str(root / "data")])]
        cfg = {"dataset": "data", "model": {"adversary_hidden_units": 16},
               "train": {"batch_size": 32, "max_iterations": 60, "eval_every": 20, "patience": None}, "seed": 3}
        (root / "base.json").write_text(json.dumps({**cfg, "out": "base"}))
        (root / "reg.json").write_text(json.dumps({**cfg, "out": "reg", "schedule": {"mu": 10, "w": 20, "c": 1.0},
                                                   "train": {**cfg["train"], "lambda_adv": 0.5}}))
        codes.append(cli.main(["train", str(root / "base.json")]))
        codes.append(cli.main(["train", str(root / "reg.json")]))
        codes.append(cli.main(["sweep", str(root / "base.json"), "--out", str(root / "sweep"),
                               "--lambda-adv", "0.01", "0.5", "--lambda-grl", "1"]))
        codes.append(cli.main(["sweep", str(root / "base.json"), "--out", str(root / "sched"),
                               "--grid", "accelerated", "--scale", "0.02", "--lambda-adv", "0.5"]))
        codes.append(cli.main(["report", str(root / "base"), str(root / "reg"), "--delta",
                               "--out", str(root / "report.txt")]))
        return codes

    first = run_all(tmp_path / "a")
    second = run_all(tmp_path / "b")
    snap_a, snap_b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    differing = sorted(k for k in snap_a if snap_a[k] != snap_b.get(k))
    n_outputs = sum(1 for k in snap_a if k.endswith((".csv", ".svg")))
    ok = first == second == [0] * 6 and not differing and snap_a.keys() == snap_b.keys()
    criterion(11, ok, f"two full CLI passes (generate, train x2, sweep x2, report): {n_outputs} CSV/SVG files, "
                      f"{len(snap_a)} files total, differing: {differing or 'none'}")
    assert ok
