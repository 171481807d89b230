"""Command-line front end: generate, train, sweep, report.

Exit codes: 0 success, 1 usage, 2 IO or config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from . import schedule as sched_mod
from .analysis import (SweepReport, TypeScore, delta_metric, lambda_grid, run_sweep,
                       score_by_type)
from .dataset import (ChangingPriorsSpec, DatasetBundle, SpecError, default_spec, generate,
                      load_bundle, save_bundle)
from .model import ConfigError, ModelConfig, save_checkpoint
from .schedule import ScheduleParams
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

CONFIG_KEYS = {"dataset", "model", "train", "schedule", "out", "seed"}
TRAIN_OUTPUTS = ("ckpt.json", "runlog.csv", "eval.csv", "types.csv", "run.json",
                 "losses.svg", "grad_norms.svg", "scores.svg")
SWEEP_OUTPUTS = ("sweep.csv", "baseline.csv", "sweep.svg")
TYPES_HEADER = ("question_type_id", "prefix", "answer_type", "n", "score")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    bundle: DatasetBundle
    model: ModelConfig
    train: TrainConfig
    out: Path | None
    fingerprint: str
    raw: dict


def _spec_fingerprint(spec: ChangingPriorsSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _resolve_dataset(entry, base: Path) -> DatasetBundle:
    if isinstance(entry, str):
        path = (base / entry).resolve()
        if not path.exists():
            raise CliError(f"dataset path does not exist: {path}")
        if path.is_dir():
            return load_bundle(path)
        payload = json.loads(path.read_text())
        return generate(ChangingPriorsSpec.from_dict(payload.get("spec", payload)))
    if isinstance(entry, dict):
        if "version" in entry:
            overrides = {k: v for k, v in entry.items() if k != "version"}
            return generate(default_spec(int(entry["version"]), **overrides))
        return generate(ChangingPriorsSpec.from_dict(entry))
    raise CliError("'dataset' must be a path or an object")


def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise CliError(f"unknown keys in {where}: {', '.join(unknown)}")


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise CliError(f"{path}: top level must be an object")
    _reject_unknown(raw, CONFIG_KEYS, "config")
    if "dataset" not in raw:
        raise CliError("config needs a 'dataset' entry")
    bundle = _resolve_dataset(raw["dataset"], path.parent)

    seed = raw.get("seed", 0) if seed is None else seed
    model_kw = dict(raw.get("model", {}))
    derived = {"question_vocab_size", "image_input_dim", "answer_vocab_size"}
    _reject_unknown(model_kw, {f.name for f in fields(ModelConfig)} - derived - {"seed"}, "model")
    model = ModelConfig(
        question_vocab_size=len(bundle.spec.token_vocab),
        image_input_dim=bundle.spec.image_feature_dim,
        answer_vocab_size=len(bundle.spec.answer_vocab),
        seed=seed, **model_kw,
    )

    train_kw = dict(raw.get("train", {}))
    _reject_unknown(train_kw, {f.name for f in fields(TrainConfig)} - {"seed"}, "train")
    if "schedule" in raw:
        if "schedule" in train_kw:
            raise CliError("schedule given both at top level and inside 'train'")
        train_kw["schedule"] = raw["schedule"]
    train_cfg = TrainConfig.from_dict({**train_kw, "seed": seed})

    out_dir = out if out is not None else raw.get("out")
    resolved_out = None if out_dir is None else (path.parent / out_dir if out is None else Path(out_dir))
    return RunConfig(bundle, model, train_cfg, resolved_out, _spec_fingerprint(bundle.spec), raw)


def _prepare_out(out: Path | None, names: Sequence[str], overwrite: bool) -> Path:
    if out is None:
        raise CliError("no output directory: pass --out or set 'out' in the config")
    clash = [n for n in names if (out / n).exists()]
    if clash and not overwrite:
        raise CliError(f"{out} already holds {', '.join(clash)}; pass --overwrite to replace")
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    probe.write_text("")
    probe.unlink()
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------- generate


def prior_table(spec: ChangingPriorsSpec) -> str:
    lines = [f"{'id':>2}  {'prefix':<24} {'type':<6}  train prior -> test prior"]
    for i, qt in enumerate(spec.question_types):
        def fmt(p):
            order = sorted(range(len(p)), key=lambda j: (-p[j], j))[:3]
            return " ".join(f"{qt.candidates[j]}:{p[j]:.2f}" for j in order)
        lines.append(f"{i:>2}  {qt.name:<24} {qt.answer_type:<6}  {fmt(qt.train_prior)} -> {fmt(qt.test_prior)}")
    return "\n".join(lines)


def cmd_generate(args) -> int:
    if args.spec is not None:
        try:
            payload = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise CliError(f"spec not found: {args.spec}")
        spec = ChangingPriorsSpec.from_dict(payload.get("spec", payload))
    else:
        spec = default_spec(args.version)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.examples is not None:
        changes["examples_per_split"] = args.examples
    if changes:
        spec = spec.replace(**changes)
    print(prior_table(spec))
    if args.dry_run:
        return EXIT_OK
    out = _prepare_out(Path(args.out), ("train.jsonl", "val.jsonl", "test.jsonl", "spec.json"), args.overwrite)
    save_bundle(generate(spec), out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _write_types(path: Path, bundle: DatasetBundle, scores: Sequence[TypeScore]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TYPES_HEADER)
        for s in scores:
            prefix = bundle.spec.question_types[s.question_type_id].name
            w.writerow([s.question_type_id, prefix, s.answer_type, s.n_examples, repr(s.score)])
    tmp.replace(path)


def _run_record(cfg: RunConfig, status: str, best: int | None, stopped: int | None) -> str:
    record = {
        "dataset_fingerprint": cfg.fingerprint,
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
        "status": status,
        "best_iteration": best,
        "stopped_at": stopped,
    }
    return json.dumps(record, indent=2, sort_keys=True) + "\n"


def cmd_train(args) -> int:
    from . import plots

    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.dry_run:
        print(f"config ok: {len(cfg.bundle.train)} train examples, lambda_adv={cfg.train.lambda_adv}, "
              f"schedule={cfg.train.schedule.to_dict()}")
        return EXIT_OK
    out = _prepare_out(cfg.out, TRAIN_OUTPUTS, args.overwrite)
    result = train(cfg.model, cfg.train, cfg.bundle)
    log = result.log
    log.write_csv(out)
    plots.plot_losses(log, out / "losses.svg")
    plots.plot_grad_norms(log, out / "grad_norms.svg")
    plots.plot_scores(log, out / "scores.svg")
    _atomic_write(out / "run.json", _run_record(cfg, log.status, log.best_iteration, log.stopped_at))
    if log.status != "ok":
        print(f"diverged at iteration {log.failed_at}; partial logs in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    tmp = out / "ckpt.json.tmp"
    save_checkpoint(result.params, tmp, cfg.model)
    tmp.replace(out / "ckpt.json")
    _write_types(out / "types.csv", cfg.bundle, score_by_type(result.params, cfg.bundle.splits()[args.split]))
    best = log.score_at(log.best_iteration, "val") if log.best_iteration else None
    summary = f"best iteration {log.best_iteration}"
    if best is not None:
        summary += f", val overall {best.overall:.4f}"
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def _sweep_grid(args, cfg: RunConfig) -> list[tuple[float, ScheduleParams]]:
    if args.grid == "lambda":
        return lambda_grid(args.lambda_adv or (0.001, 0.005, 0.01, 0.1, 1.0),
                           args.lambda_grl or (0.1, 1.0))
    if args.scale == "desk":
        scale = sched_mod.desk_scale(cfg.train.max_iterations)
    else:
        scale = float(args.scale)
    schedules = sched_mod.grid(standard=args.grid == "standard", c=args.c, scale=scale)
    lams = args.lambda_adv or (cfg.train.lambda_adv,)
    return [(lam, s) for lam in lams for s in schedules]


def cmd_sweep(args) -> int:
    from . import plots

    cfg = load_config(args.config, seed=args.seed, out=args.out)
    grid = _sweep_grid(args, cfg)
    if args.dry_run:
        print(f"config ok: {len(grid)} runs")
        return EXIT_OK
    out = _prepare_out(cfg.out, SWEEP_OUTPUTS, args.overwrite)
    report = run_sweep(grid, cfg.train, cfg.model, cfg.bundle, jobs=args.jobs)
    report.write_csv(out / "sweep.csv")

    base_rows = [r for r in report.rows if r.lambda_adv == 0.0 and r.status == "ok"]
    if base_rows:
        baseline = SweepReport(base_rows[:1])
    else:
        baseline = run_sweep([(0.0, ScheduleParams())], cfg.train, cfg.model, cfg.bundle)
    baseline.write_csv(out / "baseline.csv")
    plots.plot_sweep(report, out / "sweep.svg", baseline=baseline.rows[0].test_overall)

    done = len(report.completed)
    print(f"{done}/{len(report)} runs completed; baseline test {baseline.rows[0].test_overall:.4f}")
    return EXIT_OK if done else EXIT_DIVERGED


# ---------------------------------------------------------------- report


def _read_run(run_dir: Path) -> tuple[str, list[dict]]:
    try:
        record = json.loads((run_dir / "run.json").read_text())
        with (run_dir / "types.csv").open(newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError as exc:
        raise CliError(f"{run_dir} is not a finished training run ({exc.filename} missing)")
    return record["dataset_fingerprint"], rows


@dataclass(frozen=True)
class ReportRow:
    question_type_id: int
    prefix: str
    answer_type: str
    n: int
    base: float
    reg: float
    delta: float


def build_report(base_dir: Path, reg_dir: Path) -> list[ReportRow]:
    fp_base, base = _read_run(base_dir)
    fp_reg, reg = _read_run(reg_dir)
    if fp_base != fp_reg:
        raise CliError(f"{base_dir} and {reg_dir} were trained on different datasets")
    out = []
    for b, r in zip(base, reg, strict=True):
        if b["question_type_id"] != r["question_type_id"] or b["n"] != r["n"]:
            raise CliError(f"{base_dir} and {reg_dir} disagree on question types")
        n, sb, sr = int(b["n"]), float(b["score"]), float(r["score"])
        out.append(ReportRow(int(b["question_type_id"]), b["prefix"], b["answer_type"], n, sb, sr,
                             delta_metric(n, sb, sr)))
    return out


def format_report(rows: Sequence[ReportRow], top: int, by_delta: bool) -> str:
    def line(r: ReportRow | None) -> str:
        if r is None:
            return " " * 57
        return f"{r.prefix:<24} {r.n:>6} {100 * r.base:>7.2f} {100 * r.reg:>7.2f} {r.delta:>8.2f}"

    head = f"{'question type':<24} {'N':>6} {'base':>7} {'reg':>7} {'delta':>8}"
    if not by_delta:
        return "\n".join([head] + [line(r) for r in rows])
    desc = sorted(rows, key=lambda r: (-r.delta, r.question_type_id))[:top]
    asc = sorted(rows, key=lambda r: (r.delta, r.question_type_id))[:top]
    body = [f"{line(d)}   {line(a)}" for d, a in zip(desc, asc)]
    return "\n".join([f"{head}   {head}"] + body)


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.run_dirs]
    if len(dirs) < 2:
        raise CliError("report needs a baseline run dir and at least one regularized run dir", EXIT_USAGE)
    texts = []
    for reg_dir in dirs[1:]:
        rows = build_report(dirs[0], reg_dir)
        texts.append(f"# {dirs[0].name} -> {reg_dir.name}\n" + format_report(rows, args.top, args.delta))
    text = "\n\n".join(texts) + "\n"
    print(text, end="")
    if args.out is not None:
        out = Path(args.out)
        if out.exists() and not args.overwrite:
            raise CliError(f"{out} exists; pass --overwrite to replace")
        out.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(out, text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advreg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic changing-priors dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--version", type=int, choices=(1, 2), default=1)
    src.add_argument("--spec", help="JSON dataset spec (or a generated spec.json)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--examples", type=int, help="examples per split")
    g.add_argument("--overwrite", action="store_true")
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="split scored per question type into types.csv")
    t.add_argument("--overwrite", action="store_true")
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train a grid of lambda or schedule settings")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--grid", choices=("lambda", "standard", "accelerated"), default="lambda")
    s.add_argument("--lambda-adv", type=float, nargs="+")
    s.add_argument("--lambda-grl", type=float, nargs="+")
    s.add_argument("--c", type=float, default=1.0, help="final GRL weight for schedule grids")
    s.add_argument("--scale", default="1", help="schedule grid scale factor, or 'desk' for max_iterations/16000")
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="per-question-type comparison of a baseline and regularized runs")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--delta", action="store_true", help="rank by delta into descending and ascending blocks")
    r.add_argument("--top", type=int, default=10)
    r.add_argument("--out")
    r.add_argument("--overwrite", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("advreg: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"advreg: error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError, TypeError, SpecError, ConfigError) as exc:
        print(f"advreg: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
