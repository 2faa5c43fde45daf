"""Command-line entry point: ``mtkd <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input (bad flags, config, data or checkpoints),
2 runtime failure (divergence, failed gradient check, I/O errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import Config, load_config, write_config
from .corpus import SPLITS, generate_corpus, load_corpus, save_corpus
from .evaluation import Pipeline, emit_report, evaluate_model
from .gradcheck import LOSS_NAMES, run_gradient_checks
from .models import load_checkpoint
from .training import ablate_teachers, decode_limit, pretrain_mt, pretrain_tir, sweep_lambda, train_student

LOG_ENV = "MTKD_LOG_LEVEL"
GRADCHECK_TOL = 1e-4

log = logging.getLogger("mtkd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed_help: str) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (created if absent)")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")


def _data(p):
    p.add_argument("--data", type=Path, default=None,
                   help="dataset directory from gen-data; generated from [corpus] when omitted")


def _teachers(p, required: bool):
    p.add_argument("--tir", type=Path, default=None, required=required, help="recognition teacher checkpoint")
    p.add_argument("--mt", type=Path, default=None, required=required, help="translation teacher checkpoint")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mtkd", description="Distilled text-image translation on a synthetic corpus.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")
    train_seed = "overrides [train] seed"

    p = sub.add_parser("gen-data", help="render the synthetic corpus to disk", formatter_class=fmt)
    _common(p, "overrides [corpus] seed")

    for name, what in (("train-tir", "recognition"), ("train-mt", "translation")):
        p = sub.add_parser(name, help=f"pretrain the {what} teacher", formatter_class=fmt)
        _common(p, train_seed)
        _data(p)

    p = sub.add_parser("train-student", help="train the end-to-end student with distillation", formatter_class=fmt)
    _common(p, train_seed)
    _data(p)
    _teachers(p, required=False)

    p = sub.add_parser("ablate", help="one student per non-empty teacher subset, plus the no-KD baseline",
                       formatter_class=fmt)
    _common(p, "single seed instead of [experiment] seeds")
    _data(p)
    _teachers(p, required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; overrides [experiment] seeds")

    p = sub.add_parser("sweep-lambda", help="one student per lambda_kd grid point", formatter_class=fmt)
    _common(p, "single seed instead of [experiment] seeds")
    _data(p)
    _teachers(p, required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; overrides [experiment] seeds")
    p.add_argument("--grid", default=None, help="comma-separated lambda_kd values; overrides [experiment] lambda_grid")

    p = sub.add_parser("evaluate", help="BLEU, parameter count and decode latency", formatter_class=fmt)
    _common(p, "unused; accepted for symmetry")
    _data(p)
    _teachers(p, required=False)
    p.add_argument("--model", choices=("student", "pipeline"), default="student")
    p.add_argument("--student", type=Path, default=None, help="student checkpoint (for --model student)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--ablation", type=Path, default=None, help="ablation.json to fold into the report")
    p.add_argument("--curve", type=Path, default=None, help="sweep.json to fold into the report")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss", formatter_class=fmt)
    _common(p, "seed for the toy networks and probe coordinates")
    p.add_argument("--epsilon", type=float, default=1e-4)
    return parser


def _setup_logging(verbose: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    env = os.environ.get(LOG_ENV)
    if env:
        level = logging.getLevelName(env.upper())
        if not isinstance(level, int):
            raise UsageError(f"{LOG_ENV}={env!r} is not a logging level")
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", force=True)


def _config(args) -> Config:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        if args.command == "gen-data":
            cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed))
        else:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _corpus(args, cfg: Config):
    if args.data is None:
        corpus = generate_corpus(cfg.corpus)
    else:
        corpus = load_corpus(args.data)
    return corpus, replace(cfg, corpus=corpus.spec)


def _seeds(args, cfg: Config) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    if args.seed is not None:
        return [args.seed]
    return list(cfg.experiment.seeds)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def cmd_gen_data(args, cfg: Config) -> int:
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, args.out)
    write_config(cfg, args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} samples to {args.out}")
    return 0


def cmd_pretrain(args, cfg: Config) -> int:
    corpus, cfg = _corpus(args, cfg)
    fn = pretrain_tir if args.command == "train-tir" else pretrain_mt
    res = fn(corpus, cfg.model_for_corpus(), cfg.teacher_train, args.out)
    write_config(cfg, args.out)
    best = res.best_record
    print(f"{res.checkpoint}: best epoch {best.epoch}, valid token accuracy {best.valid_accuracy:.4f}")
    return 0


def cmd_train_student(args, cfg: Config) -> int:
    corpus, cfg = _corpus(args, cfg)
    res = train_student(corpus, args.tir, args.mt, cfg.model_for_corpus(), cfg.train, args.out)
    write_config(cfg, args.out)
    best = res.best_record
    print(f"{res.checkpoint}: best epoch {best.epoch}, valid BLEU {best.valid_bleu:.2f}")
    return 0


def cmd_ablate(args, cfg: Config) -> int:
    corpus, cfg = _corpus(args, cfg)
    tir, mt = load_checkpoint(args.tir), load_checkpoint(args.mt)
    table = ablate_teachers(corpus, tir, mt, cfg.model_for_corpus(), cfg.train, _seeds(args, cfg))
    doc = {"rows": [r.to_dict() for r in table.rows],
           "baseline": table.baseline.to_dict() if table.baseline else None}
    _write_json(args.out / "ablation.json", doc)
    write_config(cfg, args.out)
    for r in table.rows:
        print(f"No.{r.no} {r.teachers.upper():<4} valid {r.valid_bleu:6.2f}  test {r.test_bleu:6.2f}")
    if table.baseline:
        print(f"base      valid {table.baseline.valid_bleu:6.2f}  test {table.baseline.test_bleu:6.2f}")
    return 0


def cmd_sweep(args, cfg: Config) -> int:
    corpus, cfg = _corpus(args, cfg)
    grid = [float(g) for g in args.grid.split(",")] if args.grid else list(cfg.experiment.lambda_grid)
    tir, mt = load_checkpoint(args.tir), load_checkpoint(args.mt)
    points = sweep_lambda(corpus, tir, mt, cfg.model_for_corpus(), cfg.train, grid, _seeds(args, cfg))
    doc = [{"lambda_kd": p.lambda_kd, "bleu": p.bleu, "test_bleu": p.test_bleu,
            "per_seed": [{"seed": r.seed, "valid_bleu": r.valid_bleu, "test_bleu": r.test_bleu} for r in p.runs]}
           for p in points]
    _write_json(args.out / "sweep.json", doc)
    (args.out / "lambda_curve.csv").write_text(
        "lambda_kd,bleu\n" + "".join(f"{p.lambda_kd!r},{p.bleu!r}\n" for p in points))
    write_config(cfg, args.out)
    for p in points:
        print(f"lambda_kd={p.lambda_kd:g} valid BLEU {p.bleu:.2f}")
    return 0


def cmd_evaluate(args, cfg: Config) -> int:
    corpus, cfg = _corpus(args, cfg)
    if args.model == "student":
        if args.student is None:
            raise UsageError("--model student needs --student CHECKPOINT")
        model = load_checkpoint(args.student)
        if model.kind != "timt":
            raise UsageError(f"{args.student} holds a {model.kind} model, not a student")
    else:
        if args.tir is None or args.mt is None:
            raise UsageError("--model pipeline needs --tir and --mt")
        model = Pipeline(load_checkpoint(args.tir), load_checkpoint(args.mt))
    report = evaluate_model(model, corpus.split(args.split), corpus.tgt_vocab, decode_limit(corpus),
                            split=args.split, name=args.model)
    ablation = json.loads(args.ablation.read_text())["rows"] if args.ablation else None
    curve = [(p["lambda_kd"], p["bleu"]) for p in json.loads(args.curve.read_text())] if args.curve else None
    emit_report(args.out, [report], curve=curve, ablation=ablation)
    write_config(cfg, args.out)
    print(f"{report.model} {report.split}: BLEU {report.bleu:.2f}, {report.n_params} params, "
          f"{report.latency_ms_mean:.2f} ms/sentence (median {report.latency_ms_median:.2f}, "
          f"n={report.latency_samples})")
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    seed = args.seed if args.seed is not None else 0
    errors = run_gradient_checks(epsilon=args.epsilon, seed=seed)
    ok = True
    for name in LOSS_NAMES:
        passed = errors[name] < GRADCHECK_TOL
        ok &= passed
        print(f"{name:<8} max rel err {errors[name]:.3e} {'ok' if passed else 'FAIL'}")
    _write_json(args.out / "gradcheck.json", {"epsilon": args.epsilon, "seed": seed, "max_rel_error": errors})
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tir": cmd_pretrain,
    "train-mt": cmd_pretrain,
    "train-student": cmd_train_student,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging(args.verbose)
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"mtkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"mtkd {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
