"""Command-line entry point: ``erapt {gen-data,train,eval,compare,verify-theorem}``.

Exit codes: 0 success, 1 validation, 2 runtime/numerical (including a failed
bound check), 3 I/O.
"""
from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from fractions import Fraction

import numpy as np

from .attack import AttackConfig, PerturbationBall
from .config import ConfigError, RunConfig, load_config
from .dataio import LabeledDataset, gen_blobs, gen_two_moons, k_shot_sample, load_csv, save_csv
from .evaluation import robustness_report, verify_theorem
from .evolution import EvolutionConfig, run_evolution
from .model import init_model, load_model, save_model
from .numcore import RandomStream
from .trainer import BASELINE, ER_APT, run_training, weight_log_csv

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _real(text: str) -> float:
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a real number: {text!r}") from None


def _seeds(text: str) -> list:
    try:
        out = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return out


def _load_cfg(args) -> RunConfig:
    try:
        return load_config(args.config, seed=args.seed)
    except ConfigError as e:
        raise CliError(EXIT_VALIDATION, f"invalid config: {e}") from None
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config: {e}") from None
    except ValueError as e:
        raise CliError(EXIT_VALIDATION, f"invalid config: {e}") from None


def _load_data(path) -> LabeledDataset:
    try:
        return load_csv(path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read dataset: {e}") from None
    except ValueError as e:
        raise CliError(EXIT_VALIDATION, f"bad dataset: {e}") from None


def _load_model(path):
    try:
        return load_model(path)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read model: {e}") from None
    except ValueError as e:
        raise CliError(EXIT_IO, f"bad model file: {e}") from None


def build_dataset(cfg: RunConfig) -> LabeledDataset:
    v = cfg.values
    stream = cfg.data_stream()
    if v["data.kind"] == "two_moons":
        ds = gen_two_moons(v["data.per_class"], v["data.noise_sd"], stream.split("points"))
    else:
        ds = gen_blobs(v["data.num_classes"], v["data.per_class"], v["data.dim"], v["data.separation"],
                       v["data.noise_sd"], stream.split("points"))
    if v["data.k_shot"] > 0:
        ds = k_shot_sample(ds, v["data.k_shot"], stream.split("k-shot"))
    return ds


def _train_one(cfg: RunConfig, data: LabeledDataset, eval_data, workers: int):
    model = init_model(cfg.model_spec(data.dim, data.num_classes))
    try:
        return run_training(cfg.train, data, model, eval_data, workers=workers)
    except (FloatingPointError, ValueError) as e:
        raise CliError(EXIT_RUNTIME, f"training failed: {e}") from None


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    ds = build_dataset(cfg)
    try:
        save_csv(ds, args.out)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset: {e}") from None
    print(f"wrote {args.out}: {len(ds)} examples, {ds.num_classes} classes, dim {ds.dim}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = _load_data(args.data)
    eval_data = _load_data(args.eval_data) if args.eval_data else None
    model, report = _train_one(cfg, data, eval_data, args.workers)
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        save_model(model, os.path.join(args.out_dir, "model.txt"))
        report.write_csv(os.path.join(args.out_dir, "report.csv"))
        report.write_events(os.path.join(args.out_dir, "events.jsonl"))
        with open(os.path.join(args.out_dir, "weights.csv"), "w") as fh:
            fh.write(weight_log_csv(report))
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write outputs: {e}") from None
    sys.stdout.write(report.to_csv())
    print(f"# mode={cfg.train.mode} seed={cfg.seed} wall_time={report.wall_time:.2f}s", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data)
    if data.dim != model.input_dim:
        raise CliError(EXIT_VALIDATION, f"dataset dim {data.dim} != model input_dim {model.input_dim}")
    if args.steps < 0 or args.epsilon < 0:
        raise CliError(EXIT_VALIDATION, "--steps and --epsilon must be non-negative")
    ball = atk = None
    if args.steps > 0 and args.epsilon > 0:
        ball = PerturbationBall(args.epsilon)
        step = args.step_size if args.step_size is not None else args.epsilon / 4
        atk = AttackConfig(args.steps, step, args.random_start)
    stream = RandomStream(args.seed).split("eval")
    rep = robustness_report(model, data, ball, atk, stream)
    rep.attack_steps, rep.epsilon = args.steps, args.epsilon
    print(rep.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    base_cfg = _load_cfg(args)
    data = _load_data(args.data)
    eval_data = _load_data(args.eval_data) if args.eval_data else data
    arms = [ER_APT, BASELINE] if not args.same_mode else [base_cfg.train.mode, base_cfg.train.mode]
    names = [ER_APT, BASELINE] if not args.same_mode else ["arm_a", "arm_b"]
    results = {n: [] for n in names}
    for seed in args.seeds:
        for name, mode in zip(names, arms):
            cfg = base_cfg.with_seed(seed).with_mode(mode)
            _, report = _train_one(cfg, data, eval_data, args.workers)
            last = report.records[-1] if report.records else None
            nat = last.natural_acc if last else float("nan")
            rob = last.robust_acc if last else float("nan")
            results[name].append((seed, nat, rob))
    rows = ["arm,seeds,natural_mean,natural_sd,robust_mean,robust_sd"]
    text = []
    for name in names:
        nat = [r[1] for r in results[name]]
        rob = [r[2] for r in results[name]]
        sd = (lambda xs: statistics.stdev(xs) if len(xs) > 1 else 0.0)
        rows.append(f"{name},{len(nat)},{statistics.fmean(nat):.17g},{sd(nat):.17g},"
                    f"{statistics.fmean(rob):.17g},{sd(rob):.17g}")
        text.append(f"{name:<22} natural {100 * statistics.fmean(nat):6.2f} +- {100 * sd(nat):5.2f}   "
                    f"robust {100 * statistics.fmean(rob):6.2f} +- {100 * sd(rob):5.2f}   (n={len(nat)})")
    csv_text = "\n".join(rows) + "\n"
    sys.stdout.write(csv_text)
    print("\n".join(text), file=sys.stderr)
    if args.out:
        try:
            with open(args.out, "w") as fh:
                fh.write(csv_text)
        except OSError as e:
            raise CliError(EXIT_IO, f"cannot write {args.out}: {e}") from None
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    if args.samples < 100:
        raise CliError(EXIT_VALIDATION, "--samples must be >= 100")
    if not args.epsilon > 0:
        raise CliError(EXIT_VALIDATION, "--epsilon must be positive")
    model = _load_model(args.model)
    data = _load_data(args.data)
    ball = PerturbationBall(args.epsilon)
    step = args.step_size if args.step_size is not None else args.epsilon
    try:
        evo = EvolutionConfig(args.population, 0.1, args.iterations, step)
    except ValueError as e:
        raise CliError(EXIT_VALIDATION, str(e)) from None
    root = RandomStream(args.seed).split("verify")
    pick = root.split("pick").random(len(data)).argsort(kind="stable")[: min(args.examples, len(data))]
    reports = []
    for i in sorted(int(j) for j in pick):
        x, y = data.inputs[i], int(data.labels[i])
        pop = run_evolution(model, x, y, ball, evo, root.split(("population", i)))
        reports.append((i, verify_theorem(model, x, y, pop, ball, args.samples, root.split(("samples", i)))))
    held = sum(r.samples - r.samples // 2 for _, r in reports)
    viol = sum(r.violation_rate * (r.samples - r.samples // 2) for _, r in reports) / held
    out = {
        "violation_rate": viol,
        "max_violation": args.max_violation,
        "examples": [dict(json.loads(r.to_json()), index=i) for i, r in reports],
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK if viol <= args.max_violation else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erapt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the configured synthetic dataset as CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="adversarial prompt tuning")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="natural and PGD robust accuracy")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--epsilon", type=_real, default=1 / 255)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--step-size", type=_real)
    e.add_argument("--random-start", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="er_apt vs single_pgd_baseline over seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--eval-data")
    c.add_argument("--seeds", type=_seeds, default=[0])
    c.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--out")
    c.add_argument("--same-mode", action="store_true", help="run both arms with the config's mode")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify-theorem", help="empirical region-bound check")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--epsilon", type=_real, default=1 / 255)
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--examples", type=int, default=10)
    v.add_argument("--population", type=int, default=9)
    v.add_argument("--iterations", type=int, default=2)
    v.add_argument("--step-size", type=_real)
    v.add_argument("--max-violation", type=float, default=0.01)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_theorem)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code else EXIT_OK
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FloatingPointError, ArithmeticError) as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
