"""Command-line front door.

    symran run --config cfg.json [--stages traces,conceptizer,...]
    symran audit --model conceptizer.json [--probes 50]
    symran bench --corpus <run output dir> [--reps 5]

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .conceptizer import Conceptizer, IgConfig, audit_support_mask
from .config import load_config
from .env import EnvConfig, make_env
from .errors import ConfigError, MissingArtifactError, NumericError
from .kpm import TASK_SLICING
from .pipeline import STAGES, run_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    stages = None
    if args.stages:
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    outdir = run_config(cfg, stages)
    print(f"ok: artifacts in {outdir} (config hash {cfg.config_hash})")
    return EXIT_OK


def _cmd_audit(args) -> int:
    try:
        with open(args.model, "r", encoding="utf-8") as fh:
            model = Conceptizer.from_dict(json.load(fh))
    except FileNotFoundError:
        raise MissingArtifactError(f"conceptizer artifact not found: {args.model}")
    task = model.template.task
    env = make_env(EnvConfig(seed=args.seed, task=task, expose_true_concepts=True))
    env.reset()
    rng = np.random.default_rng(args.seed)
    probes = []
    for _ in range(args.probes):
        action = (rng.dirichlet(np.ones(3)) if task == TASK_SLICING
                  else int(rng.integers(0, 2)))
        probes.append(env.step(action).state)
    report = audit_support_mask(model, probes, IgConfig(steps=64))
    print(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK if report.off_support_max == 0.0 else EXIT_NUMERIC


def _cmd_bench(args) -> int:
    import os

    from .evaluation import expression_callable, latency_bench, neural_callable
    from .dsr import parse_expression
    from .logic import DecisionTable
    from .teacher import NeuralTeacher

    policy_path = os.path.join(args.corpus, "policy.json")
    teacher_path = os.path.join(args.corpus, "bc_teacher.json")
    conceptizer_path = os.path.join(args.corpus, "conceptizer.json")
    for path in (policy_path, teacher_path, conceptizer_path):
        if not os.path.exists(path):
            raise MissingArtifactError(f"bench corpus is missing {path}")
    with open(policy_path, "r", encoding="utf-8") as fh:
        policy = json.load(fh)
    with open(teacher_path, "r", encoding="utf-8") as fh:
        teacher = NeuralTeacher.from_dict(json.load(fh))
    with open(conceptizer_path, "r", encoding="utf-8") as fh:
        model = Conceptizer.from_dict(json.load(fh))
    if policy.get("kind") == "expressions":
        trees = [parse_expression(t, policy["n_vars"]) for t in policy["expressions"]]
        student_fn = expression_callable(trees)
    else:
        student_fn = DecisionTable.from_dict(policy).compile()
    rng = np.random.default_rng(0)
    k = model.template.k
    report = latency_bench(
        {"teacher": neural_callable(teacher), "student": student_fn},
        {
            "teacher": [rng.normal(size=teacher.net.input_dim)
                        for _ in range(args.inputs)],
            "student": [rng.uniform(0, 1, size=k) for _ in range(args.inputs)],
        },
        repetitions=args.reps,
    )
    print(json.dumps(report.to_dict(), indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symran",
        description="symbolic distillation pipeline for simulated RAN control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute pipeline stages from a config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--stages", default=None,
                       help=f"comma-separated subset of {','.join(STAGES)}")
    p_run.set_defaults(fn=_cmd_run)

    p_audit = sub.add_parser("audit", help="attribution audit of a conceptizer")
    p_audit.add_argument("--model", required=True)
    p_audit.add_argument("--probes", type=int, default=50)
    p_audit.add_argument("--seed", type=int, default=7)
    p_audit.set_defaults(fn=_cmd_audit)

    p_bench = sub.add_parser("bench", help="relative latency microbenchmark")
    p_bench.add_argument("--corpus", required=True,
                         help="run output directory with policy/teacher artifacts")
    p_bench.add_argument("--reps", type=int, default=5)
    p_bench.add_argument("--inputs", type=int, default=100000)
    p_bench.set_defaults(fn=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
