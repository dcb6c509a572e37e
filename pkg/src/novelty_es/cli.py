"""Command-line front end: ``novelty-es <command> ...``.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunConfig
from .dist import run_tcp_worker
from .env import EnvInputError, get_env
from .novelty import read_archive, write_archive
from .plots import plot_export
from .policy import PolicySpec, StructureError
from .pretrain import PretrainConfig, load_teacher, pretrain, write_student
from .training import (
    ARCHIVE_FILE, CHECKPOINT_FILE, FINAL_FILE, ResumeError, Trainer, evaluation_report, load_run_policy,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

VALIDATION_ERRORS = (ConfigError, CheckpointError, EnvInputError, StructureError, ResumeError)


def _hostport(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"expected host:port, got {text!r}")
    return host, int(port)


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_dict({})
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    listen = _hostport(args.listen) if args.listen else None
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.algorithm}-{cfg.policy}-s{cfg.seed}"
    if args.resume:
        trainer = Trainer.resume(out, cfg, listen=listen)
    else:
        trainer = Trainer(cfg, out, listen=listen)
    trainer.run()
    print(json.dumps({"run_dir": str(out), "iterations": trainer.iteration,
                      "goal_iteration": trainer.goal_iteration}))
    return EXIT_OK


def cmd_worker(args) -> int:
    host, port = _hostport(args.connect)
    served = run_tcp_worker(host, port)
    logging.getLogger(__name__).info("worker served %d tasks", served)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck, mean, std = load_run_policy(args.ckpt)
    env = get_env(args.env)
    if ck.spec.obs_dim != env.obs_dim or ck.spec.act_dim != env.act_dim:
        raise ConfigError("checkpoint policy does not fit the environment")
    seeds = list(range(args.seed_base, args.seed_base + args.episodes))
    report = evaluation_report(ck.spec, ck.thetas, env, seeds, args.rtg_target, mean, std)
    report["seeds"] = seeds
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def _read_pairs(path) -> dict:
    pairs = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        pairs[key.strip()] = value.strip()
    return pairs


def cmd_pretrain(args) -> int:
    teacher_path = Path(args.teacher)
    teacher = load_teacher(teacher_path)
    if args.member is not None:
        ck = read_checkpoint(teacher_path)
        teacher.params = ck.thetas[args.member]
    elif (teacher_path.parent / FINAL_FILE).exists():
        best = json.loads((teacher_path.parent / FINAL_FILE).read_text())["best_member"]
        teacher.params = read_checkpoint(teacher_path).thetas[best]
    try:
        student = PolicySpec.from_pairs(_read_pairs(args.student_spec))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad student spec: {exc}") from exc
    fields = {k: getattr(args, k) for k in ("env", "episodes", "iterations", "pop_pairs", "seed",
                                             "batch_size") if getattr(args, k) is not None}
    cfg = PretrainConfig(**fields)
    result = pretrain(teacher, student, cfg)
    write_student(args.out, student, result.theta, result.fitness)
    print(json.dumps({"student": args.out, "initial_fitness": result.fitness[0],
                      "final_fitness": result.fitness[-1]}))
    return EXIT_OK


def cmd_archive(args) -> int:
    if args.action == "export":
        src = Path(args.run) / ARCHIVE_FILE
        if not src.exists():
            raise ConfigError(f"{args.run} holds no archive")
        arch = read_archive(src)
        write_archive(arch, args.out)
        print(json.dumps({"archive": args.out, "entries": len(arch)}))
        return EXIT_OK
    arch = read_archive(args.archive)
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_dict({})
    cfg = cfg.with_overrides(archive_import=str(Path(args.archive).resolve()))
    Path(args.out).write_text(cfg.to_text(), encoding="utf-8")
    print(json.dumps({"config": args.out, "entries": len(arch)}))
    return EXIT_OK


def cmd_plot_export(args) -> int:
    paths = plot_export(args.runs, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="novelty-es", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run ES / NS-ES / NSR-ES")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--listen", help="host:port to accept TCP workers on")
    t.add_argument("--out", help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("worker", help="serve evaluations for a coordinator")
    w.add_argument("--connect", required=True)
    w.set_defaults(func=cmd_worker)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", default="maze")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed-base", type=int, default=0)
    e.add_argument("--rtg-target", type=float, default=0.0075)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pt = sub.add_parser("pretrain", help="seed a policy by imitating a teacher")
    pt.add_argument("--teacher", required=True)
    pt.add_argument("--student-spec", required=True)
    pt.add_argument("--out", default="student.ckpt")
    pt.add_argument("--member", type=int)
    pt.add_argument("--env")
    pt.add_argument("--episodes", type=int)
    pt.add_argument("--iterations", type=int)
    pt.add_argument("--pop-pairs", type=int)
    pt.add_argument("--batch-size", type=int)
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("archive", help="export or import a behavior archive")
    asub = a.add_subparsers(dest="action", required=True)
    ax = asub.add_parser("export")
    ax.add_argument("--run", required=True)
    ax.add_argument("--out", required=True)
    ai = asub.add_parser("import")
    ai.add_argument("--archive", required=True)
    ai.add_argument("--config")
    ai.add_argument("--out", required=True, help="config file to write")
    a.set_defaults(func=cmd_archive)

    pe = sub.add_parser("plot-export", help="write figure CSV tables")
    pe.add_argument("--runs", nargs="+", required=True)
    pe.add_argument("--out", default="plots")
    pe.set_defaults(func=cmd_plot_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
