"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .dataset import DatasetFormatError, load_dataset, relabel_dataset, write_dataset
from .evalkit import classify_gait, contact_matrix, write_gait_report
from .flowsel import FrameError, load_frames, select_from_sequence
from .gaitenv import ACT_DIM, OBS_DIM, SKILLS, EnvFactory, expert_policy, fitness, rollout
from .iql import train_iql
from .nn import CheckpointError, load_policy, save_policy
from .pipeline import PipelineError, RunSettings, derive_seed, phase3_finetune, run_full
from .ppo import TrainingDivergence
from .rewardlang import RewardSpecError, load_spec
from .vlmgw import VlmError, VlmGateway

log = logging.getLogger("roesl")

RUNTIME_ERRORS = (FrameError, DatasetFormatError, CheckpointError, VlmError, PipelineError,
                  TrainingDivergence, RewardSpecError, OSError, ValueError)


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
    # SUPPRESS defaults: a flag given before the subcommand is not reset by the subparser
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=S, metavar="KEY=VALUE",
                   help="override a config value, e.g. ppo.gamma=0.98 (repeatable)")
    p.add_argument("--seed", type=int, default=S, help="base seed (pipeline.seed)")
    p.add_argument("--mode", choices=("mock", "live"), default=S, help="reward source (pipeline.mode)")
    p.add_argument("--run-dir", default=S, help="root that relative paths resolve against (default .)")
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    return p


COMMON_DEFAULTS = {"config": None, "overrides": [], "seed": None, "mode": None, "run_dir": ".", "verbose": False}


def build_parser() -> argparse.ArgumentParser:
    common = _add_common(argparse.ArgumentParser(add_help=False))
    parser = _add_common(argparse.ArgumentParser(prog="roesl",
                                                 description="Motion-aware reward search for gait skills."))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("select-frames", parents=[common], help="pick high-motion frames from a frame sequence")
    p.add_argument("source", help="directory of PGM/PNG frames or a manifest file")
    p.add_argument("-k", type=int, default=8, help="number of frames to select")
    p.add_argument("--out", help="write the selection JSON here")

    p = sub.add_parser("run", parents=[common], help="run the three-phase pipeline")
    p.add_argument("--id", dest="run_id", help="run identifier (default: <skill>-seed<seed>)")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run directory")

    p = sub.add_parser("relabel", parents=[common], help="recompute dataset rewards under a spec")
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", required=True, help="reward spec JSON file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-offline", parents=[common], help="train a policy offline on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", help="relabel with this spec first")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("finetune", parents=[common], help="online fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="env-step budget (default pipeline.phase3_steps)")

    p = sub.add_parser("eval", parents=[common], help="fitness and gait label of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--skill", choices=SKILLS, help="skill to score against (default pipeline.skill)")
    p.add_argument("--episodes", type=int, default=1)

    p = sub.add_parser("report", parents=[common], help="DTW, contact and trace reports for checkpoints")
    p.add_argument("--checkpoint", action="append", default=[], help="NAME=PATH or PATH (repeatable)")
    p.add_argument("--out", default="gait_report", help="output directory")
    return parser


def _resolve(root: Path, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_cfg(args) -> cfgmod.RunConfig:
    path = _resolve(Path(args.run_dir), args.config) if args.config else None
    return cfgmod.load(path, args.overrides, args.seed, args.mode)


def _gateway(cfg: cfgmod.RunConfig) -> VlmGateway:
    pc = cfg.pipeline
    if pc.mode == "live" and not os.environ.get(cfg.provider.token_env):
        raise UsageError(f"live mode needs the {cfg.provider.token_env} environment variable")
    return VlmGateway(pc.mode, pc.skill, cfg.mock if pc.mode == "mock" else None,
                      cfg.provider if pc.mode == "live" else None)


def _settings(cfg: cfgmod.RunConfig) -> RunSettings:
    return RunSettings(ppo=cfg.ppo, iql=cfg.iql, env=cfg.env, flow=cfg.flow)


def cmd_select_frames(args, cfg, root):
    seq = load_frames(_resolve(root, args.source))
    if args.k < 1:
        raise UsageError("-k must be >= 1")
    sel, scores = select_from_sequence(seq, args.k, cfg.flow)
    doc = {"indices": list(sel.indices), "tags": list(sel.tags), "target_count": sel.target_count,
           "scores": [float(s) for s in scores]}
    if args.out:
        _resolve(root, args.out).write_text(json.dumps(doc, indent=2) + "\n")
    _emit({k: doc[k] for k in ("indices", "tags")})


def cmd_run(args, cfg, root):
    pc = cfg.pipeline
    run_id = args.run_id or f"{pc.skill}-seed{pc.seed}"
    run_dir = root / "run" / run_id
    res = run_full(pc, _gateway(cfg), _settings(cfg), run_dir=run_dir, resume=args.resume,
                   config_doc=cfg.to_document())
    eff = res.efficiency
    _emit({"run_dir": str(run_dir), "final_fitness": res.summary["fitness"]["pi_fin"],
           "gait": res.summary["gait"], "selected": res.summary["selected"],
           "hybrid_seconds": eff.hybrid_total, "baseline_seconds": eff.baseline_total,
           "reduction_percent": eff.reduction_percent})


def cmd_relabel(args, cfg, root):
    spec = load_spec(_resolve(root, args.spec).read_text())
    ds = load_dataset(_resolve(root, args.dataset))
    out = relabel_dataset(ds, spec)
    write_dataset(out, _resolve(root, args.out))
    _emit({"transitions": len(out), "spec": spec.name, "mean_reward": float(np.mean(out.reward))})


def cmd_train_offline(args, cfg, root):
    ds = load_dataset(_resolve(root, args.dataset))
    if args.spec:
        ds = relabel_dataset(ds, load_spec(_resolve(root, args.spec).read_text()))
    seed = derive_seed(cfg.pipeline.seed, 2)
    policy = train_iql(ds, cfg.iql, seed)
    out = _resolve(root, args.out)
    save_policy(policy, out, {"trainer": "iql", "seed": seed, "config": cfg.document["iql"]})
    _emit({"checkpoint": str(out), "transitions": len(ds), "gradient_steps": cfg.iql.gradient_steps})


def cmd_finetune(args, cfg, root):
    spec = load_spec(_resolve(root, args.spec).read_text())
    factory = EnvFactory(cfg.env)
    res = phase3_finetune(factory, _resolve(root, args.checkpoint), spec, cfg.pipeline, _settings(cfg),
                          budget=args.steps)
    out = _resolve(root, args.out)
    save_policy(res.policy, out, {"trainer": "ppo-finetune", "seed": cfg.pipeline.seed,
                                  "spec": spec.to_document(), "env_steps": res.env_steps})
    _emit({"checkpoint": str(out), "fitness": res.fitness, "env_steps": res.env_steps})


def _policy(cfg, path):
    return load_policy(path, (OBS_DIM, *cfg.ppo.hidden, ACT_DIM))


def cmd_eval(args, cfg, root):
    policy = _policy(cfg, _resolve(root, args.checkpoint))
    skill = args.skill or cfg.pipeline.skill
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    fits, labels = [], []
    for e in range(args.episodes):
        traj = rollout(policy.act, derive_seed(cfg.pipeline.seed, 9, 5, e), cfg.env)
        fits.append(fitness(traj, skill, cfg.env).f)
        g = classify_gait(contact_matrix(traj, cfg.env.eval_window), cfg.env)
        labels.append({"label": g.name, "confidence": g.confidence})
    _emit({"skill": skill, "fitness": fits, "mean_fitness": float(np.mean(fits)), "gait": labels})


def cmd_report(args, cfg, root):
    if not args.checkpoint:
        raise UsageError("report needs at least one --checkpoint")
    seed = derive_seed(cfg.pipeline.seed, 9, 6)
    refs = {f"expert_{s}": rollout(expert_policy(s), seed, cfg.env) for s in SKILLS}
    subjects = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        path = _resolve(root, path)
        subjects[name or path.stem] = rollout(_policy(cfg, path).act, seed, cfg.env)
    out = _resolve(root, args.out)
    summary = write_gait_report(out, refs, subjects, cfg.env.eval_window)
    _emit({"out": str(out), **summary})


COMMANDS = {
    "select-frames": cmd_select_frames,
    "run": cmd_run,
    "relabel": cmd_relabel,
    "train-offline": cmd_train_offline,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def parse_cli(argv: Sequence[str]):
    """Parse ``argv`` into (command, namespace, RunConfig); raises SystemExit(2) on usage errors."""
    parser = build_parser()
    args = parser.parse_args(list(argv))
    for key, value in COMMON_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    if not args.command:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    try:
        cfg = _load_cfg(args)
    except cfgmod.ConfigError as exc:
        parser.exit(2, f"roesl: error: {exc}\n")
    return args.command, args, cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, args, cfg = parse_cli(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = Path(args.run_dir)
    try:
        COMMANDS[command](args, cfg, root)
    except UsageError as exc:
        sys.stderr.write(f"roesl: error: {exc}\n")
        return 2
    except cfgmod.ConfigError as exc:
        sys.stderr.write(f"roesl: error: {exc}\n")
        return 2
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"roesl: {command} failed: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
