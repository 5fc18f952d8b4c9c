"""Three-phase reward search.

Phase 1 trains a few VLM-proposed rewards online and keeps every labeled
transition. Phase 2 scores many more proposals cheaply by relabeling that
dataset and learning offline, touching the environment only for one
evaluation rollout per candidate. Phase 3 fine-tunes the winner online.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import OfflineDataset, append_dataset, load_dataset, relabel_rewards, write_dataset
from .evalkit import classify_gait, contact_matrix
from .flowsel import FlowParams, FrameSequence, load_frames, select_from_sequence
from .gaitenv import (ACT_DIM, DEFAULT_CONSTANTS, OBS_DIM, SKILLS, EnvFactory, GaitConstants, Trajectory,
                      expert_policy, fitness, render_frames, rollout)
from .iql import IqlConfig, train_iql
from .nn import CheckpointError, GaussianPolicy, encode_policy, load_policy, save_policy
from .ppo import PpoConfig, TrainingDivergence, train_ppo
from .rewardlang import RewardContext, RewardSpec, eval_reward_batch
from .vlmgw import (AllCandidatesFailed, EvalResult, PromptBundle, VlmGateway, best_index, build_prompt,
                    default_env_code_path)

log = logging.getLogger(__name__)

PHASE_CODES = {"p1": 1, "p2": 2, "p3": 3, "base": 4}
EVAL_KEY = 9


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    n1: int = 1
    n2: int = 2
    k1: int = 3
    k2: int = 6
    phase1_steps: int = 64_000  # env steps per Phase 1 candidate
    phase2_steps: int = 3_000  # offline gradient steps per Phase 2 candidate
    phase3_steps: int = 64_000  # env steps of online fine-tuning
    seed: int = 0
    skill: str = "trot"
    mode: str = "mock"
    baseline: bool = False
    demo_frames: Optional[str] = None  # frame directory or manifest; None renders an expert demo
    demo_steps: int = 100
    select_k: int = 8

    def validate(self, prefix: str = "pipeline") -> None:
        for name in ("n1", "n2", "k1", "k2", "demo_steps", "select_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{prefix}.{name} must be >= 1")
        for name in ("phase1_steps", "phase2_steps", "phase3_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{prefix}.{name} must be > 0")
        if self.skill not in SKILLS:
            raise ValueError(f"{prefix}.skill must be one of {', '.join(SKILLS)}")
        if self.mode not in ("mock", "live"):
            raise ValueError(f"{prefix}.mode must be 'mock' or 'live'")


def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base), *(int(k) for k in keys)]).generate_state(1)[0])


class TickClock:
    """Deterministic stand-in for a wall clock: each call advances by ``tick``."""

    def __init__(self, tick: float = 1.0):
        self.tick = tick
        self.now = 0.0

    def __call__(self) -> float:
        self.now += self.tick
        return self.now


# ------------------------------------------------------------------ records

@dataclass
class CandidateRecord:
    cid: str
    phase: str
    iteration: int
    index: int
    spec: RewardSpec
    policy: Optional[GaussianPolicy] = None
    rollout: Optional[Trajectory] = None
    score: float = float("nan")
    seconds: float = 0.0
    failed: bool = False
    error: str = ""
    fitness: float = float("nan")
    env_steps: int = 0

    def summary(self) -> dict:
        return {"candidate": self.cid, "phase": self.phase, "iteration": self.iteration, "index": self.index,
                "spec": self.spec.name, "score": None if self.failed else self.score,
                "fitness": None if self.failed else self.fitness, "failed": self.failed,
                "error": self.error}


def select_best(records: Sequence[CandidateRecord]) -> int:
    """Index of the highest-scoring non-failed record; lowest index wins ties."""
    scores = [float("nan") if r.failed else r.score for r in records]
    try:
        return best_index(scores)
    except ValueError:
        raise PipelineError("all candidates failed; nothing to select") from None


@dataclass
class PhaseReport:
    phase: str
    records: list[CandidateRecord] = field(default_factory=list)
    winners: list[str] = field(default_factory=list)  # one per completed iteration
    failures: list[dict] = field(default_factory=list)
    aborted: list[int] = field(default_factory=list)
    vlm_seconds: float = 0.0
    env_steps: int = 0
    fallbacks: int = 0

    def to_dict(self) -> dict:
        return {"phase": self.phase, "candidates": [r.summary() for r in self.records],
                "winners": self.winners, "failures": self.failures, "aborted_iterations": self.aborted,
                "env_steps": self.env_steps, "evaluator_fallbacks": self.fallbacks}


@dataclass
class PhaseOutcome:
    spec: RewardSpec
    policy: GaussianPolicy
    report: PhaseReport
    dataset: Optional[OfflineDataset] = None
    winner: Optional[CandidateRecord] = None


@dataclass
class FinetuneResult:
    policy: GaussianPolicy
    fitness: float
    rollout: Trajectory
    seconds: float
    env_steps: int


@dataclass
class EfficiencyReport:
    rows: list[tuple[str, int, str, float]]  # (phase, iteration, candidate, seconds)
    vlm_seconds: dict[str, float] = field(default_factory=dict)

    def total(self, phases: Sequence[str]) -> float:
        return float(sum(s for p, _, _, s in self.rows if p in phases))

    def mean(self, phase: str) -> Optional[float]:
        vals = [s for p, _, _, s in self.rows if p == phase]
        return float(np.mean(vals)) if vals else None

    @property
    def hybrid_total(self) -> float:
        return self.total(("p1", "p2", "p3"))

    @property
    def baseline_total(self) -> Optional[float]:
        if not any(p == "base" for p, *_ in self.rows):
            return None
        return self.total(("p1", "base", "p3"))

    @property
    def reduction_percent(self) -> Optional[float]:
        base = self.baseline_total
        return None if base is None else (base - self.hybrid_total) / base * 100.0

    @property
    def per_candidate_ratio(self) -> Optional[float]:
        """Mean Phase 2 candidate time over mean all-online candidate time."""
        h, b = self.mean("p2"), self.mean("base")
        return None if h is None or b is None else h / b

    @property
    def per_candidate_reduction_percent(self) -> Optional[float]:
        r = self.per_candidate_ratio
        return None if r is None else (1.0 - r) * 100.0

    def to_dict(self) -> dict:
        return {"rows": [{"phase": p, "iteration": i, "candidate": c, "seconds": s} for p, i, c, s in self.rows],
                "per_phase_totals": {p: self.total((p,)) for p in ("p1", "p2", "p3", "base")},
                "hybrid_total": self.hybrid_total, "baseline_total": self.baseline_total,
                "reduction_percent": self.reduction_percent,
                "per_candidate_hybrid_mean": self.mean("p2"), "per_candidate_baseline_mean": self.mean("base"),
                "per_candidate_reduction_percent": self.per_candidate_reduction_percent,
                "vlm_seconds": self.vlm_seconds}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "iteration", "candidate", "seconds"])
        for p, i, c, s in self.rows:
            w.writerow([p, i, c, repr(float(s))])
        return buf.getvalue()


# ------------------------------------------------------------------ run directory

class RunStore:
    """Artifacts of one run under ``root``."""

    def __init__(self, root, resume: bool = False):
        self.root = Path(root)
        if self.root.exists() and any(self.root.iterdir()) and not resume:
            raise PipelineError(f"run directory {self.root} is not empty; pass resume to continue it")
        (self.root / "candidates").mkdir(parents=True, exist_ok=True)
        (self.root / "report").mkdir(parents=True, exist_ok=True)

    @property
    def dataset_path(self) -> Path:
        return self.root / "dataset.jsonl"

    def mark(self, status: str, **extra) -> None:
        _write_json(self.root / "state.json", {"status": status, **extra})

    def state(self) -> dict:
        p = self.root / "state.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def candidate_dir(self, cid: str) -> Path:
        d = self.root / "candidates" / cid
        d.mkdir(parents=True, exist_ok=True)
        return d

    def save_candidate(self, rec: CandidateRecord) -> None:
        d = self.candidate_dir(rec.cid)
        _write_json(d / "spec.json", rec.spec.to_document())
        if rec.policy is not None:
            save_policy(rec.policy, d / "ckpt.bin")
        if rec.rollout is not None:
            write_dataset(rollout_records(rec.rollout, rec.spec, rec.cid, rec.iteration), d / "rollout.jsonl")
        _write_json(d / "score.json", rec.summary())


def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def rollout_records(traj: Trajectory, spec: RewardSpec, cid: str, iteration: int) -> OfflineDataset:
    rewards = eval_reward_batch(spec, RewardContext.from_arrays(traj.next_obs, traj.actions, traj.prev_actions))
    return OfflineDataset.from_arrays(traj.obs, traj.actions, traj.prev_actions, rewards, traj.next_obs,
                                      traj.dones, cid, iteration)


# ------------------------------------------------------------------ settings

@dataclass
class RunSettings:
    """Everything a phase needs beyond :class:`PipelineConfig`."""

    ppo: PpoConfig = field(default_factory=PpoConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    env: GaitConstants = DEFAULT_CONSTANTS
    flow: FlowParams = field(default_factory=FlowParams)
    clock: Callable[[], float] = time.perf_counter
    store: Optional[RunStore] = None
    bundle: Optional[PromptBundle] = None
    demo: Optional[FrameSequence] = None
    after_candidate: Optional[Callable[[CandidateRecord], None]] = None  # test hook

    @property
    def policy_sizes(self) -> tuple[int, ...]:
        return (OBS_DIM, *self.ppo.hidden, ACT_DIM)


def _ppo_for(settings: RunSettings, steps: int) -> PpoConfig:
    return replace(settings.ppo, total_steps=int(steps))


def equal_budget_env_steps(gradient_steps: int, ppo: PpoConfig) -> int:
    """Env steps at which PPO makes at least ``gradient_steps`` minibatch updates."""
    per_iter = ppo.num_envs * ppo.rollout_length
    updates = ppo.epochs * math.ceil(per_iter / ppo.minibatch_size)
    return math.ceil(gradient_steps / updates) * per_iter


def _eval_seed(config: PipelineConfig, phase: str, iteration: int) -> int:
    return derive_seed(config.seed, EVAL_KEY, PHASE_CODES[phase], iteration)


def _generate(source: VlmGateway, settings: RunSettings, k: int, phase: str, n: int, report: PhaseReport):
    t0 = settings.clock()  # the injected clock, so tick-clock runs stay byte-identical
    try:
        gen = source.generate(settings.bundle, k, (PHASE_CODES[phase], n))
    except AllCandidatesFailed as exc:
        report.failures += [{"iteration": n, **f.to_dict()} for f in exc.failures]
        report.aborted.append(n)
        log.error("%s iteration %d aborted: %s", phase, n, exc)
        return None
    report.vlm_seconds += settings.clock() - t0
    report.failures += [{"iteration": n, **f.to_dict()} for f in gen.failures]
    return gen


def _finish_iteration(source: VlmGateway, settings: RunSettings, recs: list[CandidateRecord],
                      report: PhaseReport, n: int) -> Optional[CandidateRecord]:
    live = [r for r in recs if not r.failed]
    if not live:
        report.aborted.append(n)
        return None
    t0 = settings.clock()
    res: EvalResult = source.evaluate(settings.demo, [r.rollout for r in live])
    share = (settings.clock() - t0) / len(live)
    report.fallbacks += int(res.fallback)
    for r, s in zip(live, res.scores):
        r.score = float(s)
        r.seconds += share
    win = live[res.best]
    report.winners.append(win.cid)
    if settings.store is not None:
        for r in recs:
            settings.store.save_candidate(r)
    return win


def _run_candidate(rec: CandidateRecord, settings: RunSettings, train: Callable[[], GaussianPolicy],
                   factory: EnvFactory, eval_seed: int, skill: str) -> None:
    t0 = settings.clock()
    try:
        rec.policy = train()
    except TrainingDivergence as exc:
        rec.failed, rec.error = True, f"training diverged: {exc}"
        rec.seconds = max(settings.clock() - t0, 1e-9)
        log.warning("candidate %s failed: %s", rec.cid, rec.error)
        return
    before = factory.steps
    rec.rollout = rollout(rec.policy.act, eval_seed, factory.const, factory.counter)
    rec.env_steps += factory.steps - before
    rec.seconds = max(settings.clock() - t0, 1e-9)
    rec.fitness = fitness(rec.rollout, skill, factory.const).f


# ------------------------------------------------------------------ phases

def phase1_collect(factory: EnvFactory, source: VlmGateway, config: PipelineConfig,
                   settings: Optional[RunSettings] = None,
                   dataset: Optional[OfflineDataset] = None) -> PhaseOutcome:
    """Online training of K1 proposals per iteration; every transition joins the dataset."""
    config.validate()
    settings = settings or RunSettings()
    data = dataset if dataset is not None else OfflineDataset()
    report = PhaseReport("p1")
    winner = None
    for n in range(config.n1):
        gen = _generate(source, settings, config.k1, "p1", n, report)
        if gen is None:
            continue
        eval_seed = _eval_seed(config, "p1", n)
        recs = []
        for slot, spec in zip(gen.source_index, gen.specs):
            rec = CandidateRecord(f"p1-{n}-{slot}", "p1", n, slot, spec)
            box = {}

            def train(rec=rec, spec=spec, box=box):
                res = train_ppo(factory, spec, _ppo_for(settings, config.phase1_steps),
                                derive_seed(config.seed, 1, n, rec.index), candidate=rec.cid, iteration=n)
                box["res"] = res
                return res.policy

            _run_candidate(rec, settings, train, factory, eval_seed, config.skill)
            if "res" in box:
                rec.env_steps += box["res"].env_steps
                fresh = data.missing_from(box["res"].transitions)
                data.extend(fresh)
                if settings.store is not None:
                    append_dataset(fresh, settings.store.dataset_path)
            recs.append(rec)
            report.env_steps += rec.env_steps
            if settings.after_candidate:
                settings.after_candidate(rec)
        report.records += recs
        win = _finish_iteration(source, settings, recs, report, n)
        winner = win or winner
    if winner is None:
        raise PipelineError("phase 1 produced no usable candidate")
    return PhaseOutcome(winner.spec, winner.policy, report, data, winner)


def phase2_optimize(dataset: OfflineDataset, factory: EnvFactory, source: VlmGateway, config: PipelineConfig,
                    settings: Optional[RunSettings] = None) -> PhaseOutcome:
    """Relabel the dataset per proposal and learn offline; one evaluation rollout each."""
    config.validate()
    if dataset is None or len(dataset) == 0:
        raise PipelineError("phase 2 needs a non-empty dataset")
    settings = settings or RunSettings()
    iql = replace(settings.iql, gradient_steps=config.phase2_steps, hidden=settings.ppo.hidden)
    report = PhaseReport("p2")
    winner = None
    for n in range(config.n2):
        gen = _generate(source, settings, config.k2, "p2", n, report)
        if gen is None:
            continue
        eval_seed = _eval_seed(config, "p2", n)
        recs = []
        steps_before = factory.steps
        for slot, spec in zip(gen.source_index, gen.specs):
            rec = CandidateRecord(f"p2-{n}-{slot}", "p2", n, slot, spec)
            seed = derive_seed(config.seed, 2, n, slot)

            def train(spec=spec, seed=seed):
                before = factory.steps
                pol = train_iql(dataset, iql, seed, rewards=relabel_rewards(dataset, spec))
                if factory.steps != before:
                    raise PipelineError("offline training touched the environment")
                return pol

            _run_candidate(rec, settings, train, factory, eval_seed, config.skill)
            recs.append(rec)
            if settings.after_candidate:
                settings.after_candidate(rec)
        used = factory.steps - steps_before
        expected = sum(1 for r in recs if not r.failed) * factory.const.episode_length
        if used != expected:
            raise PipelineError(f"phase 2 iteration {n} used {used} env steps, expected {expected}")
        report.env_steps += used
        report.records += recs
        win = _finish_iteration(source, settings, recs, report, n)
        winner = win or winner
    if winner is None:
        raise PipelineError("phase 2 produced no usable candidate")
    return PhaseOutcome(winner.spec, winner.policy, report, dataset, winner)


def baseline_online(factory: EnvFactory, source: VlmGateway, config: PipelineConfig,
                    settings: Optional[RunSettings] = None) -> PhaseOutcome:
    """All-online comparator: each Phase 2 proposal gets its own PPO run at an equal update budget."""
    config.validate()
    settings = settings or RunSettings()
    steps = equal_budget_env_steps(config.phase2_steps, settings.ppo)
    report = PhaseReport("base")
    winner = None
    for n in range(config.n2):
        # same round key as Phase 2, so the comparator sees the same proposals
        gen = _generate(source, settings, config.k2, "p2", n, report)
        if gen is None:
            continue
        eval_seed = _eval_seed(config, "p2", n)
        recs = []
        for slot, spec in zip(gen.source_index, gen.specs):
            rec = CandidateRecord(f"base-{n}-{slot}", "base", n, slot, spec)

            def train(spec=spec, rec=rec):
                return train_ppo(factory, spec, _ppo_for(settings, steps), derive_seed(config.seed, 4, n, rec.index),
                                 candidate=rec.cid, iteration=n, collect=False).policy

            _run_candidate(rec, settings, train, factory, eval_seed, config.skill)
            recs.append(rec)
        report.records += recs
        win = _finish_iteration(source, settings, recs, report, n)
        winner = win or winner
    if winner is None:
        raise PipelineError("baseline produced no usable candidate")
    return PhaseOutcome(winner.spec, winner.policy, report, None, winner)


def phase3_finetune(factory: EnvFactory, policy, spec: RewardSpec, config: PipelineConfig,
                    settings: Optional[RunSettings] = None, budget: Optional[int] = None) -> FinetuneResult:
    """PPO initialised from ``policy`` (a GaussianPolicy or checkpoint path) under ``spec``."""
    settings = settings or RunSettings()
    sizes = settings.policy_sizes
    if isinstance(policy, (str, Path)):
        policy = load_policy(policy, sizes)
    elif tuple(policy.mean.sizes) != sizes:
        raise CheckpointError(f"checkpoint layer sizes {tuple(policy.mean.sizes)} do not match config {sizes}")
    steps = config.phase3_steps if budget is None else int(budget)
    t0 = settings.clock()
    before = factory.steps
    if steps == 0:
        final = policy.copy()
    else:
        final = train_ppo(factory, spec, _ppo_for(settings, steps), derive_seed(config.seed, 3, 0, 0),
                          candidate="p3-0-0", iteration=0, init=policy, collect=False).policy
    traj = rollout(final.act, _eval_seed(config, "p3", 0), factory.const, factory.counter)
    seconds = max(settings.clock() - t0, 1e-9)
    return FinetuneResult(final, fitness(traj, config.skill, factory.const).f, traj, seconds, factory.steps - before)


# ------------------------------------------------------------------ full run

def demo_sequence(config: PipelineConfig, env: GaitConstants = DEFAULT_CONSTANTS) -> FrameSequence:
    if config.demo_frames:
        return load_frames(config.demo_frames)
    traj = rollout(expert_policy(config.skill), derive_seed(config.seed, 7), env, steps=config.demo_steps)
    return render_frames(traj, const=env)


@dataclass
class RunResult:
    policy: GaussianPolicy
    efficiency: EfficiencyReport
    summary: dict
    phases: dict[str, PhaseReport]
    run_dir: Optional[Path] = None


def run_full(config: PipelineConfig, gateway: VlmGateway, settings: Optional[RunSettings] = None,
             run_dir=None, resume: bool = False, config_doc: Optional[dict] = None) -> RunResult:
    """Phases 1 -> 2 -> 3, writing artifacts under ``run_dir`` when given."""
    config.validate()
    settings = settings or RunSettings()
    if run_dir is not None:
        settings.store = RunStore(run_dir, resume=resume)
        _write_json(settings.store.root / "config.json", config_doc if config_doc is not None else {
            "pipeline": config.__dict__})
        settings.store.mark("running")
    store = settings.store
    stage = "setup"
    try:
        demo = settings.demo or demo_sequence(config, settings.env)
        selection, _ = select_from_sequence(demo, config.select_k, settings.flow)
        settings.demo = demo
        settings.bundle = settings.bundle or build_prompt(default_env_code_path(), selection, demo, config.skill)
        factory = EnvFactory(settings.env)

        stage = "p1"
        existing = None
        if store is not None and resume and store.dataset_path.exists():
            existing = load_dataset(store.dataset_path)
        p1 = phase1_collect(factory, gateway, config, settings, existing)
        if store is not None:
            save_policy(p1.policy, store.root / "pi_sel.bin")

        stage = "p2"
        p2 = phase2_optimize(p1.dataset, factory, gateway, config, settings)
        phases = {"p1": p1.report, "p2": p2.report}
        best = p2
        if config.baseline:
            stage = "base"
            base = baseline_online(factory, gateway, config, settings)
            phases["base"] = base.report
            best = base
        if store is not None:
            save_policy(best.policy, store.root / "pi_bst.bin")

        stage = "p3"
        fin = phase3_finetune(factory, best.policy, best.spec, config, settings)
        rows = [(r.phase, r.iteration, r.cid, r.seconds) for rep in phases.values() for r in rep.records]
        rows.append(("p3", 0, "p3-0-0", fin.seconds))
        eff = EfficiencyReport(rows, {p: rep.vlm_seconds for p, rep in phases.items()})
        gait = classify_gait(contact_matrix(fin.rollout, settings.env.eval_window), settings.env)
        summary = {
            "skill": config.skill, "mode": config.mode, "seed": config.seed, "baseline": config.baseline,
            "dataset_size": len(p1.dataset),
            "selected": {"phase1": p1.winner.cid, "phase2": p2.winner.cid,
                         "final_source": best.winner.cid},
            "specs": {"phase1": p1.spec.name, "best": best.spec.name},
            "fitness": {"pi_sel": p1.winner.fitness, "pi_bst": best.winner.fitness, "pi_fin": fin.fitness},
            "gait": {"label": gait.name, "confidence": gait.confidence},
            "phases": {p: rep.to_dict() for p, rep in phases.items()},
            "selection": list(selection.indices),
        }
        if store is not None:
            d = store.candidate_dir("p3-0-0")
            _write_json(d / "spec.json", best.spec.to_document())
            save_policy(fin.policy, d / "ckpt.bin")
            write_dataset(rollout_records(fin.rollout, best.spec, "p3-0-0", 0), d / "rollout.jsonl")
            _write_json(d / "score.json", {"candidate": "p3-0-0", "fitness": fin.fitness})
            (store.root / "report" / "efficiency.csv").write_text(eff.to_csv())
            _write_json(store.root / "report" / "efficiency.json", eff.to_dict())
            _write_json(store.root / "report" / "summary.json", summary)
            store.mark("complete")
        return RunResult(fin.policy, eff, summary, phases, store.root if store else None)
    except BaseException as exc:
        if store is not None:
            store.mark("interrupted", stage=stage, error=f"{type(exc).__name__}: {exc}")
        raise


def policy_digest(policy: GaussianPolicy) -> str:
    import hashlib

    return hashlib.sha256(encode_policy(policy)).hexdigest()
