"""Offline transition datasets and their JSON-lines file format.

File layout: the first line is a version header, every following line is one
transition::

    {"format": "roesl-dataset", "version": 1}
    {"obs": [...14], "action": [...4], "reward": r, "next_obs": [...14],
     "done": false, "candidate": "p1-0-0", "iter": 0, "step": 0,
     "prev_action": [...4]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .gaitenv import ACT_DIM, OBS_DIM
from .rewardlang import RewardContext, RewardSpec, eval_reward_batch

FORMAT_NAME = "roesl-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    source_candidate: str
    prev_action: np.ndarray
    iteration: int = 0
    step: int = 0


@dataclass
class OfflineDataset:
    obs: np.ndarray = field(default_factory=lambda: np.zeros((0, OBS_DIM)))
    action: np.ndarray = field(default_factory=lambda: np.zeros((0, ACT_DIM)))
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros((0, ACT_DIM)))
    reward: np.ndarray = field(default_factory=lambda: np.zeros(0))
    next_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, OBS_DIM)))
    done: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    candidate: list[str] = field(default_factory=list)
    iteration: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    version: int = FORMAT_VERSION

    _columns = ("obs", "action", "prev_action", "reward", "next_obs", "done", "iteration", "step")

    def __len__(self) -> int:
        return len(self.reward)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.obs[i], self.action[i], float(self.reward[i]), self.next_obs[i],
                          bool(self.done[i]), self.candidate[i], self.prev_action[i],
                          int(self.iteration[i]), int(self.step[i]))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def keys(self) -> list[tuple[int, str, int]]:
        return list(zip(self.iteration.tolist(), self.candidate, self.step.tolist()))

    def extend(self, other: "OfflineDataset") -> "OfflineDataset":
        """Append ``other``; records whose (iter, candidate, step) key is already present are skipped."""
        if len(other) == 0:
            return self
        existing = set(self.keys())
        keep = np.array([k not in existing for k in other.keys()], dtype=bool)
        if not keep.any():
            return self
        for name in self._columns:
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)[keep]]))
        self.candidate = self.candidate + [c for c, k in zip(other.candidate, keep) if k]
        return self

    def subset(self, mask) -> "OfflineDataset":
        mask = np.asarray(mask, dtype=bool)
        return OfflineDataset(**{n: getattr(self, n)[mask] for n in self._columns},
                              candidate=[c for c, k in zip(self.candidate, mask) if k], version=self.version)

    def missing_from(self, other: "OfflineDataset") -> "OfflineDataset":
        """Records of ``other`` whose key is not yet in this dataset."""
        existing = set(self.keys())
        return other.subset([k not in existing for k in other.keys()])

    def copy(self) -> "OfflineDataset":
        return OfflineDataset(**{n: getattr(self, n).copy() for n in self._columns},
                              candidate=list(self.candidate), version=self.version)

    def equals(self, other: "OfflineDataset") -> bool:
        return (self.candidate == other.candidate
                and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in self._columns))

    @classmethod
    def from_arrays(cls, obs, action, prev_action, reward, next_obs, done, candidate: str,
                    iteration: int = 0, step_offset: int = 0) -> "OfflineDataset":
        n = len(reward)
        return cls(np.asarray(obs, float).reshape(n, OBS_DIM),
                   np.asarray(action, float).reshape(n, ACT_DIM),
                   np.asarray(prev_action, float).reshape(n, ACT_DIM),
                   np.asarray(reward, float).reshape(n),
                   np.asarray(next_obs, float).reshape(n, OBS_DIM),
                   np.asarray(done, bool).reshape(n),
                   [candidate] * n,
                   np.full(n, iteration, dtype=np.int64),
                   np.arange(step_offset, step_offset + n, dtype=np.int64))

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(self), size=batch_size)
        return (self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
                self.done[idx])


def relabel_rewards(dataset: OfflineDataset, spec: RewardSpec) -> np.ndarray:
    """Rewards of every transition under ``spec``; the dataset itself is not touched."""
    if len(dataset) == 0:
        raise ValueError("cannot relabel an empty dataset")
    ctx = RewardContext.from_arrays(dataset.next_obs, dataset.action, dataset.prev_action)
    return eval_reward_batch(spec, ctx)


def relabel_dataset(dataset: OfflineDataset, spec: RewardSpec) -> OfflineDataset:
    """Copy of ``dataset`` with every reward recomputed under ``spec``."""
    rewards = relabel_rewards(dataset, spec)
    out = dataset.copy()
    out.reward = rewards
    return out


# ------------------------------------------------------------------ file format

def _line(ds: OfflineDataset, i: int) -> str:
    return json.dumps({
        "obs": ds.obs[i].tolist(),
        "action": ds.action[i].tolist(),
        "reward": float(ds.reward[i]),
        "next_obs": ds.next_obs[i].tolist(),
        "done": bool(ds.done[i]),
        "candidate": ds.candidate[i],
        "iter": int(ds.iteration[i]),
        "step": int(ds.step[i]),
        "prev_action": ds.prev_action[i].tolist(),
    })


def header_line() -> str:
    return json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION})


def write_dataset(ds: OfflineDataset, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(header_line() + "\n")
        for i in range(len(ds)):
            fh.write(_line(ds, i) + "\n")
    tmp.replace(path)


def append_dataset(ds: OfflineDataset, path) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(header_line() + "\n")
        for i in range(len(ds)):
            fh.write(_line(ds, i) + "\n")


def _vector(rec, key, width, lineno):
    v = rec.get(key)
    if (not isinstance(v, list) or len(v) != width
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v)):
        raise DatasetFormatError(f"line {lineno}: field {key!r} must be a list of {width} finite numbers")
    return v


def iter_transitions(path) -> Iterator[Transition]:
    """Stream transitions from a dataset file, validating each line as it is read."""
    with open(path) as fh:
        first = fh.readline()
        try:
            head = json.loads(first)
        except json.JSONDecodeError:
            raise DatasetFormatError("line 1: missing or corrupt version header") from None
        if not isinstance(head, dict) or head.get("format") != FORMAT_NAME:
            raise DatasetFormatError("line 1: missing or corrupt version header")
        if head.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(
                f"line 1: dataset version {head.get('version')!r} not supported (expected {FORMAT_VERSION})")
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: corrupt record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: record must be an object")
            obs = _vector(rec, "obs", OBS_DIM, lineno)
            act = _vector(rec, "action", ACT_DIM, lineno)
            nxt = _vector(rec, "next_obs", OBS_DIM, lineno)
            prev = _vector(rec, "prev_action", ACT_DIM, lineno) if "prev_action" in rec else [0.0] * ACT_DIM
            reward = rec.get("reward")
            if not isinstance(reward, (int, float)) or isinstance(reward, bool) or not math.isfinite(reward):
                raise DatasetFormatError(f"line {lineno}: field 'reward' must be a finite number")
            if not isinstance(rec.get("done"), bool):
                raise DatasetFormatError(f"line {lineno}: field 'done' must be a boolean")
            if not isinstance(rec.get("candidate"), str):
                raise DatasetFormatError(f"line {lineno}: field 'candidate' must be a string")
            for key in ("iter", "step"):
                if not isinstance(rec.get(key), int) or isinstance(rec.get(key), bool):
                    raise DatasetFormatError(f"line {lineno}: field {key!r} must be an integer")
            yield Transition(np.array(obs, float), np.array(act, float), float(reward),
                             np.array(nxt, float), rec["done"], rec["candidate"],
                             np.array(prev, float), rec["iter"], rec["step"])


def load_dataset(path) -> OfflineDataset:
    records = list(iter_transitions(path))
    if not records:
        return OfflineDataset()
    return OfflineDataset(
        np.stack([t.obs for t in records]),
        np.stack([t.action for t in records]),
        np.stack([t.prev_action for t in records]),
        np.array([t.reward for t in records]),
        np.stack([t.next_obs for t in records]),
        np.array([t.done for t in records], dtype=bool),
        [t.source_candidate for t in records],
        np.array([t.iteration for t in records], dtype=np.int64),
        np.array([t.step for t in records], dtype=np.int64),
    )
