"""Whitelisted reward-term language.

A candidate reward is a JSON document::

    {"name": str, "terms": [{"kind": str, "params": {...}, "weight": num}]}

Documents are validated into :class:`RewardSpec` objects and evaluated as a
weighted sum of term values over batches of transitions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .gaitenv import LEG_NAMES, LEG_PAIRS, SkillTarget, circ_dist, decode_obs, get_skill

# kind -> ordered parameter names
TERM_PARAMS: dict[str, tuple[str, ...]] = {
    "velocity_tracking": ("target", "k"),
    "phase_pair": ("i", "j", "offset", "k"),
    "contact_pattern": ("pattern",),
    "height_keep": ("target", "k"),
    "energy_penalty": (),
    "action_smoothness": (),
}

SCHEMA_TEXT = """\
{"name": <string>,
 "terms": [{"kind": <one of velocity_tracking | phase_pair | contact_pattern |
                     height_keep | energy_penalty | action_smoothness>,
            "params": {...},
            "weight": <finite number>}]}

params per kind:
  velocity_tracking  {"target": m/s, "k": sharpness > 0}         exp(-k (v - target)^2)
  phase_pair         {"i": leg, "j": leg, "offset": [0,1), "k": sharpness > 0}
                     exp(-k circ_dist(phase_j - phase_i, offset)^2)
  contact_pattern    {"pattern": [4 values in {0,1}]}           fraction of legs matching
  height_keep        {"target": m, "k": sharpness > 0}          exp(-k (h - target)^2)
  energy_penalty     {}                                          -sum(a^2)
  action_smoothness  {}                                          -sum((a - a_prev)^2)
legs: 0=FL 1=FR 2=RL 3=RR
"""


@dataclass(frozen=True)
class RewardTerm:
    kind: str
    params: tuple[tuple[str, Any], ...]
    weight: float

    def param(self, name: str):
        return dict(self.params)[name]


@dataclass(frozen=True)
class RewardSpec:
    name: str
    terms: tuple[RewardTerm, ...]

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "terms": [
                {"kind": t.kind,
                 "params": {k: list(v) if isinstance(v, tuple) else v for k, v in t.params},
                 "weight": t.weight}
                for t in self.terms
            ],
        }

    def scaled(self, c: float) -> "RewardSpec":
        return RewardSpec(self.name, tuple(RewardTerm(t.kind, t.params, t.weight * c) for t in self.terms))


def serialize(spec: RewardSpec) -> str:
    return json.dumps(spec.to_document())


@dataclass(frozen=True)
class ParseError:
    code: str  # syntax | unknown_kind | arity | non_finite_weight | invalid_param | structure
    location: str
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class ParseReport:
    spec: Optional[RewardSpec] = None
    errors: tuple[ParseError, ...] = ()

    @property
    def ok(self) -> bool:
        return self.spec is not None


class RewardSpecError(ValueError):
    def __init__(self, errors):
        self.errors = tuple(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_param(kind, name, value, loc, errors):
    def bad(msg):
        errors.append(ParseError("invalid_param", loc, f"{msg} at {loc}"))

    if kind == "contact_pattern":
        if (not isinstance(value, list) or len(value) != 4
                or any(v not in (0, 1) or isinstance(v, float) and v not in (0.0, 1.0) for v in value)):
            bad("pattern must be a list of 4 values in {0,1}")
            return None
        return tuple(int(v) for v in value)
    if name in ("i", "j"):
        if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= 3:
            bad(f"leg index must be an integer in 0..3, got {value!r}")
            return None
        return value
    if not _is_number(value) or not math.isfinite(value):
        bad(f"parameter must be a finite number, got {value!r}")
        return None
    if name == "k" and value <= 0:
        bad(f"sharpness must be > 0, got {value!r}")
        return None
    if name == "offset" and not 0 <= value < 1:
        bad(f"offset must be in [0,1), got {value!r}")
        return None
    return float(value)


def validate_document(doc: Any) -> ParseReport:
    errors: list[ParseError] = []
    if not isinstance(doc, dict):
        return ParseReport(errors=(ParseError("structure", "document", "document must be a JSON object"),))
    extra = set(doc) - {"name", "terms"}
    if extra:
        errors.append(ParseError("structure", "document", f"unexpected keys {sorted(extra)} at document"))
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        errors.append(ParseError("structure", "name", "name must be a non-empty string at name"))
    terms = doc.get("terms")
    if not isinstance(terms, list) or not terms:
        errors.append(ParseError("structure", "terms", "terms must be a non-empty list at terms"))
        return ParseReport(errors=tuple(errors))

    parsed = []
    for idx, term in enumerate(terms):
        loc = f"terms[{idx}]"
        if not isinstance(term, dict):
            errors.append(ParseError("structure", loc, f"term must be an object at {loc}"))
            continue
        n_err = len(errors)
        kind = term.get("kind")
        if kind not in TERM_PARAMS:
            errors.append(ParseError("unknown_kind", loc, f"unknown term kind {kind!r} at {loc}"))
        weight = term.get("weight")
        if not _is_number(weight) or not math.isfinite(weight):
            errors.append(ParseError("non_finite_weight", f"{loc}.weight",
                                     f"weight must be a finite number, got {weight!r} at {loc}.weight"))
        params = term.get("params", {})
        if not isinstance(params, dict):
            errors.append(ParseError("structure", f"{loc}.params", f"params must be an object at {loc}.params"))
            continue
        if kind not in TERM_PARAMS:
            continue
        expected = TERM_PARAMS[kind]
        if set(params) != set(expected):
            errors.append(ParseError(
                "arity", f"{loc}.params",
                f"{kind} expects params {list(expected)}, got {sorted(params)} at {loc}.params"))
            continue
        values = []
        for pname in expected:
            values.append((pname, _check_param(kind, pname, params[pname], f"{loc}.params.{pname}", errors)))
        if kind == "phase_pair" and len(errors) == n_err and params["i"] == params["j"]:
            errors.append(ParseError("invalid_param", f"{loc}.params",
                                     f"phase_pair needs two distinct legs at {loc}.params"))
        if len(errors) == n_err:
            parsed.append(RewardTerm(kind, tuple(values), float(weight)))
    if errors:
        return ParseReport(errors=tuple(errors))
    return ParseReport(spec=RewardSpec(name, tuple(parsed)))


def parse_reward(text: str) -> ParseReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        return ParseReport(errors=(ParseError("syntax", f"line {exc.lineno} col {exc.colno}",
                                              f"syntax error: {exc.msg} at line {exc.lineno} col {exc.colno}"),))
    return validate_document(doc)


def load_spec(text: str) -> RewardSpec:
    report = parse_reward(text)
    if not report.ok:
        raise RewardSpecError(report.errors)
    return report.spec


@dataclass
class RewardContext:
    """Batch of quantities a reward term may read (next-state view)."""

    phases: np.ndarray
    contacts: np.ndarray
    velocity: np.ndarray
    height: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray

    @classmethod
    def from_arrays(cls, next_obs, action, prev_action) -> "RewardContext":
        next_obs = np.atleast_2d(np.asarray(next_obs, dtype=float))
        phases, contacts, vel, height = decode_obs(next_obs)
        return cls(phases, contacts, vel, height,
                   np.atleast_2d(np.asarray(action, dtype=float)),
                   np.atleast_2d(np.asarray(prev_action, dtype=float)))


def term_values(term: RewardTerm, ctx: RewardContext) -> np.ndarray:
    p = dict(term.params)
    kind = term.kind
    if kind == "velocity_tracking":
        return np.exp(-p["k"] * (ctx.velocity - p["target"]) ** 2)
    if kind == "phase_pair":
        d = circ_dist(ctx.phases[:, p["j"]] - ctx.phases[:, p["i"]], p["offset"])
        return np.exp(-p["k"] * d**2)
    if kind == "contact_pattern":
        target = np.asarray(p["pattern"], dtype=float)
        return np.mean(np.abs(ctx.contacts - target) < 0.5, axis=1)
    if kind == "height_keep":
        return np.exp(-p["k"] * (ctx.height - p["target"]) ** 2)
    if kind == "energy_penalty":
        return -np.sum(ctx.action**2, axis=1)
    if kind == "action_smoothness":
        return -np.sum((ctx.action - ctx.prev_action) ** 2, axis=1)
    raise ValueError(f"unknown term kind {kind!r}")


def eval_reward_batch(spec: RewardSpec, ctx: RewardContext) -> np.ndarray:
    r = np.zeros(len(ctx.velocity))
    for term in spec.terms:
        r = r + term.weight * term_values(term, ctx)
    return r


def eval_reward(spec: RewardSpec, next_obs, action, prev_action) -> float:
    """Reward of one transition, read from the next observation and actions."""
    return float(eval_reward_batch(spec, RewardContext.from_arrays(next_obs, action, prev_action))[0])


def _term(kind, weight=1.0, **params):
    names = TERM_PARAMS[kind]
    values = []
    for n in names:
        v = params[n]
        values.append((n, tuple(v) if isinstance(v, (list, tuple)) else (v if n in ("i", "j") else float(v))))
    return RewardTerm(kind, tuple(values), float(weight))


def aligned_spec(skill: SkillTarget | str, k_phase: float = 20.0, k_vel: float = 4.0) -> RewardSpec:
    """Reward whose targets match a skill's phase offsets and velocity."""
    if isinstance(skill, str):
        skill = get_skill(skill)
    else:
        get_skill(skill.name)
    off = skill.offsets
    terms = []
    for i, j in LEG_PAIRS:
        terms.append(_term("phase_pair", 1.0, i=i, j=j, offset=(off[j] - off[i]) % 1.0, k=k_phase))
    terms.append(_term("velocity_tracking", 0.5, target=skill.velocity, k=k_vel))
    terms.append(_term("action_smoothness", 0.05))
    return RewardSpec(f"aligned_{skill.name}", tuple(terms))


def zero_spec(name: str = "zero") -> RewardSpec:
    return RewardSpec(name, (_term("velocity_tracking", 0.0, target=0.0, k=1.0),))


def describe_legs() -> str:
    return ", ".join(f"{i}={n}" for i, n in enumerate(LEG_NAMES))
