"""Run configuration: one JSON document with a section per module."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .flowsel import FlowParams
from .gaitenv import DEFAULT_CONSTANTS, SKILLS, GaitConstants
from .iql import IqlConfig
from .pipeline import PipelineConfig
from .ppo import PpoConfig
from .rewardlang import RewardSpec, _term, aligned_spec, validate_document, zero_spec
from .vlmgw import MockConfig, PoolEntry, ProviderConfig, reversed_spec


class ConfigError(ValueError):
    pass


SECTIONS = {
    "pipeline": PipelineConfig,
    "ppo": PpoConfig,
    "iql": IqlConfig,
    "flow": FlowParams,
    "env": GaitConstants,
    "provider": ProviderConfig,
}

DEFAULT_POOL = ("aligned", "reversed", "others", "zero")


def _section_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_document() -> dict:
    doc = {name: _section_defaults(cls) for name, cls in SECTIONS.items()}
    doc["mock"] = {"seed": None, "pool": list(DEFAULT_POOL), "sabotage_fraction": 0.0, "draw": "permute"}
    return doc


def _coerce(cls, name: str, value, path: str):
    default = getattr(cls(), name)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path} must be a string or null")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    return value


def _pool_entry(item, skill: str, path: str) -> list[PoolEntry]:
    perturb = 0.0
    if isinstance(item, dict) and "template" in item:
        extra = set(item) - {"template", "perturb"}
        if extra:
            raise ConfigError(f"{path}: unknown key {sorted(extra)[0]}")
        perturb = item.get("perturb", 0.0)
        if isinstance(perturb, bool) or not isinstance(perturb, (int, float)) or perturb < 0:
            raise ConfigError(f"{path}.perturb must be a number >= 0")
        item = item["template"]
    if isinstance(item, dict):
        report = validate_document(item)
        if not report.ok:
            raise ConfigError(f"{path}: {report.errors[0].message}")
        return [PoolEntry(report.spec, float(perturb))]
    if not isinstance(item, str):
        raise ConfigError(f"{path} must be a template name or a reward document")
    name, _, arg = item.partition(":")
    target = arg or skill
    if arg and arg not in SKILLS:
        raise ConfigError(f"{path}: unknown skill {arg!r}")
    if name == "aligned":
        specs = [aligned_spec(target)]
    elif name == "reversed":
        specs = [reversed_spec(target)]
    elif name == "others":
        specs = [aligned_spec(s) for s in SKILLS if s != skill]
    elif name == "zero":
        specs = [zero_spec()]
    elif name == "energy":
        specs = [RewardSpec("energy", (_term("energy_penalty", 1.0),))]
    else:
        raise ConfigError(f"{path}: unknown template {item!r}")
    return [PoolEntry(s, float(perturb)) for s in specs]


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    iql: IqlConfig = field(default_factory=IqlConfig)
    flow: FlowParams = field(default_factory=FlowParams)
    env: GaitConstants = DEFAULT_CONSTANTS
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    mock: MockConfig = field(default_factory=MockConfig)
    document: dict = field(default_factory=default_document)
    source: Optional[str] = None
    overrides: tuple[str, ...] = ()

    def to_document(self) -> dict:
        return copy.deepcopy(self.document)


def _apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"invalid override path {path!r}; expected section.key")
    section, key = parts
    if section not in doc:
        raise ConfigError(f"unknown config section {section!r} in override {path}")
    if key not in doc[section]:
        raise ConfigError(f"unknown config key {path}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc[section][key] = value


def build(document: Optional[dict] = None, overrides: Sequence[str] = (), seed: Optional[int] = None,
          mode: Optional[str] = None, source: Optional[str] = None) -> RunConfig:
    """Merge ``document`` and ``overrides`` over defaults and validate every section."""
    doc = default_document()
    if document is not None:
        if not isinstance(document, dict):
            raise ConfigError("config document must be a JSON object")
        for section, values in document.items():
            if section not in doc:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in doc[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                doc[section][key] = value
    for item in overrides:
        _apply_override(doc, item)
    if seed is not None:
        doc["pipeline"]["seed"] = seed
    if mode is not None:
        doc["pipeline"]["mode"] = mode

    built = {}
    for section, cls in SECTIONS.items():
        kwargs = {k: _coerce(cls, k, v, f"{section}.{k}") for k, v in doc[section].items()}
        obj = cls(**kwargs)
        try:
            obj.validate(section)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        built[section] = obj
    if built["ppo"].total_steps % built["ppo"].num_envs:
        raise ConfigError("ppo.total_steps must be a multiple of ppo.num_envs")
    for key in ("phase1_steps", "phase3_steps"):
        if getattr(built["pipeline"], key) % built["ppo"].num_envs:
            raise ConfigError(f"pipeline.{key} must be a multiple of ppo.num_envs")

    m = doc["mock"]
    skill = built["pipeline"].skill
    if not isinstance(m["pool"], list) or not m["pool"]:
        raise ConfigError("mock.pool must be a non-empty list")
    pool = []
    for i, item in enumerate(m["pool"]):
        pool += _pool_entry(item, skill, f"mock.pool[{i}]")
    mseed = m["seed"] if m["seed"] is not None else built["pipeline"].seed
    if isinstance(mseed, bool) or not isinstance(mseed, int):
        raise ConfigError("mock.seed must be an integer or null")
    sab = m["sabotage_fraction"]
    if isinstance(sab, bool) or not isinstance(sab, (int, float)):
        raise ConfigError("mock.sabotage_fraction must be a number")
    mock = MockConfig(mseed, tuple(pool), float(sab), m["draw"])
    try:
        mock.validate("mock")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(mock=mock, document=doc, source=source, overrides=tuple(overrides), **built)


def load(path=None, overrides: Sequence[str] = (), seed: Optional[int] = None,
         mode: Optional[str] = None) -> RunConfig:
    document = None
    if path is not None:
        p = Path(path)
        try:
            document = json.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return build(document, overrides, seed, mode, str(path) if path else None)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_document(), indent=2, sort_keys=True) + "\n"

