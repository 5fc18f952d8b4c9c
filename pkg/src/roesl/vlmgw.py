"""Gateway to the vision-language model that writes and judges reward candidates.

Two backends share one interface:

* ``mock``: a seeded, pure generator drawing candidates from a configured pool,
  and an evaluator that scores rollouts by the analytic gait fitness.
* ``live``: an OpenAI-compatible ``/chat/completions`` endpoint reached over
  HTTP, with images sent as base64 PNG data URLs.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import re
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import gaitenv
from .flowsel import FrameSequence, SelectionResult
from .gaitenv import Trajectory, fitness, render_frames
from .rewardlang import (SCHEMA_TEXT, ParseError, RewardSpec, RewardTerm, aligned_spec,
                         describe_legs, parse_reward, serialize, validate_document, zero_spec)

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
DEFAULT_PAYLOAD_LIMIT = 20 * 1024 * 1024
STRIP_FRAMES = 8
_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n(.*?)```", re.DOTALL)


class VlmError(RuntimeError):
    pass


class PayloadTooLarge(VlmError):
    pass


class AllCandidatesFailed(VlmError):
    def __init__(self, failures):
        self.failures = tuple(failures)
        super().__init__(f"all {len(self.failures)} candidates unparseable: "
                         + "; ".join(f"#{f.index}: {f.message}" for f in self.failures))


def load_template(name: str, version: str = PROMPT_VERSION) -> str:
    return resources.files("roesl.prompts").joinpath(f"{name}_{version}.txt").read_text(encoding="utf-8")


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "http://127.0.0.1:8000/v1"
    model: str = "gpt-4-vision-preview"
    token_env: str = "ROESL_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    max_in_flight: int = 4
    max_payload_bytes: int = DEFAULT_PAYLOAD_LIMIT
    backoff: float = 0.5

    def validate(self, prefix: str = "provider") -> None:
        if not self.timeout > 0:
            raise ValueError(f"{prefix}.timeout must be > 0")
        if self.retries < 0:
            raise ValueError(f"{prefix}.retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError(f"{prefix}.max_in_flight must be >= 1")
        if self.max_payload_bytes < 1:
            raise ValueError(f"{prefix}.max_payload_bytes must be >= 1")
        if self.backoff < 0:
            raise ValueError(f"{prefix}.backoff must be >= 0")
        if not self.endpoint.startswith(("http://", "https://")):
            raise ValueError(f"{prefix}.endpoint must be an http(s) URL")

    def token(self) -> str:
        tok = os.environ.get(self.token_env)
        if not tok:
            raise VlmError(f"environment variable {self.token_env} is not set (required in live mode)")
        return tok


@dataclass(frozen=True)
class PoolEntry:
    template: RewardSpec
    perturb: float = 0.0  # half-width of the uniform jitter applied to numeric params


@dataclass(frozen=True)
class MockConfig:
    seed: int = 0
    pool: tuple[PoolEntry, ...] = ()
    sabotage_fraction: float = 0.0
    draw: str = "sample"  # "sample": i.i.d. from the pool; "permute": seeded permutation, cycled

    def validate(self, prefix: str = "mock") -> None:
        if not self.pool:
            raise ValueError(f"{prefix}.pool must be non-empty")
        if not 0.0 <= self.sabotage_fraction <= 1.0:
            raise ValueError(f"{prefix}.sabotage_fraction must be in [0,1]")
        if self.draw not in ("sample", "permute"):
            raise ValueError(f"{prefix}.draw must be 'sample' or 'permute'")
        for e in self.pool:
            if e.perturb < 0:
                raise ValueError(f"{prefix}.pool perturb must be >= 0")


def reversed_spec(skill) -> RewardSpec:
    """The aligned reward with every target phase offset moved by half a cycle."""
    return sabotage(aligned_spec(skill), suffix="reversed")


def sabotage(spec: RewardSpec, suffix: str = "sabotaged") -> RewardSpec:
    """Deliberately misaligned copy of ``spec``."""
    terms = []
    for t in spec.terms:
        p = dict(t.params)
        w = t.weight
        if t.kind == "phase_pair":
            p["offset"] = (p["offset"] + 0.5) % 1.0
        elif t.kind == "velocity_tracking":
            p["target"] = 0.0 if p["target"] != 0.0 else 1.0
        elif t.kind == "contact_pattern":
            p["pattern"] = tuple(1 - v for v in p["pattern"])
        elif t.kind == "height_keep":
            p["target"] = p["target"] + 0.1
        else:
            w = -w
        terms.append(RewardTerm(t.kind, tuple(p.items()), w))
    return RewardSpec(f"{spec.name}_{suffix}", tuple(terms))


def _perturb(spec: RewardSpec, width: float, rng: np.random.Generator, tag: str) -> RewardSpec:
    terms = []
    for t in spec.terms:
        p = dict(t.params)
        for name in list(p):
            if name == "offset":
                p[name] = float((p[name] + rng.uniform(-width, width)) % 1.0)
                if p[name] >= 1.0:
                    p[name] = 0.0
            elif name == "target":
                p[name] = float(p[name] + rng.uniform(-width, width))
            elif name == "k":
                p[name] = float(p[name] * math.exp(rng.uniform(-width, width)))
        terms.append(RewardTerm(t.kind, tuple(p.items()), float(t.weight * math.exp(rng.uniform(-width, width)))))
    return RewardSpec(f"{spec.name}~{tag}", tuple(terms))


def default_pool(skill: str, perturb: float = 0.05) -> tuple[PoolEntry, ...]:
    return (PoolEntry(aligned_spec(skill), perturb),)


def ranking_pool(skill: str) -> tuple[PoolEntry, ...]:
    """One aligned candidate and five misaligned ones (no jitter)."""
    others = [s for s in gaitenv.SKILLS if s != skill]
    specs = [aligned_spec(skill), reversed_spec(skill)] + [aligned_spec(o) for o in others] + [zero_spec()]
    return tuple(PoolEntry(s) for s in specs)


def mock_generate(config: MockConfig, k: int, round_key: Sequence[int] = (0,)) -> list[RewardSpec]:
    """Seeded draw of ``k`` specs; a pure function of (config, k, round_key)."""
    config.validate()
    if k < 1:
        raise ValueError(f"candidate count must be >= 1, got {k}")
    rng = np.random.default_rng([int(config.seed), *(int(x) for x in round_key)])
    n = len(config.pool)
    if config.draw == "permute":
        order = rng.permutation(n)
        picks = [int(order[j % n]) for j in range(k)]
    else:
        picks = [int(x) for x in rng.integers(0, n, size=k)]
    n_sab = int(round(config.sabotage_fraction * k))
    sab = set(int(x) for x in rng.permutation(k)[:n_sab])
    out = []
    for j, idx in enumerate(picks):
        entry = config.pool[idx]
        spec = entry.template
        if entry.perturb > 0:
            spec = _perturb(spec, entry.perturb, rng, f"{j}")
        if j in sab:
            spec = sabotage(spec)
        # the gateway never emits an invalid spec
        report = validate_document(json.loads(serialize(spec)))
        if not report.ok:
            raise VlmError(f"mock pool produced an invalid spec: {report.errors[0]}")
        out.append(report.spec)
    return out


# ------------------------------------------------------------------ prompts

def _png_b64(pixels: np.ndarray) -> str:
    img = Image.fromarray(np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass(frozen=True)
class PromptBundle:
    system: str
    env_code: str
    frames: tuple[str, ...]  # base64 PNG
    frame_indices: tuple[int, ...]
    skill_context: str
    version: str = PROMPT_VERSION

    def to_json(self) -> bytes:
        doc = {"version": self.version, "system": self.system, "env_code": self.env_code,
               "skill_context": self.skill_context, "frame_indices": list(self.frame_indices),
               "frames": list(self.frames)}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @property
    def size(self) -> int:
        return len(self.to_json())

    def user_content(self, note: str = "") -> list[dict]:
        text = (f"Environment code:\n```python\n{self.env_code}\n```\n\n{self.skill_context}\n"
                f"Legs: {describe_legs()}.\nThe {len(self.frames)} demonstration frames follow in time order.")
        if note:
            text += "\n" + note
        parts = [{"type": "text", "text": text}]
        for b64 in self.frames:
            parts.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return parts


def build_prompt(env_code_path, selection: SelectionResult, frames: FrameSequence,
                 skill: Optional[str] = None, max_bytes: int = DEFAULT_PAYLOAD_LIMIT,
                 excerpt_chars: int = 16000) -> PromptBundle:
    path = Path(env_code_path)
    try:
        code = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise VlmError(f"cannot read environment code {path}: {exc.strerror or exc}") from None
    if len(code) > excerpt_chars:
        code = code[:excerpt_chars] + "\n# ... (truncated)\n"
    indices = sorted(selection.indices)
    for idx in indices:
        if not 0 <= idx < len(frames):
            raise VlmError(f"selected frame index {idx} is missing from a {len(frames)}-frame sequence")
    images = tuple(_png_b64(frames[i].pixels) for i in indices)
    context = ("Target skill: " + skill + "." if skill else "Infer the target skill from the frames.")
    bundle = PromptBundle(load_template("generate").replace("{schema}", SCHEMA_TEXT.rstrip()),
                          code, images, tuple(indices), context)
    size = bundle.size
    if size > max_bytes:
        raise PayloadTooLarge(f"prompt payload is {size} bytes, over the {max_bytes}-byte limit "
                              f"({len(images)} frames, {sum(len(i) for i in images)} bytes of image data)")
    return bundle


def default_env_code_path() -> Path:
    return Path(gaitenv.__file__)


# ------------------------------------------------------------------ live client

@dataclass(frozen=True)
class CandidateFailure:
    index: int
    attempts: int
    errors: tuple[str, ...]

    @property
    def message(self) -> str:
        return "; ".join(self.errors)

    def to_dict(self) -> dict:
        return {"index": self.index, "attempts": self.attempts, "errors": list(self.errors)}


@dataclass(frozen=True)
class GenerationResult:
    specs: tuple[RewardSpec, ...]
    source_index: tuple[int, ...]  # candidate slot each spec came from
    failures: tuple[CandidateFailure, ...] = ()
    seconds: float = 0.0


@dataclass(frozen=True)
class EvalResult:
    best: int
    scores: tuple[float, ...]
    fallback: bool = False
    ranking: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()


def extract_fenced(text: str) -> Optional[str]:
    m = _FENCE.search(text or "")
    return m.group(2) if m else None


class ChatClient:
    """Minimal chat-completions client with retries and an in-flight bound."""

    def __init__(self, provider: ProviderConfig, http=None):
        import httpx

        provider.validate()
        self.provider = provider
        self._token = provider.token()
        self._own = http is None
        self._http = http or httpx.Client(timeout=provider.timeout)
        self._gate = threading.BoundedSemaphore(provider.max_in_flight)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0

    def close(self) -> None:
        if self._own:
            self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, messages: list[dict], request_id: Optional[str] = None) -> str:
        import httpx

        p = self.provider
        body = json.dumps({"model": p.model, "messages": messages, "temperature": 0}).encode("utf-8")
        if len(body) > p.max_payload_bytes:
            raise PayloadTooLarge(f"request is {len(body)} bytes, over the {p.max_payload_bytes}-byte limit")
        rid = request_id or uuid.uuid4().hex
        headers = {"Authorization": f"Bearer {self._token}", "Content-Type": "application/json",
                   "X-Request-Id": rid}
        url = p.endpoint.rstrip("/") + "/chat/completions"
        last = "no attempt made"
        for attempt in range(p.retries + 1):
            if attempt:
                time.sleep(p.backoff * 2 ** (attempt - 1))
            with self._gate:
                with self._lock:
                    self.in_flight += 1
                    self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
                try:
                    resp = self._http.post(url, content=body, headers=headers, timeout=p.timeout)
                except (httpx.TimeoutException, httpx.TransportError) as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                finally:
                    with self._lock:
                        self.in_flight -= 1
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise VlmError(f"{url} rejected request {rid}: HTTP {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise VlmError(f"malformed chat-completions response for request {rid}") from None
        raise VlmError(f"request {rid} to {url} failed after {p.retries + 1} attempts: {last}")


def _live_candidate(client: ChatClient, bundle: PromptBundle, j: int, k: int,
                    tag: str) -> tuple[Optional[RewardSpec], Optional[CandidateFailure]]:
    messages = [{"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user_content(f"This is candidate {j + 1} of {k}.")}]
    errors: list[str] = []
    for attempt in range(2):
        reply = client.complete(messages, request_id=f"{tag}-{j}-{attempt}")
        block = extract_fenced(reply)
        if block is None:
            problems = ["reply contains no fenced code block"]
        else:
            report = parse_reward(block)
            if report.ok:
                return report.spec, None
            problems = [e.message for e in report.errors]
        errors.extend(problems)
        messages = messages + [
            {"role": "assistant", "content": reply},
            {"role": "user", "content": "That reply could not be used:\n- " + "\n- ".join(problems)
             + "\nReply again with exactly one fenced code block holding a valid JSON document."}]
    return None, CandidateFailure(j, 2, tuple(errors))


# ------------------------------------------------------------------ gateway

def best_index(scores: Sequence[float]) -> int:
    """Argmax over finite scores, lowest index on ties."""
    best, val = -1, -math.inf
    for i, s in enumerate(scores):
        if s is not None and math.isfinite(s) and (best < 0 or s > val):
            best, val = i, s
    if best < 0:
        raise ValueError("no finite score to select from")
    return best


def strip_image(frames: FrameSequence, n: int = STRIP_FRAMES) -> np.ndarray:
    idx = np.linspace(0, len(frames) - 1, min(n, len(frames))).round().astype(int)
    return np.concatenate([frames[int(i)].pixels for i in idx], axis=1)


def parse_ranking(text: str, n: int) -> list[int]:
    body = extract_fenced(text)
    raw = json.loads(body if body is not None else text)
    if (not isinstance(raw, list) or any(not isinstance(x, int) or isinstance(x, bool) for x in raw)
            or sorted(raw) != list(range(n))):
        raise ValueError(f"expected a permutation of 0..{n - 1}, got {raw!r}")
    return raw


@dataclass
class VlmGateway:
    mode: str = "mock"
    skill: str = "trot"
    mock: Optional[MockConfig] = None
    provider: Optional[ProviderConfig] = None
    http: object = None  # injectable httpx.Client for tests
    render_size: int = 64
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("mock", "live"):
            raise ValueError(f"mode must be 'mock' or 'live', got {self.mode!r}")
        gaitenv.get_skill(self.skill)
        if self.mode == "mock":
            if self.mock is None:
                raise ValueError("mock mode requires a MockConfig")
            self.mock.validate()
        else:
            if self.provider is None:
                raise ValueError("live mode requires a ProviderConfig")
            self.provider.validate()

    def _client(self) -> ChatClient:
        return ChatClient(self.provider, self.http)

    def generate(self, bundle: Optional[PromptBundle], k: int, round_key: Sequence[int] = (0,)) -> GenerationResult:
        t0 = time.perf_counter()
        if self.mode == "mock":
            specs = mock_generate(self.mock, k, round_key)
            return GenerationResult(tuple(specs), tuple(range(k)), (), time.perf_counter() - t0)
        if bundle is None:
            raise ValueError("live generation needs a prompt bundle")
        tag = "gen-" + "-".join(str(x) for x in round_key)
        with self._client() as client:
            with ThreadPoolExecutor(max_workers=self.provider.max_in_flight) as pool:
                results = list(pool.map(lambda j: _live_candidate(client, bundle, j, k, tag), range(k)))
        specs, src, failures = [], [], []
        for j, (spec, fail) in enumerate(results):
            if spec is not None:
                specs.append(spec)
                src.append(j)
            else:
                failures.append(fail)
                log.warning("candidate %d dropped: %s", j, fail.message)
        if not specs:
            raise AllCandidatesFailed(failures)
        return GenerationResult(tuple(specs), tuple(src), tuple(failures), time.perf_counter() - t0)

    def _mock_scores(self, rollouts: Sequence[Trajectory]) -> list[float]:
        return [fitness(t, self.skill).f for t in rollouts]

    def evaluate(self, demo: Optional[FrameSequence], rollouts: Sequence[Trajectory]) -> EvalResult:
        if not rollouts:
            raise ValueError("evaluation needs at least one rollout")
        if len(rollouts) == 1:
            return EvalResult(0, (1.0,) if self.mode == "live" else tuple(self._mock_scores(rollouts)), False, (0,))
        if self.mode == "mock":
            scores = self._mock_scores(rollouts)
            return EvalResult(best_index(scores), tuple(scores), False,
                              tuple(int(i) for i in np.argsort(-np.asarray(scores), kind="stable")))
        return self._live_evaluate(demo, rollouts)

    def _live_evaluate(self, demo, rollouts) -> EvalResult:
        n = len(rollouts)
        parts: list[dict] = [{"type": "text", "text": f"Demonstration strip, then {n} candidates (0..{n - 1})."}]
        if demo is not None:
            parts.append({"type": "image_url",
                          "image_url": {"url": "data:image/png;base64," + _png_b64(strip_image(demo))}})
        for i, traj in enumerate(rollouts):
            stride = max(1, len(traj) // STRIP_FRAMES)
            frames = render_frames(traj, self.render_size, self.render_size, stride=stride)
            parts.append({"type": "text", "text": f"Candidate {i}:"})
            parts.append({"type": "image_url",
                          "image_url": {"url": "data:image/png;base64," + _png_b64(strip_image(frames))}})
        messages = [{"role": "system", "content": load_template("evaluate")},
                    {"role": "user", "content": parts}]
        warnings = []
        with self._client() as client:
            for attempt in range(2):
                reply = client.complete(messages, request_id=f"eval-{attempt}")
                try:
                    ranking = parse_ranking(reply, n)
                except (ValueError, TypeError) as exc:
                    warnings.append(f"invalid ranking (attempt {attempt + 1}): {exc}")
                    continue
                scores = [0.0] * n
                for pos, idx in enumerate(ranking):
                    scores[idx] = (n - pos) / n
                return EvalResult(ranking[0], tuple(scores), False, tuple(ranking), tuple(warnings))
        log.warning("VLM ranking unusable twice; falling back to fitness scoring")
        scores = self._mock_scores(rollouts)
        warnings.append("fell back to fitness scoring")
        return EvalResult(best_index(scores), tuple(scores), True,
                          tuple(int(i) for i in np.argsort(-np.asarray(scores), kind="stable")), tuple(warnings))


def generate_rewards(bundle: Optional[PromptBundle], k: int, mode: str, *, skill: str = "trot",
                     mock: Optional[MockConfig] = None, provider: Optional[ProviderConfig] = None,
                     round_key: Sequence[int] = (0,), http=None) -> list[RewardSpec]:
    gw = VlmGateway(mode, skill, mock, provider, http)
    return list(gw.generate(bundle, k, round_key).specs)


def evaluate_rollouts(demo: Optional[FrameSequence], rollouts: Sequence[Trajectory], mode: str, *,
                      skill: str = "trot", mock: Optional[MockConfig] = None,
                      provider: Optional[ProviderConfig] = None, http=None) -> EvalResult:
    if mode == "mock" and mock is None:
        mock = MockConfig(pool=default_pool(skill))
    gw = VlmGateway(mode, skill, mock, provider, http)
    return gw.evaluate(demo, rollouts)


__all__ = [
    "AllCandidatesFailed", "CandidateFailure", "ChatClient", "EvalResult", "GenerationResult",
    "MockConfig", "ParseError", "PayloadTooLarge", "PoolEntry", "PromptBundle", "ProviderConfig",
    "VlmError", "VlmGateway", "best_index", "build_prompt", "default_pool", "evaluate_rollouts",
    "generate_rewards", "mock_generate", "ranking_pool", "reversed_spec", "sabotage",
]
