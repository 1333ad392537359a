"""Model backends: remote HTTP APIs, scripted scenarios, and replay caches.

Every backend exposes the same call shape:
``generate(role, purpose, prompt, params) -> Generation``. The scripted
backend makes every protocol path reproducible offline; the replay cache
records live calls and serves them back verbatim later.
"""

from __future__ import annotations

import abc
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Final

import httpx

from lm2.core import content_hash
from lm2.errors import (
    ConfigError,
    MissWithoutFallback,
    ProviderRejected,
    RateLimited,
    ScenarioMiss,
    SchemaError,
    TransportError,
)

logger = logging.getLogger(__name__)

BACKEND_KINDS: Final = ("remote_api", "scripted", "replay")


def estimate_tokens(text: str) -> int:
    """Whitespace token count times 1.3, rounded up (integer arithmetic)."""
    words = len(text.split())
    return (words * 13 + 9) // 10


def apply_stop_sequences(text: str, stops: tuple[str, ...]) -> str:
    """Truncate `text` at the earliest stop-sequence occurrence."""
    cut = len(text)
    for stop in stops:
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut]


@dataclass(frozen=True)
class GenerationParams:
    """Decoding settings for one call. Inference default: greedy, 2000 tokens."""

    temperature: float = 0.0
    max_tokens: int = 2000
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")

    @classmethod
    def inference(cls) -> GenerationParams:
        return cls()

    @classmethod
    def curation(cls) -> GenerationParams:
        # Curation wants diverse generations, not greedy ones.
        return cls(temperature=0.7)

    def key_payload(self) -> dict[str, Any]:
        return {
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stop_sequences": list(self.stop_sequences),
        }

    def to_dict(self) -> dict[str, Any]:
        return self.key_payload()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GenerationParams:
        unknown = data.keys() - {"temperature", "max_tokens", "stop_sequences"}
        if unknown:
            raise ConfigError(f"unknown generation params: {sorted(unknown)}")
        return cls(
            temperature=data.get("temperature", 0.0),
            max_tokens=data.get("max_tokens", 2000),
            stop_sequences=tuple(data.get("stop_sequences") or ()),
        )


@dataclass(frozen=True)
class RetryPolicy:
    """How many attempts a retryable failure gets and how long to wait."""

    max_attempts: int = 3
    backoff_s: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if any(b < 0 for b in self.backoff_s):
            raise ConfigError("backoff delays must be non-negative")

    def delay_for(self, attempt: int) -> float:
        """Delay after failed attempt number `attempt` (1-based)."""
        if not self.backoff_s:
            return 0.0
        return self.backoff_s[min(attempt - 1, len(self.backoff_s) - 1)]

    def to_dict(self) -> dict[str, Any]:
        return {"max_attempts": self.max_attempts, "backoff_s": list(self.backoff_s)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RetryPolicy:
        unknown = data.keys() - {"max_attempts", "backoff_s"}
        if unknown:
            raise ConfigError(f"unknown retry keys: {sorted(unknown)}")
        return cls(
            max_attempts=data.get("max_attempts", 3),
            backoff_s=tuple(data.get("backoff_s", (0.5, 1.0, 2.0))),
        )


_DESCRIPTOR_KEYS: Final = frozenset(
    {
        "id",
        "kind",
        "endpoint",
        "model",
        "api_key_env",
        "api_shape",
        "timeout_s",
        "rate_limit_rpm",
        "retry",
        "scenario_path",
        "cache_path",
        "fallback",
    }
)


@dataclass(frozen=True)
class BackendDescriptor:
    """Declarative description of one backend, as it appears in config files.

    Credentials are never stored here: `api_key_env` names the environment
    variable that holds the key.
    """

    id: str
    kind: str
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    api_shape: str = "chat"
    timeout_s: float = 60.0
    rate_limit_rpm: float | None = None
    retry: RetryPolicy = RetryPolicy()
    scenario_path: str | None = None
    cache_path: str | None = None
    fallback: "BackendDescriptor | None" = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ConfigError("backend id must be non-empty")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend {self.id}: unknown kind {self.kind!r}")
        if self.api_shape not in ("chat", "text"):
            raise ConfigError(f"backend {self.id}: unknown api_shape {self.api_shape!r}")
        if self.kind == "remote_api" and not self.endpoint:
            raise ConfigError(f"backend {self.id}: remote_api needs an endpoint")
        if self.kind == "scripted" and not self.scenario_path:
            raise ConfigError(f"backend {self.id}: scripted needs a scenario_path")
        if self.kind == "replay" and not self.cache_path:
            raise ConfigError(f"backend {self.id}: replay needs a cache_path")

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"id": self.id, "kind": self.kind}
        if self.endpoint is not None:
            data["endpoint"] = self.endpoint
        if self.model is not None:
            data["model"] = self.model
        if self.api_key_env is not None:
            data["api_key_env"] = self.api_key_env
        if self.kind == "remote_api":
            data["api_shape"] = self.api_shape
            data["timeout_s"] = self.timeout_s
            data["retry"] = self.retry.to_dict()
        if self.rate_limit_rpm is not None:
            data["rate_limit_rpm"] = self.rate_limit_rpm
        if self.scenario_path is not None:
            data["scenario_path"] = self.scenario_path
        if self.cache_path is not None:
            data["cache_path"] = self.cache_path
        if self.fallback is not None:
            data["fallback"] = self.fallback.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BackendDescriptor:
        unknown = data.keys() - _DESCRIPTOR_KEYS
        if unknown:
            raise ConfigError(f"unknown backend keys: {sorted(unknown)}")
        missing = {"id", "kind"} - data.keys()
        if missing:
            raise ConfigError(f"backend descriptor needs {sorted(missing)}")
        fallback = data.get("fallback")
        retry = data.get("retry")
        return cls(
            id=data["id"],
            kind=data["kind"],
            endpoint=data.get("endpoint"),
            model=data.get("model"),
            api_key_env=data.get("api_key_env"),
            api_shape=data.get("api_shape", "chat"),
            timeout_s=data.get("timeout_s", 60.0),
            rate_limit_rpm=data.get("rate_limit_rpm"),
            retry=RetryPolicy.from_dict(retry) if retry is not None else RetryPolicy(),
            scenario_path=data.get("scenario_path"),
            cache_path=data.get("cache_path"),
            fallback=cls.from_dict(fallback) if fallback is not None else None,
        )


@dataclass(frozen=True)
class Generation:
    """One backend completion with its accounting."""

    completion: str
    tokens_in: int
    tokens_out: int
    tokens_estimated: bool
    attempts: int
    latency_ms: int


class Backend(abc.ABC):
    """Anything that can turn a prompt into a Generation."""

    descriptor: BackendDescriptor

    @abc.abstractmethod
    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        ...


class RateLimiter:
    """Thread-safe token bucket. `acquire` blocks until a slot is free."""

    def __init__(
        self,
        rate_per_minute: float,
        *,
        capacity: float = 1.0,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate_per_minute <= 0:
            raise ConfigError("rate_per_minute must be positive")
        self._rate = rate_per_minute / 60.0
        self._capacity = capacity
        self._tokens = capacity
        self._clock = clock
        self._sleeper = sleeper
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one slot, sleeping if the bucket is empty. Returns the wait."""
        with self._lock:
            now = self._clock()
            self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
            self._last = now
            if self._tokens >= 1.0:
                self._tokens -= 1.0
                wait = 0.0
            else:
                wait = (1.0 - self._tokens) / self._rate
                self._tokens = 0.0
                self._last = now + wait
        if wait > 0:
            self._sleeper(wait)
        return wait


_RULE_KEYS: Final = frozenset(
    {"role", "completion", "purpose", "contains", "tokens_in", "tokens_out", "uses"}
)


@dataclass
class ScenarioRule:
    """One scripted response: matched by role, optional purpose, substring.

    `uses` caps how many times the rule may fire (None = unlimited), which
    lets a scenario return a different completion for a repeated identical
    prompt, e.g. a regenerated subquestion.
    """

    role: str
    completion: str
    purpose: str | None = None
    contains: str = ""
    tokens_in: int | None = None
    tokens_out: int | None = None
    uses: int | None = None
    fired: int = field(default=0, compare=False)

    def matches(self, role: str, purpose: str, prompt: str) -> bool:
        if self.role != role:
            return False
        if self.purpose is not None and self.purpose != purpose:
            return False
        if self.uses is not None and self.fired >= self.uses:
            return False
        return self.contains in prompt

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScenarioRule:
        unknown = data.keys() - _RULE_KEYS
        if unknown:
            raise SchemaError(f"unknown scenario rule keys: {sorted(unknown)}")
        missing = {"role", "completion"} - data.keys()
        if missing:
            raise SchemaError(f"scenario rule needs {sorted(missing)}")
        return cls(
            role=data["role"],
            completion=data["completion"],
            purpose=data.get("purpose"),
            contains=data.get("contains", ""),
            tokens_in=data.get("tokens_in"),
            tokens_out=data.get("tokens_out"),
            uses=data.get("uses"),
        )


class ScenarioScript:
    """An ordered rule table; the first non-exhausted match wins."""

    def __init__(self, rules: list[ScenarioRule]) -> None:
        self._rules = rules
        self._lock = threading.Lock()

    @classmethod
    def from_dicts(cls, rules: list[dict[str, Any]]) -> ScenarioScript:
        return cls([ScenarioRule.from_dict(r) for r in rules])

    @classmethod
    def from_file(cls, path: str | Path) -> ScenarioScript:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot load scenario {path}: {exc}") from exc
        rules = data["rules"] if isinstance(data, dict) else data
        if not isinstance(rules, list):
            raise SchemaError(f"scenario {path}: expected a rule list")
        return cls.from_dicts(rules)

    def match(self, role: str, purpose: str, prompt: str) -> ScenarioRule:
        with self._lock:
            for rule in self._rules:
                if rule.matches(role, purpose, prompt):
                    rule.fired += 1
                    return rule
        head = prompt if len(prompt) <= 200 else prompt[:200] + "..."
        raise ScenarioMiss(
            f"no scripted rule for role={role} purpose={purpose}; prompt starts: {head!r}"
        )

    def reset(self) -> None:
        with self._lock:
            for rule in self._rules:
                rule.fired = 0


class ScriptedBackend(Backend):
    """Deterministic backend driven by a ScenarioScript. Latency is always 0."""

    def __init__(self, descriptor: BackendDescriptor, script: ScenarioScript) -> None:
        self.descriptor = descriptor
        self.script = script

    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        rule = self.script.match(role, purpose, prompt)
        completion = apply_stop_sequences(rule.completion, params.stop_sequences)
        truncated = completion != rule.completion
        tokens_in = rule.tokens_in if rule.tokens_in is not None else estimate_tokens(prompt)
        if rule.tokens_out is not None and not truncated:
            tokens_out = rule.tokens_out
            out_estimated = False
        else:
            tokens_out = estimate_tokens(completion)
            out_estimated = True
        return Generation(
            completion=completion,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            tokens_estimated=rule.tokens_in is None or out_estimated,
            attempts=1,
            latency_ms=0,
        )


class RemoteBackend(Backend):
    """HTTP backend speaking the common chat/text completion shapes.

    The API key is read from the environment variable named in the
    descriptor; it never appears in config values or CLI flags.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        *,
        transport: httpx.BaseTransport | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        if descriptor.kind != "remote_api":
            raise ConfigError(f"backend {descriptor.id}: not a remote_api descriptor")
        self.descriptor = descriptor
        self._sleeper = sleeper
        headers = {}
        if descriptor.api_key_env:
            key = os.environ.get(descriptor.api_key_env)
            if not key:
                raise ConfigError(
                    f"backend {descriptor.id}: environment variable "
                    f"{descriptor.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            timeout=descriptor.timeout_s, headers=headers, transport=transport
        )
        self._limiter = (
            RateLimiter(descriptor.rate_limit_rpm)
            if descriptor.rate_limit_rpm is not None
            else None
        )

    def _payload(self, prompt: str, params: GenerationParams) -> dict[str, Any]:
        body: dict[str, Any] = {
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if self.descriptor.model:
            body["model"] = self.descriptor.model
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        if self.descriptor.api_shape == "chat":
            body["messages"] = [{"role": "user", "content": prompt}]
        else:
            body["prompt"] = prompt
        return body

    def _parse(self, data: dict[str, Any], prompt: str) -> tuple[str, int, int, bool]:
        try:
            choice = data["choices"][0]
            if self.descriptor.api_shape == "chat":
                completion = choice["message"]["content"]
            else:
                completion = choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderRejected(
                f"backend {self.descriptor.id}: unexpected response shape: {exc!r}"
            ) from exc
        usage = data.get("usage") or {}
        tokens_in = usage.get("prompt_tokens")
        tokens_out = usage.get("completion_tokens")
        estimated = tokens_in is None or tokens_out is None
        if tokens_in is None:
            tokens_in = estimate_tokens(prompt)
        if tokens_out is None:
            tokens_out = estimate_tokens(completion)
        return completion, tokens_in, tokens_out, estimated

    def _request_once(self, prompt: str, params: GenerationParams) -> httpx.Response:
        try:
            return self._client.post(self.descriptor.endpoint, json=self._payload(prompt, params))
        except httpx.TimeoutException as exc:
            raise TransportError(f"backend {self.descriptor.id}: timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"backend {self.descriptor.id}: transport: {exc}") from exc

    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        retry = self.descriptor.retry
        last_error: Exception | None = None
        for attempt in range(1, retry.max_attempts + 1):
            if self._limiter is not None:
                self._limiter.acquire()
            started = time.monotonic()
            try:
                response = self._request_once(prompt, params)
                if response.status_code == 429:
                    raise RateLimited(f"backend {self.descriptor.id}: provider rate limit")
                if response.status_code >= 500:
                    raise TransportError(
                        f"backend {self.descriptor.id}: server error {response.status_code}"
                    )
                if response.status_code >= 400:
                    raise ProviderRejected(
                        f"backend {self.descriptor.id}: rejected with "
                        f"{response.status_code}: {response.text[:200]}"
                    )
            except (RateLimited, TransportError) as exc:
                last_error = exc
                if attempt < retry.max_attempts:
                    delay = retry.delay_for(attempt)
                    logger.warning(
                        "backend %s attempt %d/%d failed (%s); retrying in %.1fs",
                        self.descriptor.id, attempt, retry.max_attempts, exc, delay,
                    )
                    self._sleeper(delay)
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            completion, tokens_in, tokens_out, estimated = self._parse(response.json(), prompt)
            completion = apply_stop_sequences(completion, params.stop_sequences)
            return Generation(
                completion=completion,
                tokens_in=tokens_in,
                tokens_out=tokens_out,
                tokens_estimated=estimated,
                attempts=attempt,
                latency_ms=latency_ms,
            )
        assert last_error is not None
        raise last_error

    def close(self) -> None:
        self._client.close()


def call_key(role: str, prompt: str, params: GenerationParams) -> str:
    """Content hash identifying one (role, prompt, params) call."""
    return content_hash({"role": role, "prompt": prompt, "params": params.key_payload()})


class ReplayCache:
    """Append-only JSONL store of generations, keyed by call_key.

    Repeated identical calls are kept in arrival order and replayed FIFO,
    so a regeneration sequence survives a record/replay round trip.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._records: dict[str, list[dict[str, Any]]] = {}
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            for lineno, line in enumerate(
                self.path.read_text(encoding="utf-8").splitlines(), start=1
            ):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{self.path}:{lineno}: bad cache line: {exc}") from exc
                self._records.setdefault(record["key"], []).append(record)

    def __len__(self) -> int:
        return sum(len(v) for v in self._records.values())

    def lookup(self, key: str) -> dict[str, Any] | None:
        """Next unconsumed record for `key`, or None."""
        with self._lock:
            queue = self._records.get(key, [])
            cursor = self._cursors.get(key, 0)
            if cursor >= len(queue):
                self.misses += 1
                return None
            self._cursors[key] = cursor + 1
            self.hits += 1
            return queue[cursor]

    def record(self, key: str, role: str, purpose: str, generation: Generation) -> None:
        entry = {
            "key": key,
            "role": role,
            "purpose": purpose,
            "completion": generation.completion,
            "tokens_in": generation.tokens_in,
            "tokens_out": generation.tokens_out,
            "tokens_estimated": generation.tokens_estimated,
        }
        with self._lock:
            self._records.setdefault(key, []).append(entry)
            # Writes are consumed on future runs, not this one: advance the
            # cursor past what we just stored.
            self._cursors[key] = self._cursors.get(key, 0) + 1
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


class RecordingBackend(Backend):
    """Pass-through wrapper that appends every generation to a ReplayCache.

    Adopts the wrapped backend's descriptor so recorded traces carry the
    real backend id.
    """

    def __init__(self, inner: Backend, cache: ReplayCache) -> None:
        self.inner = inner
        self.cache = cache
        self.descriptor = inner.descriptor

    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        generation = self.inner.generate(role, purpose, prompt, params)
        self.cache.record(call_key(role, prompt, params), role, purpose, generation)
        return generation


class ReplayBackend(Backend):
    """Serves generations from a ReplayCache.

    A miss raises MissWithoutFallback unless a fallback backend was given,
    in which case the fallback is called and its result recorded.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        cache: ReplayCache,
        fallback: Backend | None = None,
    ) -> None:
        self.descriptor = descriptor
        self.cache = cache
        self.fallback = fallback

    def generate(
        self, role: str, purpose: str, prompt: str, params: GenerationParams
    ) -> Generation:
        key = call_key(role, prompt, params)
        record = self.cache.lookup(key)
        if record is not None:
            return Generation(
                completion=record["completion"],
                tokens_in=record["tokens_in"],
                tokens_out=record["tokens_out"],
                tokens_estimated=record["tokens_estimated"],
                attempts=1,
                latency_ms=0,
            )
        if self.fallback is None:
            head = prompt if len(prompt) <= 200 else prompt[:200] + "..."
            raise MissWithoutFallback(
                f"replay cache {self.cache.path} has no record for role={role} "
                f"purpose={purpose}; prompt starts: {head!r}"
            )
        generation = self.fallback.generate(role, purpose, prompt, params)
        self.cache.record(key, role, purpose, generation)
        return generation


def build_backend(
    descriptor: BackendDescriptor, *, transport: httpx.BaseTransport | None = None
) -> Backend:
    """Construct the backend a descriptor describes."""
    if descriptor.kind == "scripted":
        assert descriptor.scenario_path is not None
        return ScriptedBackend(descriptor, ScenarioScript.from_file(descriptor.scenario_path))
    if descriptor.kind == "remote_api":
        return RemoteBackend(descriptor, transport=transport)
    assert descriptor.cache_path is not None
    fallback = (
        build_backend(descriptor.fallback, transport=transport)
        if descriptor.fallback is not None
        else None
    )
    return ReplayBackend(descriptor, ReplayCache(descriptor.cache_path), fallback)
