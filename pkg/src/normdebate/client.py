"""Chat-completion agents: a JSON-over-HTTP client and a scripted mock.

Both expose ``complete(messages, context) -> Completion``. The request
context carries the scenario id, prompt stage and turn index so the mock can
be scripted and errors can say where they happened.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import httpx

from .dataset import TernaryLabel
from .prompts import PromptStage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 512
    retry_limit: int = 3
    timeout: float = 60.0
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    backoff_cap: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad chat role {self.role!r}")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class RequestContext:
    scenario_id: str
    stage: PromptStage
    turn_index: int = 0
    # Only mock endpoints read this; it never reaches a prompt.
    gold: TernaryLabel | None = None


@dataclass(frozen=True)
class Completion:
    text: str
    attempts: int = 1
    latency: float = 0.0


class ClientError(Exception):
    def __init__(self, message: str, endpoint: str = "", stage: PromptStage | None = None):
        self.endpoint = endpoint
        self.stage = stage
        where = f"[{endpoint}{'/' + stage.value if stage else ''}] " if endpoint else ""
        super().__init__(where + message)


class CompletionTimeout(ClientError):
    pass


class EndpointError(ClientError):
    def __init__(self, status: int, message: str, endpoint: str = "", stage: PromptStage | None = None):
        self.status = status
        super().__init__(f"HTTP {status}: {message}", endpoint, stage)


class RetriesExhausted(ClientError):
    def __init__(self, attempts: int, last: Exception, endpoint: str = "", stage: PromptStage | None = None):
        self.attempts = attempts
        self.last = last
        super().__init__(f"gave up after {attempts} attempts: {last}", endpoint, stage)


class ProtocolError(ClientError):
    pass


def _check_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be nonempty")
    if messages[-1].role != "user":
        raise ValueError("last message must have role 'user'")


def user_message(text: str) -> list[ChatMessage]:
    return [ChatMessage("user", text)]


# --------------------------------------------------------------------------
# Mock backend


MOCK_BEHAVIORS = ("echo-gold", "fixed-label", "seeded-random-label", "noisy-gold")
MOCK_CHOICES = ("reflect", "debate", "A", "B", "random")


@dataclass(frozen=True)
class ScriptRule:
    """``None`` fields act as wildcards."""

    response: str
    scenario_id: str | None = None
    stage: PromptStage | None = None
    turn_index: int | None = None

    def matches(self, ctx: RequestContext) -> bool:
        return (
            (self.scenario_id is None or self.scenario_id == ctx.scenario_id)
            and (self.stage is None or self.stage is ctx.stage)
            and (self.turn_index is None or self.turn_index == ctx.turn_index)
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScriptRule":
        stage = d.get("stage")
        return cls(
            response=str(d["response"]),
            scenario_id=None if d.get("scenario_id") is None else str(d["scenario_id"]),
            stage=None if stage is None else PromptStage(stage),
            turn_index=d.get("turn_index"),
        )


@dataclass(frozen=True)
class MockSpec:
    seed: int = 0
    script: tuple[ScriptRule, ...] = ()
    default_behavior: str = "echo-gold"
    fixed_label: TernaryLabel = TernaryLabel.YES
    # used by noisy-gold: probability a label stage answers with the gold label
    accuracy: float = 1.0
    default_choice: str = "debate"

    def __post_init__(self):
        if self.default_behavior not in MOCK_BEHAVIORS:
            raise ValueError(f"unknown mock behavior {self.default_behavior!r}")
        if self.default_choice not in MOCK_CHOICES:
            raise ValueError(f"unknown mock choice {self.default_choice!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MockSpec":
        rules = d.get("script") or ()
        if isinstance(rules, Mapping):
            # compact form {"scenario|stage|turn": response}
            parsed = []
            for key, resp in rules.items():
                sid, stage, turn = (key.split("|") + ["", "", ""])[:3]
                parsed.append(
                    ScriptRule(
                        str(resp),
                        sid or None,
                        PromptStage(stage) if stage else None,
                        int(turn) if turn else None,
                    )
                )
            rules = parsed
        else:
            rules = [ScriptRule.from_dict(r) for r in rules]
        return cls(
            seed=int(d.get("seed", 0)),
            script=tuple(rules),
            default_behavior=d.get("default_behavior", "echo-gold"),
            fixed_label=TernaryLabel.from_gold(d.get("fixed_label", "Yes")),
            accuracy=float(d.get("accuracy", 1.0)),
            default_choice=d.get("default_choice", "debate"),
        )


def _stable_rng(*parts: object) -> random.Random:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class MockClient:
    """Deterministic scripted agent; a pure function of (spec, request)."""

    def __init__(self, name: str, spec: MockSpec | None = None):
        self.name = name
        self.spec = spec or MockSpec()

    def complete(self, messages: Sequence[ChatMessage], context: RequestContext) -> Completion:
        _check_messages(messages)
        for rule in self.spec.script:
            if rule.matches(context):
                return Completion(rule.response)
        return Completion(self._default(messages[-1].content, context))

    def _rng(self, ctx: RequestContext) -> random.Random:
        return _stable_rng(self.spec.seed, self.name, ctx.scenario_id, ctx.stage.value, ctx.turn_index)

    def _label(self, ctx: RequestContext) -> TernaryLabel:
        behavior = self.spec.default_behavior
        labels = TernaryLabel.gold_labels()
        if behavior == "fixed-label":
            return self.spec.fixed_label
        if behavior == "seeded-random-label":
            return self._rng(ctx).choice(labels)
        if ctx.gold is None:
            raise ClientError("echo-gold mock needs the gold label in the request context", self.name, ctx.stage)
        if behavior == "noisy-gold":
            rng = self._rng(ctx)
            if rng.random() < self.spec.accuracy:
                return ctx.gold
            return rng.choice([lab for lab in labels if lab is not ctx.gold])
        return ctx.gold

    def _choice_letter(self, prompt: str, ctx: RequestContext) -> str:
        want = self.spec.default_choice
        if want in ("A", "B"):
            return want
        if want == "random":
            return self._rng(ctx).choice("AB")
        reflect_is_a = "(A) reflect" in prompt
        return "A" if (want == "reflect") == reflect_is_a else "B"

    def _default(self, prompt: str, ctx: RequestContext) -> str:
        if ctx.stage is PromptStage.SD_CHOICE:
            return f"({self._choice_letter(prompt, ctx)})"
        label = self._label(ctx)
        if ctx.stage.expects_label:
            return f"{label.value}. ({self.name} on scenario {ctx.scenario_id})"
        return f"{self.name} thinks the answer should be {label.value}."


# --------------------------------------------------------------------------
# Remote backend

_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HTTPClient:
    """Client for a ``/chat/completions`` JSON endpoint."""

    def __init__(
        self,
        name: str,
        base_url: str,
        model_id: str,
        params: GenerationParams | None = None,
        api_key: str | None = None,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        self.name = name
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model_id = model_id
        self.params = params or GenerationParams()
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(headers=headers, timeout=self.params.timeout, transport=transport)
        self._sleep = sleep
        self._jitter = random.Random()

    def close(self) -> None:
        self._http.close()

    def _backoff(self, attempt: int) -> float:
        p = self.params
        delay = min(p.backoff_cap, p.backoff_base * p.backoff_factor ** (attempt - 1))
        return delay * (0.5 + self._jitter.random() / 2)

    def payload(self, messages: Sequence[ChatMessage]) -> dict[str, Any]:
        return {
            "model": self.model_id,
            "messages": [m.to_dict() for m in messages],
            "temperature": self.params.temperature,
            "max_tokens": self.params.max_tokens,
        }

    def complete(self, messages: Sequence[ChatMessage], context: RequestContext) -> Completion:
        _check_messages(messages)
        body = self.payload(messages)
        max_attempts = self.params.retry_limit + 1
        last: ClientError | None = None
        start = time.perf_counter()
        with self._slots:
            for attempt in range(1, max_attempts + 1):
                try:
                    resp = self._http.post(self.url, json=body)
                except httpx.TimeoutException as exc:
                    last = CompletionTimeout(str(exc) or "request timed out", self.name, context.stage)
                except httpx.TransportError as exc:
                    last = ClientError(f"transport error: {exc}", self.name, context.stage)
                else:
                    if resp.status_code == 200:
                        text = self._extract(resp, context)
                        return Completion(text, attempt, time.perf_counter() - start)
                    err = EndpointError(resp.status_code, resp.text[:200], self.name, context.stage)
                    if resp.status_code not in _TRANSIENT_STATUS:
                        raise err
                    last = err
                if attempt < max_attempts:
                    delay = self._backoff(attempt)
                    logger.warning("%s: attempt %d failed (%s); retrying in %.2fs", self.name, attempt, last, delay)
                    self._sleep(delay)
        assert last is not None
        if self.params.retry_limit == 0:
            raise last
        raise RetriesExhausted(max_attempts, last, self.name, context.stage)

    def _extract(self, resp: httpx.Response, context: RequestContext) -> str:
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise ProtocolError(f"malformed completion body: {resp.text[:200]}", self.name, context.stage) from None
        if not isinstance(content, str):
            raise ProtocolError("completion content is not a string", self.name, context.stage)
        return content


# --------------------------------------------------------------------------
# Endpoint configuration


@dataclass(frozen=True)
class ModelEndpoint:
    name: str
    model_id: str = "mock"
    base_url: str | None = None
    params: GenerationParams = field(default_factory=GenerationParams)
    mock: MockSpec | None = None
    api_key_env: str | None = None
    max_in_flight: int = 4

    def __post_init__(self):
        if (self.base_url is None) == (self.mock is None):
            raise ValueError(f"endpoint {self.name!r} needs exactly one of base_url or mock")

    @property
    def is_mock(self) -> bool:
        return self.mock is not None

    @classmethod
    def from_dict(cls, name: str, d: Mapping[str, Any]) -> "ModelEndpoint":
        known = {f for f in GenerationParams.__dataclass_fields__}
        params = GenerationParams(**{k: v for k, v in d.items() if k in known})
        mock = d.get("mock")
        return cls(
            name=name,
            model_id=str(d.get("model", d.get("model_id", "mock"))),
            base_url=d.get("base_url"),
            params=params,
            mock=MockSpec.from_dict(mock if isinstance(mock, Mapping) else {}) if mock is not None else None,
            api_key_env=d.get("api_key_env"),
            max_in_flight=int(d.get("max_in_flight", 4)),
        )

    def connect(self, **http_kwargs):
        if self.mock is not None:
            return MockClient(self.name, self.mock)
        api_key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if self.api_key_env and api_key is None:
            logger.warning("environment variable %s is not set; sending no API key", self.api_key_env)
        return HTTPClient(
            self.name, self.base_url, self.model_id, self.params, api_key, self.max_in_flight, **http_kwargs
        )
