"""Chat-completions client with cassette record/replay.

Replay consumes cassette entries strictly in order and only uses the stored
request digest to detect drift between the recorded and current prompts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx
import yaml

logger = logging.getLogger(__name__)

API_KEY_ENV = "LLM_API_KEY"
MODES = ("live", "record", "replay")
RETRY_STATUSES = {429, 500, 502, 503, 504}
MAX_ATTEMPTS = 3
BACKOFF_BASE_S = 2.0


class LLMError(RuntimeError):
    pass


class LLMConfigError(LLMError):
    pass


class LLMTimeoutError(LLMError):
    pass


class LLMStatusError(LLMError):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


class LLMRetriesExhausted(LLMError):
    pass


class LLMMalformedResponse(LLMError):
    pass


class CassetteError(LLMError):
    pass


class CassetteExhausted(CassetteError):
    pass


class ReplayMismatch(CassetteError):
    pass


class ReplayMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.7
    max_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("the first message must come from the system or the user")
        for m in self.messages:
            if m.role not in ("system", "user", "assistant"):
                raise ValueError(f"unknown role {m.role!r}")

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def digest(self) -> str:
        blob = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_payload(cls, payload: dict) -> "ChatRequest":
        return cls(
            model=payload["model"],
            messages=tuple(Message(m["role"], m["content"]) for m in payload["messages"]),
            temperature=payload.get("temperature", 0.7),
            max_tokens=payload.get("max_tokens", 2048),
        )


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = field(default=0.0, compare=False)


@dataclass
class CassetteEntry:
    digest: str
    request: dict
    response: dict


@dataclass
class Cassette:
    entries: list[CassetteEntry] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    cursor: int = 0

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        entries = [CassetteEntry(e["digest"], e["request"], e["response"]) for e in data.get("interactions", [])]
        return cls(entries=entries, metadata=data.get("metadata", {}))

    def dump(self) -> str:
        data = {
            "metadata": self.metadata,
            "interactions": [{"digest": e.digest, "request": e.request, "response": e.response} for e in self.entries],
        }
        return yaml.dump(data, Dumper=_LiteralDumper, sort_keys=False, allow_unicode=True, width=100)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")

    def append(self, request: ChatRequest, response: ChatResponse) -> None:
        self.entries.append(CassetteEntry(
            digest=request.digest(),
            request=request.payload(),
            response={
                "content": response.content,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
            },
        ))


class _LiteralDumper(yaml.SafeDumper):
    pass


def _str_representer(dumper, value: str):
    style = "|" if "\n" in value else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", value, style=style)


_LiteralDumper.add_representer(str, _str_representer)


def replay_match(cassette: Cassette, request: ChatRequest, strict: bool = False) -> ChatResponse:
    """Return the next recorded response and advance the cassette."""
    call = cassette.cursor + 1
    if cassette.cursor >= len(cassette.entries):
        raise CassetteExhausted(f"cassette exhausted at call {call}")
    entry = cassette.entries[cassette.cursor]
    if entry.digest != request.digest():
        message = f"request digest mismatch at call {call}: recorded {entry.digest[:12]}, got {request.digest()[:12]}"
        if strict:
            raise ReplayMismatch(message)
        warnings.warn(message, ReplayMismatchWarning, stacklevel=2)
    cassette.cursor += 1
    r = entry.response
    return ChatResponse(r["content"], r.get("prompt_tokens", 0), r.get("completion_tokens", 0))


@dataclass(frozen=True)
class LLMConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4"
    temperature: float = 0.7
    max_tokens: int = 2048
    timeout_s: float = 120.0
    mode: str = "replay"
    cassette: Optional[str] = None
    strict: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"llm.mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "LLMConfig":
        """Build from ``llm.*`` keys of a key = value file; other keys are ignored."""
        d = cls()
        get = lambda k, default: values.get(f"llm.{k}", default)  # noqa: E731
        return cls(
            base_url=get("base_url", d.base_url),
            model=get("model", d.model),
            temperature=float(get("temperature", d.temperature)),
            max_tokens=int(get("max_tokens", d.max_tokens)),
            timeout_s=float(get("timeout_s", d.timeout_s)),
            mode=get("mode", d.mode),
            cassette=get("cassette", d.cassette),
            strict=str(get("strict", d.strict)).lower() in ("1", "true", "yes"),
        )


LLM_KEYS = tuple(f"llm.{k}" for k in ("base_url", "model", "temperature", "max_tokens", "timeout_s", "mode", "cassette", "strict"))


class ChatClient:
    """Synchronous client for one optimization run.

    In ``replay`` mode no network is touched. ``record`` behaves like ``live``
    and also appends each exchange to the cassette, saving after every call.
    """

    def __init__(
        self,
        config: LLMConfig,
        cassette: Optional[Cassette] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        api_key: Optional[str] = None,
    ):
        self.config = config
        self.calls = 0
        self._sleep = sleep
        self._http: Optional[httpx.Client] = None
        if config.mode == "replay":
            if cassette is None:
                if not config.cassette:
                    raise LLMConfigError("replay mode needs a cassette")
                cassette = Cassette.load(config.cassette)
            self.cassette = cassette
            return
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self._api_key:
            raise LLMConfigError(f"{config.mode} mode needs an API key in ${API_KEY_ENV}")
        if config.mode == "record" and cassette is None:
            cassette = Cassette(metadata={"model": config.model, "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())})
        self.cassette = cassette
        self._http = httpx.Client(transport=transport, timeout=config.timeout_s)

    def request(self, messages: list[Message]) -> ChatRequest:
        return ChatRequest(self.config.model, tuple(messages), self.config.temperature, self.config.max_tokens)

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.calls += 1
        if self.config.mode == "replay":
            return replay_match(self.cassette, request, strict=self.config.strict)
        response = self._post(request)
        if self.config.mode == "record":
            self.cassette.append(request, response)
            if self.config.cassette:
                self.cassette.save(self.config.cassette)
        return response

    def _post(self, request: ChatRequest) -> ChatResponse:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self._api_key}"}
        last_status = None
        for attempt in range(MAX_ATTEMPTS):
            start = time.monotonic()
            try:
                resp = self._http.post(url, json=request.payload(), headers=headers)
            except httpx.TimeoutException:
                raise LLMTimeoutError(f"request to {url} timed out after {self.config.timeout_s}s") from None
            except httpx.HTTPError as exc:
                raise LLMError(f"transport error talking to {url}: {type(exc).__name__}") from None
            latency = time.monotonic() - start
            if resp.status_code in RETRY_STATUSES:
                last_status = resp.status_code
                if attempt + 1 < MAX_ATTEMPTS:
                    delay = BACKOFF_BASE_S * 2 ** attempt
                    logger.warning("HTTP %s from %s, retrying in %.0fs", resp.status_code, url, delay)
                    self._sleep(delay)
                continue
            if resp.status_code >= 400:
                raise LLMStatusError(f"HTTP {resp.status_code} from {url}", resp.status_code)
            return _parse_body(resp, latency)
        raise LLMRetriesExhausted(f"gave up after {MAX_ATTEMPTS} attempts, last status HTTP {last_status}")

    def close(self) -> None:
        if self._http is not None:
            self._http.close()


def _parse_body(resp: httpx.Response, latency: float) -> ChatResponse:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise LLMMalformedResponse("response body is not a chat completion") from None
    if not isinstance(content, str):
        raise LLMMalformedResponse("response message has no text content")
    usage = body.get("usage") or {}
    return ChatResponse(
        content=content,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
        latency=latency,
    )
