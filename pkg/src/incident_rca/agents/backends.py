"""Chat-completion backends. Backends never retry; callers own the retry policy."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx

API_KEY_ENV = "RCA_LLM_API_KEY"


class TransportError(Exception):
    """The backend could not produce a completion."""


@dataclass(frozen=True)
class ChatTurn:
    role: str  # system | user | assistant
    text: str
    images: tuple[tuple[str, str], ...] = ()  # (mime, base64 payload)

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role {self.role!r}")
        if not self.text and not self.images:
            raise ValueError("chat turn needs text or images")

    def to_json(self, with_images: bool = False) -> dict:
        out: dict = {"role": self.role, "text": self.text}
        if self.images:
            out["images"] = (
                [{"mime": m, "data": d} for m, d in self.images]
                if with_images
                else [{"mime": m, "bytes_b64": len(d)} for m, d in self.images]
            )
        return out


@dataclass(frozen=True)
class Capabilities:
    vision: bool = False


class LlmBackend(Protocol):
    id: str
    capabilities: Capabilities

    def complete(self, turns: Sequence[ChatTurn]) -> str: ...


class ScriptedBackend:
    """Replays responses from a list, one per call, in call order.

    Each item is ``{"text": ...}``; ``{"error": ...}`` raises TransportError
    for that call instead. Running past the end of the script is a transport
    error.
    """

    id = "scripted"

    def __init__(self, responses: Sequence[dict | str], vision: bool = False):
        self._responses = [r if isinstance(r, dict) else {"text": r} for r in responses]
        self.capabilities = Capabilities(vision=vision)
        self.calls: list[list[ChatTurn]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path: str | Path, vision: bool = False) -> "ScriptedBackend":
        responses = []
        with Path(path).open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                if not isinstance(obj, dict) or not ("text" in obj or "error" in obj):
                    raise ValueError(f"{path}:{line_no}: expected an object with 'text' or 'error'")
                responses.append(obj)
        return cls(responses, vision=vision)

    def complete(self, turns: Sequence[ChatTurn]) -> str:
        with self._lock:
            index = len(self.calls)
            self.calls.append(list(turns))
        if index >= len(self._responses):
            raise TransportError(f"script exhausted at call {index}")
        item = self._responses[index]
        if "error" in item:
            raise TransportError(str(item["error"]))
        return str(item["text"])


class CallbackBackend:
    """Backend driven by a Python callable; used for rule-based judges and tests."""

    def __init__(self, fn, vision: bool = False, id: str = "callback"):
        self._fn = fn
        self.id = id
        self.capabilities = Capabilities(vision=vision)
        self.calls: list[list[ChatTurn]] = []
        self._lock = threading.Lock()

    def complete(self, turns: Sequence[ChatTurn]) -> str:
        with self._lock:
            self.calls.append(list(turns))
        return self._fn(list(turns))


@dataclass
class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    endpoint: str
    model: str
    temperature: float = 1.0
    vision: bool = False
    api_key: str | None = None
    timeout: float = 120.0
    client: httpx.Client | None = None
    id: str = field(default="http-chat", init=False)

    def __post_init__(self) -> None:
        self.capabilities = Capabilities(vision=self.vision)
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)

    def payload(self, turns: Sequence[ChatTurn]) -> dict:
        messages = []
        for turn in turns:
            if turn.images and self.vision:
                content: list[dict] | str = [{"type": "text", "text": turn.text}] + [
                    {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}
                    for mime, data in turn.images
                ]
            else:
                content = turn.text
            messages.append({"role": turn.role, "content": content})
        return {"model": self.model, "temperature": self.temperature, "messages": messages}

    def complete(self, turns: Sequence[ChatTurn]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        client = self.client or httpx.Client(timeout=self.timeout)
        try:
            resp = client.post(self.endpoint, json=self.payload(turns), headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        finally:
            if self.client is None:
                client.close()
        if resp.status_code != 200:
            raise TransportError(f"{self.endpoint} returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content or ""
