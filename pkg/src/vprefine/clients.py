"""Chat-model clients: a table-driven mock for hermetic runs and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import json
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Union

import httpx

DEFAULT_MAX_TOKENS = 1024


class ModelError(RuntimeError):
    """Hard client failure (transport, protocol, exhausted or unmatched mock)."""


class MockUnmatched(ModelError):
    def __init__(self, prompt: str):
        self.prefix = prompt[:120]
        super().__init__(f"no mock rule matches prompt starting {self.prefix!r}")


class ModelClient(Protocol):
    def complete(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = DEFAULT_MAX_TOKENS) -> str: ...


def prompt_text(messages: list[dict]) -> str:
    """The rendered prompt: content of the last user message."""
    for m in reversed(messages):
        if m["role"] == "user":
            return m["content"]
    raise ValueError("no user message")


@dataclass
class MockRule:
    match: str
    responses: deque = field(default_factory=deque)


@dataclass
class MockScript:
    rules: list

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        rules = []
        for i, r in enumerate(data.get("rules", [])):
            if not isinstance(r.get("match"), str) or not isinstance(r.get("responses"), list):
                raise ValueError(f"mock rule {i} needs a string 'match' and a list 'responses'")
            rules.append(MockRule(r["match"], deque(r["responses"])))
        return cls(rules)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MockScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class MockClient:
    """Each call pops the next response of the first matching rule that still has one."""

    def __init__(self, script: MockScript):
        self.script = script
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = DEFAULT_MAX_TOKENS) -> str:
        prompt = prompt_text(messages)
        with self._lock:
            self.calls += 1
            matched = False
            for rule in self.script.rules:
                if rule.match in prompt:
                    matched = True
                    if rule.responses:
                        return rule.responses.popleft()
            if matched:
                raise ModelError(f"mock responses exhausted for prompt starting {prompt[:120]!r}")
            raise MockUnmatched(prompt)


class OpenAICompatClient:
    """Minimal client for ``POST {base}/chat/completions`` with bearer auth."""

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        *,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.calls = 0
        self._http = httpx.Client(timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "OpenAICompatClient":
        missing = [k for k in ("MODEL_API_BASE", "MODEL_API_KEY", "MODEL_NAME") if not os.environ.get(k)]
        if missing:
            raise ModelError(f"missing environment variables: {', '.join(missing)}")
        return cls(os.environ["MODEL_API_BASE"], os.environ["MODEL_API_KEY"], os.environ["MODEL_NAME"], **kwargs)

    def complete(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = DEFAULT_MAX_TOKENS) -> str:
        self.calls += 1
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        try:
            resp = self._http.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as e:
            raise ModelError(f"chat completion failed: {e}") from e
