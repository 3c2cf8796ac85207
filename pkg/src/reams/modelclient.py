"""Backend-agnostic chat-completion client.

Three interchangeable backends keep the pipeline identical in CI and against
real models: a live HTTP endpoint speaking the common chat-completions wire
shape, a content-addressed replay cache, and a scripted digest->text mock.
Every request has a canonical 256-bit digest; the replay cache is keyed by it.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import requests

__all__ = [
    "BackendConfig",
    "BackendError",
    "CacheMissError",
    "ModelRequest",
    "ModelResponse",
    "complete",
    "request_digest",
]

DEFAULT_CODE_TEMPERATURE = 0.0
DEFAULT_REASONING_TEMPERATURE = 0.2
DEFAULT_MAX_TOKENS = 1024
DEFAULT_MAX_CONCURRENT = 4

_ROLES = ("system", "user")


class BackendError(RuntimeError):
    """A backend could not produce a response."""


class CacheMissError(BackendError):
    """Replay-only backend had no entry for the request digest."""

    def __init__(self, digest: str):
        super().__init__(f"replay cache has no entry for digest {digest}")
        self.digest = digest


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = DEFAULT_CODE_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    stop: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a request needs at least one message")
        for role, _content in self.messages:
            if role not in _ROLES:
                raise ValueError(f"unknown message role {role!r}")
        if not (self.temperature >= 0.0 and self.temperature == self.temperature):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: str  # stop | length | error
    latency: float
    from_cache: bool = False


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # http | replay | scripted
    base_url: str | None = None
    api_key_env: str = "REAMS_API_KEY"
    request_timeout: float = 60.0
    max_retries: int = 2
    cache_dir: str | Path | None = None
    script_path: str | Path | None = None
    max_concurrent: int = DEFAULT_MAX_CONCURRENT

    def __post_init__(self) -> None:
        # normalize path-like fields so configs compare equal across a
        # JSON snapshot roundtrip
        if self.cache_dir is not None:
            object.__setattr__(self, "cache_dir", str(self.cache_dir))
        if self.script_path is not None:
            object.__setattr__(self, "script_path", str(self.script_path))
        if self.kind not in ("http", "replay", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ValueError("http backend needs base_url")
        if self.kind == "replay" and not self.cache_dir:
            raise ValueError("replay backend needs cache_dir")
        if self.kind == "scripted" and not self.script_path:
            raise ValueError("scripted backend needs script_path")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _canonical_payload(req: ModelRequest) -> dict:
    return {
        "model_id": req.model_id,
        "messages": [{"role": r, "content": c} for r, c in req.messages],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "stop": list(req.stop) if req.stop else None,
    }


def request_digest(req: ModelRequest) -> str:
    """SHA-256 over the canonical request serialization (sorted keys, compact).

    Depends only on the request's semantic fields; stable across processes.
    """
    canonical = json.dumps(
        _canonical_payload(req), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _cache_path(cache_dir: str | Path, digest: str) -> Path:
    return Path(cache_dir) / digest[:2] / f"{digest}.json"


def _cache_read(cache_dir: str | Path, digest: str) -> dict | None:
    path = _cache_path(cache_dir, digest)
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BackendError(f"corrupt replay cache entry {path}: {exc}") from exc


def _cache_write(cache_dir: str | Path, digest: str, req: ModelRequest, text: str, finish: str) -> None:
    # write-temp-then-rename so concurrent fills never leave torn entries
    path = _cache_path(cache_dir, digest)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {"request": _canonical_payload(req), "response_text": text, "finish_reason": finish}
    tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
    tmp.write_text(json.dumps(entry, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


_scripted_lock = threading.Lock()
_scripted_cache: dict[str, Mapping[str, str]] = {}


def _scripted_table(path: str | Path) -> Mapping[str, str]:
    key = str(Path(path).resolve())
    with _scripted_lock:
        if key not in _scripted_cache:
            try:
                table = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise BackendError(f"cannot load scripted backend file {path}: {exc}") from exc
            if not isinstance(table, dict):
                raise BackendError(f"scripted backend file {path} must map digest -> text")
            _scripted_cache[key] = table
        return _scripted_cache[key]


_http_lock = threading.Lock()
_http_state: dict[tuple[str, int], tuple[requests.Session, threading.BoundedSemaphore]] = {}


def _http_session(cfg: BackendConfig) -> tuple[requests.Session, threading.BoundedSemaphore]:
    key = (cfg.base_url or "", cfg.max_concurrent)
    with _http_lock:
        if key not in _http_state:
            _http_state[key] = (
                requests.Session(),
                threading.BoundedSemaphore(max(1, cfg.max_concurrent)),
            )
        return _http_state[key]


def _complete_http(cfg: BackendConfig, req: ModelRequest, digest: str) -> ModelResponse:
    url = cfg.base_url.rstrip("/")
    if not url.endswith("/chat/completions"):
        url = url + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": req.model_id,
        "messages": [{"role": r, "content": c} for r, c in req.messages],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    if req.stop:
        body["stop"] = list(req.stop)

    session, semaphore = _http_session(cfg)
    last_error: Exception | None = None
    started = time.monotonic()
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(min(0.25 * (2 ** (attempt - 1)), 8.0))
        try:
            with semaphore:
                resp = session.post(url, json=body, headers=headers, timeout=cfg.request_timeout)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if resp.status_code in (429,) or resp.status_code >= 500:
            last_error = BackendError(
                f"HTTP {resp.status_code} from {url}: {resp.text[:200]}"
            )
            continue
        if resp.status_code < 200 or resp.status_code >= 300:
            raise BackendError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response body from {url}: {exc}") from exc
        if finish not in ("stop", "length"):
            finish = "stop"
        if cfg.cache_dir:
            _cache_write(cfg.cache_dir, digest, req, text, finish)
        return ModelResponse(
            text=text, finish_reason=finish, latency=time.monotonic() - started, from_cache=False
        )
    raise BackendError(
        f"request failed after {cfg.max_retries + 1} attempt(s): {last_error}"
    )


def complete(backend: BackendConfig, req: ModelRequest) -> ModelResponse:
    """Resolve a request against the configured backend.

    Scripted and replay backends are bit-deterministic for identical
    requests; the http backend retries transient failures with exponential
    backoff and fills the replay cache when ``cache_dir`` is set.
    """
    digest = request_digest(req)
    if backend.kind == "scripted":
        table = _scripted_table(backend.script_path)
        if digest not in table:
            raise CacheMissError(digest)
        return ModelResponse(text=table[digest], finish_reason="stop", latency=0.0, from_cache=False)
    if backend.kind == "replay":
        entry = _cache_read(backend.cache_dir, digest)
        if entry is None:
            raise CacheMissError(digest)
        return ModelResponse(
            text=entry["response_text"],
            finish_reason=entry.get("finish_reason", "stop"),
            latency=0.0,
            from_cache=True,
        )
    return _complete_http(backend, req, digest)
