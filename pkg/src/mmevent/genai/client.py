"""Generative-model client with retries, rate limiting and an audit log.

The client talks to a *transport*: anything with a ``send(request) -> str``
method. :class:`HttpTransport` speaks the OpenAI-style chat-completions wire
format; :class:`MockTransport` replays a scripted JSON-lines fixture and never
touches the network.
"""
from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from ..errors import ConfigurationError, DeliveryError, RateLimitError, TransportError
from .prompt import PromptBundle

log = logging.getLogger(__name__)

ENV_API_KEY = "MED_API_KEY"
ENV_API_BASE = "MED_API_BASE"
ENV_MODEL = "MED_MODEL"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    nucleus_or_topk: float = 0.8
    max_output_tokens: int = 64

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ConfigurationError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    attempts: int


def make_request(bundle: PromptBundle, params: SamplingParams, instance_id: str | None = None) -> dict:
    return {
        "prompt": bundle.serialize(),
        "attachments": bundle.attachments,
        "prompt_sha256": bundle.sha256,
        "params": asdict(params),
        "instance_id": instance_id,
    }


# --- transports ----------------------------------------------------------------

class MockTransport:
    """Scripted offline transport.

    Each script step is a mapping with either ``"response"`` (text to return)
    or ``"error"`` (``"transport"`` or ``"rate_limit"``, optional
    ``"retry_after"``). Steps carrying an ``"id"`` are only used for requests
    about that instance, in order; the rest form a shared queue. A step with
    ``"default": true`` answers any request once everything else is used up.
    Alternatively pass ``responder``, a function from request to text.
    """

    def __init__(self, script: Iterable[Mapping] = (), responder: Callable[[dict], str] | None = None):
        self._lock = threading.Lock()
        self._by_id: dict[str, deque] = {}
        self._shared: deque = deque()
        self._default = None
        self.responder = responder
        self.requests: list[dict] = []
        for step in script:
            step = dict(step)
            if step.pop("default", False):
                self._default = step
            elif step.get("id") is not None:
                self._by_id.setdefault(str(step.pop("id")), deque()).append(step)
            else:
                self._shared.append(step)

    @property
    def order_sensitive(self) -> bool:
        """True when unkeyed steps exist, so concurrent callers would race for them."""
        return bool(self._shared)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "MockTransport":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def send(self, request: dict) -> str:
        with self._lock:
            self.requests.append(request)
            if self.responder is not None:
                return self.responder(request)
            queue = self._by_id.get(str(request.get("instance_id")))
            if queue:
                step = queue.popleft()
            elif self._shared:
                step = self._shared.popleft()
            elif self._default is not None:
                step = self._default
            else:
                raise TransportError("mock script exhausted", retryable=False)
        err = step.get("error")
        if err == "rate_limit":
            raise RateLimitError(retry_after=float(step.get("retry_after", 0.0)))
        if err:
            raise TransportError(f"scripted {err} failure", retryable=err != "fatal")
        return str(step["response"])


def _data_url(ref) -> str:
    if isinstance(ref, (bytes, bytearray)):
        data, mime = bytes(ref), "image/png"
    else:
        data = Path(ref).read_bytes()
        mime = mimetypes.guess_type(str(ref))[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


class HttpTransport:
    """OpenAI-compatible ``/chat/completions`` transport.

    ``nucleus_or_topk`` is sent as ``top_p``; endpoints with integer top-k
    cannot express a fractional value.
    """

    def __init__(self, base_url: str, api_key: str | None, model: str, timeout: float = 60.0,
                 http_client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.http = http_client or httpx.Client(timeout=timeout, headers=headers)
        if http_client is not None:
            self.http.headers.update(headers)

    @classmethod
    def from_env(cls, model: str | None = None, env: Mapping[str, str] | None = None,
                 **kw) -> "HttpTransport":
        env = os.environ if env is None else env
        base = env.get(ENV_API_BASE)
        if not base:
            raise ConfigurationError(f"set {ENV_API_BASE} (and {ENV_API_KEY}) or pass a mock fixture")
        return cls(base, env.get(ENV_API_KEY), model or env.get(ENV_MODEL, "gpt-4o"), **kw)

    def payload(self, request: dict) -> dict:
        content = [{"type": "text", "text": request["prompt"]}]
        content += [{"type": "image_url", "image_url": {"url": _data_url(ref)}}
                    for ref in request.get("attachments", [])]
        p = request["params"]
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": p["temperature"],
            "top_p": p["nucleus_or_topk"],
            "max_tokens": p["max_output_tokens"],
        }

    def send(self, request: dict) -> str:
        import httpx

        try:
            resp = self.http.post(f"{self.base_url}/chat/completions", json=self.payload(request))
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimitError(retry_after=float(resp.headers.get("retry-after", 1.0)))
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"request rejected {resp.status_code}: {resp.text[:200]}",
                                 retryable=False)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"malformed response body: {exc}", retryable=False) from exc


# --- client --------------------------------------------------------------------

class TokenBucket:
    def __init__(self, rate: float, capacity: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ConfigurationError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.clock, self.sleep = clock, sleep
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class GenerativeClient:
    """Retrying, rate-limited front end to a transport.

    Transport errors are retried with exponential backoff; rate-limit signals
    wait at least the advertised ``retry_after``. After ``max_retries``
    retries a :class:`DeliveryError` is raised.
    """

    def __init__(self, transport, max_retries: int = 3, backoff: float = 0.5,
                 max_in_flight: int = 4, rate_per_sec: float | None = None,
                 audit_log: str | Path | None = None, sleep: Callable[[float], None] = time.sleep):
        if max_retries < 0 or max_in_flight < 1:
            raise ConfigurationError("max_retries must be >= 0 and max_in_flight >= 1")
        self.transport = transport
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self.sleep = sleep
        self.bucket = TokenBucket(rate_per_sec, sleep=sleep) if rate_per_sec else None
        self.audit_path = Path(audit_log) if audit_log else None
        self._audit_lock = threading.Lock()

    def _audit(self, record: dict) -> None:
        if self.audit_path is None:
            return
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def complete(self, bundle: PromptBundle, params: SamplingParams,
                 instance_id: str | None = None) -> Completion:
        request = make_request(bundle, params, instance_id)
        started = datetime.now(timezone.utc).isoformat()
        attempt, last = 0, None
        while attempt <= self.max_retries:
            attempt += 1
            if self.bucket:
                self.bucket.acquire()
            try:
                text = self.transport.send(request)
            except RateLimitError as exc:
                last = exc
                delay = max(exc.retry_after, self.backoff * 2 ** (attempt - 1))
            except TransportError as exc:
                last = exc
                if not exc.retryable:
                    break
                delay = self.backoff * 2 ** (attempt - 1)
            else:
                self._audit({"instance_id": instance_id, "prompt_sha256": request["prompt_sha256"],
                             "params": request["params"], "raw_response": text,
                             "attempts": attempt, "started_at": started,
                             "finished_at": datetime.now(timezone.utc).isoformat()})
                return Completion(text, attempt)
            last.attempt = attempt
            log.warning("attempt %d for %s failed: %s", attempt, instance_id, last)
            if attempt <= self.max_retries:
                self.sleep(delay)
        self._audit({"instance_id": instance_id, "prompt_sha256": request["prompt_sha256"],
                     "params": request["params"], "raw_response": None, "attempts": attempt,
                     "error": str(last), "started_at": started,
                     "finished_at": datetime.now(timezone.utc).isoformat()})
        raise DeliveryError(str(last), attempt)

    def generate(self, bundle: PromptBundle, params: SamplingParams,
                 instance_id: str | None = None) -> str:
        """Return the model's raw text for one prompt."""
        return self.complete(bundle, params, instance_id).text

    def complete_many(self, jobs: Sequence[tuple[str, PromptBundle]],
                      params: SamplingParams) -> list[Completion | DeliveryError]:
        """Run ``(instance_id, bundle)`` jobs with bounded concurrency; results keep input order."""
        def one(job):
            iid, bundle = job
            try:
                return self.complete(bundle, params, iid)
            except DeliveryError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(one, jobs))
