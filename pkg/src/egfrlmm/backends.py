"""Dispatch chart + prompt queries to model endpoints or offline mocks.

Every answer goes through a file cache keyed on everything that can change the
answer, so reruns and offline replays never touch the network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import httpx
import numpy as np

from egfrlmm.chartgen import ChartImage
from egfrlmm.cohort import PredictionWindow
from egfrlmm.errors import (
    ConfigError,
    CredentialError,
    OfflineViolation,
    PolicyError,
    ReplayError,
    TransportError,
)
from egfrlmm.prompting import PromptInstance

logger = logging.getLogger(__name__)

MOCK_POLICIES = ("persistence", "linear", "noisy", "malformed", "scripted")
ADAPTERS = ("openai", "anthropic", "gemini")
DEFAULT_REPEATS = 3

MALFORMED_TEXT = (
    "The trajectory is concerning and the patient should be followed closely; "
    "I cannot give a reliable estimate from this information alone."
)


@dataclass(frozen=True)
class MockPolicy:
    kind: str
    sigma: float = 0.0
    seed: int = 0
    reply: str = ""

    def __post_init__(self):
        if self.kind not in MOCK_POLICIES:
            raise ConfigError(f"unknown mock policy {self.kind!r}; expected one of {MOCK_POLICIES}")
        if self.sigma < 0:
            raise ConfigError("noisy mock sigma must be >= 0")

    def describe(self) -> str:
        if self.kind == "noisy":
            return f"mock:noisy(sigma={self.sigma!r},seed={self.seed})"
        if self.kind == "scripted":
            return "mock:scripted(" + hashlib.sha256(self.reply.encode()).hexdigest()[:16] + ")"
        return f"mock:{self.kind}"


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: str  # "remote" or "mock"
    adapter: str = "openai"
    endpoint: str = ""
    model: str = ""
    credential_env: str = ""
    mock: MockPolicy | None = None
    timeout: float = 60.0
    max_retries: int = 3
    rate_limit_per_minute: float = 60.0
    temperature: float | None = None
    max_tokens: int = 1024
    backoff_base: float = 1.0

    def __post_init__(self):
        if not self.backend_id or "/" in self.backend_id or self.backend_id.startswith("."):
            raise ConfigError(f"invalid backend id {self.backend_id!r}")
        if self.kind not in ("remote", "mock"):
            raise ConfigError(f"backend {self.backend_id}: kind must be 'remote' or 'mock'")
        if self.max_retries < 0:
            raise ConfigError(f"backend {self.backend_id}: max_retries must be >= 0")
        if not self.rate_limit_per_minute > 0:
            raise ConfigError(f"backend {self.backend_id}: rate limit must be > 0")
        if self.kind == "mock" and self.mock is None:
            raise ConfigError(f"backend {self.backend_id}: mock backends need a policy")
        if self.kind == "remote":
            if self.adapter not in ADAPTERS:
                raise ConfigError(f"backend {self.backend_id}: adapter must be one of {ADAPTERS}")
            if not (self.endpoint and self.model and self.credential_env):
                raise ConfigError(
                    f"backend {self.backend_id}: remote backends need endpoint, model and credential_env"
                )

    @property
    def model_name(self) -> str:
        return self.model if self.kind == "remote" else self.mock.describe()


@dataclass(frozen=True)
class ModelResponse:
    backend_id: str
    window_id: str
    template_id: int
    attempt_index: int
    raw_text: str
    received_at: str
    status: str
    cache_key: str
    prompt_digest: str = ""
    image_digest: str = ""
    from_cache: bool = field(default=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("from_cache")
        return d


# ---------------------------------------------------------------------------
# Mock answers


def echo_sentence(value: float, days: int, template_id: int) -> str:
    """Prose that echoes the wording of the prompt it answers, with the value at full precision."""
    v = repr(float(value))
    forms = {
        1: f"The most likely predicted value for the next {days} days is {v} mL/min/1.73m².",
        2: f"Based on the plot, the most likely predicted value for the next {days} days is {v}mL/min/1.73m².",
        3: (
            "The eGFR values show a steady pattern across the recorded visits. "
            f"Over the next {days} days, the patient's eGFR might evolve to approximately {v} mL/min/1.73m²."
        ),
        4: f"As a nephrologist, I would predict the next {days} days point's eGFR value as {v}mL/min/1.73m² for this patient.",
    }
    return forms.get(template_id, forms[1])


def _ols_forecast(window: PredictionWindow) -> float:
    visits = window.observed_visits
    if len(visits) < 2:
        raise PolicyError(f"linear mock needs >= 2 observed points, window {window.window_id} has {len(visits)}")
    t0 = visits[0].date.toordinal()
    xs = [v.date.toordinal() - t0 for v in visits]
    ys = [v.egfr for v in visits]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    x_target = xs[-1] + window.next_day_diff
    return my + slope * (x_target - mx)


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def mock_predict(
    policy: MockPolicy,
    window: PredictionWindow | None,
    template_id: int = 1,
    attempt_index: int = 1,
) -> str:
    """Deterministic stand-in answer. Never looks at the target visit's eGFR."""
    if policy.kind == "scripted":
        return policy.reply
    if policy.kind == "malformed":
        return MALFORMED_TEXT
    if window is None:
        raise PolicyError(f"mock policy {policy.kind} needs a window")
    if policy.kind == "persistence":
        value = window.last_observed.egfr
    else:
        value = _ols_forecast(window)
        if policy.kind == "noisy":
            rng = np.random.default_rng(
                [policy.seed, _stable_int(window.window_id), template_id, attempt_index]
            )
            value += float(rng.normal(0.0, policy.sigma))
    return echo_sentence(value, window.next_day_diff, template_id)


# ---------------------------------------------------------------------------
# Cache


def cache_key(backend_id: str, model: str, prompt_digest: str, image_digest: str, attempt_index: int) -> str:
    payload = json.dumps(
        {
            "attempt_index": attempt_index,
            "backend_id": backend_id,
            "image_digest": image_digest,
            "model": model,
            "prompt_digest": prompt_digest,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


class ResponseCache:
    """One JSON record per key under ``<root>/<backend_id>/<key>``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, backend_id: str, key: str) -> Path:
        return self.root / backend_id / key

    def get(self, backend_id: str, key: str) -> dict | None:
        p = self.path(backend_id, key)
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None

    def put(self, backend_id: str, key: str, record: dict) -> None:
        target = self.path(backend_id, key)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# ---------------------------------------------------------------------------
# Rate limiting


class RateLimiter:
    """Sliding 60-second window; ``acquire`` blocks until a slot frees up."""

    def __init__(
        self,
        per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not per_minute > 0:
            raise ConfigError("rate limit must be > 0")
        self.limit = max(int(per_minute), 1)
        self.clock = clock
        self.sleep = sleep
        # When each granted slot frees up again.
        self._expiry: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                while self._expiry and now >= self._expiry[0]:
                    self._expiry.popleft()
                if len(self._expiry) < self.limit:
                    self._expiry.append(now + 60.0)
                    return
                # Sleeping until the stored expiry (not "60 - elapsed") cannot stall on rounding.
                self.sleep(self._expiry[0] - now)


# ---------------------------------------------------------------------------
# Vendor adapters


def build_request(config: BackendConfig, api_key: str, prompt_text: str, image_png: bytes | None):
    """Return (url, headers, json body) for one chat request with an optional PNG."""
    b64 = base64.b64encode(image_png).decode("ascii") if image_png else None
    base = config.endpoint.rstrip("/")
    if config.adapter == "openai":
        content: list[dict] = [{"type": "text", "text": prompt_text}]
        if b64:
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        body: dict = {"model": config.model, "messages": [{"role": "user", "content": content}]}
        if config.temperature is not None:
            body["temperature"] = config.temperature
        return f"{base}/chat/completions", {"Authorization": f"Bearer {api_key}"}, body
    if config.adapter == "anthropic":
        content = []
        if b64:
            content.append({"type": "image", "source": {"type": "base64", "media_type": "image/png", "data": b64}})
        content.append({"type": "text", "text": prompt_text})
        body = {
            "model": config.model,
            "max_tokens": config.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }
        if config.temperature is not None:
            body["temperature"] = config.temperature
        headers = {"x-api-key": api_key, "anthropic-version": "2023-06-01"}
        return f"{base}/messages", headers, body
    if config.adapter == "gemini":
        parts: list[dict] = [{"text": prompt_text}]
        if b64:
            parts.append({"inline_data": {"mime_type": "image/png", "data": b64}})
        body = {"contents": [{"role": "user", "parts": parts}]}
        if config.temperature is not None:
            body["generationConfig"] = {"temperature": config.temperature}
        return f"{base}/models/{config.model}:generateContent", {"x-goog-api-key": api_key}, body
    raise ConfigError(f"unknown adapter {config.adapter!r}")


def parse_response(adapter: str, data: Mapping) -> str:
    try:
        if adapter == "openai":
            content = data["choices"][0]["message"]["content"]
            if isinstance(content, list):
                return "".join(part.get("text", "") for part in content)
            return content or ""
        if adapter == "anthropic":
            return "".join(b.get("text", "") for b in data["content"] if b.get("type") == "text")
        if adapter == "gemini":
            parts = data["candidates"][0]["content"]["parts"]
            return "".join(p.get("text", "") for p in parts)
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected {adapter} response shape: {exc!r}") from exc
    raise ConfigError(f"unknown adapter {adapter!r}")


# ---------------------------------------------------------------------------
# Backends


class Backend:
    """A configured endpoint plus its shared rate limiter and request counter."""

    def __init__(
        self,
        config: BackendConfig,
        *,
        windows: Mapping[str, PredictionWindow] | None = None,
        http_client: httpx.Client | None = None,
        offline: bool = False,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        now: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
    ):
        self.config = config
        self.windows = windows or {}
        self.offline = offline
        self.sleep = sleep
        self.now = now
        self.limiter = RateLimiter(config.rate_limit_per_minute, clock=clock, sleep=sleep)
        self._http = http_client
        self._lock = threading.Lock()
        self.request_count = 0

    @property
    def backend_id(self) -> str:
        return self.config.backend_id

    def complete(self, prompt_text: str, image_png: bytes | None, window_id: str = "", template_id: int = 1,
                 attempt_index: int = 1) -> str:
        if self.config.kind == "mock":
            window = self.windows.get(window_id) if window_id else None
            return mock_predict(self.config.mock, window, template_id, attempt_index)
        if self.offline:
            raise OfflineViolation(f"backend {self.backend_id}: network access is disabled in offline mode")
        return self._remote(prompt_text, image_png)

    def _client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=self.config.timeout)
        return self._http

    def _remote(self, prompt_text: str, image_png: bytes | None) -> str:
        cfg = self.config
        api_key = os.environ.get(cfg.credential_env, "")
        if not api_key:
            raise CredentialError(f"backend {cfg.backend_id}: environment variable {cfg.credential_env} is not set")
        url, headers, body = build_request(cfg, api_key, prompt_text, image_png)
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleep(min(cfg.backoff_base * 2 ** (attempt - 1), 60.0))
            self.limiter.acquire()
            with self._lock:
                self.request_count += 1
            try:
                resp = self._client().post(url, headers=headers, json=body, timeout=cfg.timeout)
            except httpx.HTTPError as exc:
                last = exc
                logger.warning("%s: attempt %d failed: %r", cfg.backend_id, attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise CredentialError(f"backend {cfg.backend_id}: credentials rejected (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                logger.warning("%s: attempt %d got HTTP %d", cfg.backend_id, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"backend {cfg.backend_id}: HTTP {resp.status_code}: {resp.text[:200]}")
            return parse_response(cfg.adapter, resp.json())
        raise TransportError(f"backend {cfg.backend_id}: retries exhausted ({cfg.max_retries}): {last!r}")


def query(
    backend: Backend,
    prompt: PromptInstance,
    image: ChartImage | None,
    attempt_index: int,
    cache: ResponseCache | None = None,
) -> ModelResponse:
    """Answer one (prompt, image, attempt) cell, consulting the cache first.

    Raises TransportError when retries run out; failures are not cached.
    """
    if attempt_index < 1:
        raise ValueError("attempt_index must be >= 1")
    image_digest = image.digest if image is not None else ""
    key = cache_key(backend.backend_id, backend.config.model_name, prompt.text_digest, image_digest, attempt_index)
    if cache is not None:
        record = cache.get(backend.backend_id, key)
        if record is not None:
            return ModelResponse(
                backend_id=backend.backend_id,
                window_id=prompt.window_id,
                template_id=prompt.template_id,
                attempt_index=attempt_index,
                raw_text=record["raw_text"],
                received_at=record["received_at"],
                status=record["status"],
                cache_key=key,
                prompt_digest=prompt.text_digest,
                image_digest=image_digest,
                from_cache=True,
            )
    raw = backend.complete(
        prompt.rendered_text,
        image.png_bytes() if image is not None and backend.config.kind == "remote" else None,
        window_id=prompt.window_id,
        template_id=prompt.template_id,
        attempt_index=attempt_index,
    )
    response = ModelResponse(
        backend_id=backend.backend_id,
        window_id=prompt.window_id,
        template_id=prompt.template_id,
        attempt_index=attempt_index,
        raw_text=raw,
        received_at=backend.now().isoformat(),
        status="ok",
        cache_key=key,
        prompt_digest=prompt.text_digest,
        image_digest=image_digest,
    )
    if cache is not None:
        cache.put(
            backend.backend_id,
            key,
            {
                "request": {
                    "backend_id": backend.backend_id,
                    "model": backend.config.model_name,
                    "prompt_digest": prompt.text_digest,
                    "image_digest": image_digest,
                    "attempt_index": attempt_index,
                },
                "raw_text": raw,
                "received_at": response.received_at,
                "status": "ok",
            },
        )
    return response


def replay_run(cache_dir: str | Path, manifest: Iterable[Mapping]) -> Iterator[ModelResponse]:
    """Re-emit the responses listed in ``manifest`` straight from the cache.

    Manifest entries carry backend_id, window_id, template_id, attempt_index and
    cache_key. Any missing entry raises ReplayError naming its key.
    """
    cache = ResponseCache(cache_dir)
    for entry in manifest:
        record = cache.get(entry["backend_id"], entry["cache_key"])
        if record is None:
            raise ReplayError(
                entry["cache_key"],
                f"cache miss during replay: {entry['backend_id']}/{entry['cache_key']} "
                f"(window {entry['window_id']}, template {entry['template_id']}, attempt {entry['attempt_index']})",
            )
        yield ModelResponse(
            backend_id=entry["backend_id"],
            window_id=entry["window_id"],
            template_id=entry["template_id"],
            attempt_index=entry["attempt_index"],
            raw_text=record["raw_text"],
            received_at=record["received_at"],
            status=record["status"],
            cache_key=entry["cache_key"],
            prompt_digest=record["request"]["prompt_digest"],
            image_digest=record["request"]["image_digest"],
            from_cache=True,
        )
