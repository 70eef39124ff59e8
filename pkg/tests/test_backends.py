from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import window
from egfrlmm.backends import (
    MALFORMED_TEXT,
    Backend,
    BackendConfig,
    MockPolicy,
    RateLimiter,
    ResponseCache,
    build_request,
    cache_key,
    mock_predict,
    query,
    replay_run,
)
from egfrlmm.chartgen import render_trajectory
from egfrlmm.errors import ConfigError, CredentialError, OfflineViolation, PolicyError, ReplayError, TransportError
from egfrlmm.extraction import extract_pattern
from egfrlmm.prompting import PromptInstance


def mock_backend(kind="persistence", windows=(), **policy):
    cfg = BackendConfig("m", "mock", mock=MockPolicy(kind, **policy))
    return Backend(cfg, windows={w.window_id: w for w in windows})


def remote_config(adapter="openai", **kw):
    fields = dict(
        backend_id="r",
        kind="remote",
        adapter=adapter,
        endpoint="https://api.example.test/v1",
        model="vision-1",
        credential_env="EGFRLMM_TEST_KEY",
        max_retries=2,
        backoff_base=0.5,
    )
    fields.update(kw)
    return BackendConfig(**fields)


class Clock:
    def __init__(self):
        self.t = 0.0
        self.sleeps = []

    def __call__(self):
        return self.t

    def sleep(self, dt):
        self.sleeps.append(dt)
        self.t += dt


def remote_backend(handler, config=None):
    clock = Clock()
    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = Backend(config or remote_config(), http_client=client, clock=clock, sleep=clock.sleep)
    return backend, clock


def prompt_for(w, text="prompt text", template_id=1):
    return PromptInstance(template_id, text, w.window_id, "")


# -- mocks --------------------------------------------------------------------


def test_persistence_embeds_last_value():
    text = mock_predict(MockPolicy("persistence"), window([50.0, 48.2, 47.1]))
    assert "47.1" in text and extract_pattern(text) == 47.1


def test_linear_on_exact_line():
    # eGFR = 60 - 0.1 * day observed at days 0, 30, 60; target day 100
    w = window([60.0, 57.0, 54.0], days=[0, 30, 60], target_day=100)
    assert extract_pattern(mock_predict(MockPolicy("linear"), w)) == pytest.approx(50.0, abs=1e-12)


def test_linear_needs_two_points():
    with pytest.raises(PolicyError):
        mock_predict(MockPolicy("linear"), window([50.0], days=[0]))


def test_noisy_attempts_differ_but_reproduce():
    w = window([50.0, 48.2, 47.1])
    p = MockPolicy("noisy", sigma=2.0, seed=7)
    a1, a2 = mock_predict(p, w, 1, 1), mock_predict(p, w, 1, 2)
    assert a1 != a2
    assert a1 == mock_predict(MockPolicy("noisy", sigma=2.0, seed=7), w, 1, 1)
    assert a1 != mock_predict(MockPolicy("noisy", sigma=2.0, seed=8), w, 1, 1)


def test_mocks_ignore_target():
    a = window([50.0, 48.2, 47.1], target=10.0)
    b = window([50.0, 48.2, 47.1], target=90.0)
    for kind in ("persistence", "linear"):
        assert mock_predict(MockPolicy(kind), a) == mock_predict(MockPolicy(kind), b)


def test_malformed_and_scripted():
    assert mock_predict(MockPolicy("malformed"), None) == MALFORMED_TEXT
    assert extract_pattern(MALFORMED_TEXT) is None
    assert mock_predict(MockPolicy("scripted", reply="41"), None) == "41"


def test_config_validation():
    with pytest.raises(ConfigError):
        MockPolicy("oracle")
    with pytest.raises(ConfigError):
        BackendConfig("m", "mock")
    with pytest.raises(ConfigError):
        remote_config(credential_env="")
    with pytest.raises(ConfigError):
        remote_config(max_retries=-1)
    with pytest.raises(ConfigError):
        remote_config(rate_limit_per_minute=0)
    with pytest.raises(ConfigError):
        BackendConfig("../x", "mock", mock=MockPolicy("linear"))


# -- cache --------------------------------------------------------------------

BASE_KEY = dict(backend_id="b", model="m", prompt_digest="p" * 64, image_digest="i" * 64, attempt_index=1)


@given(st.sampled_from(["model", "prompt_digest", "image_digest", "attempt_index", "backend_id"]), st.data())
def test_cache_key_changes_with_every_field(field, data):
    changed = dict(BASE_KEY)
    if field == "attempt_index":
        changed[field] = data.draw(st.integers(2, 100))
    else:
        changed[field] = data.draw(st.text(min_size=1).filter(lambda s: s != BASE_KEY[field]))
    assert cache_key(**changed) != cache_key(**BASE_KEY)


def test_cache_key_tracks_prompt_and_image_bytes():
    w = window([50.0, 48.2, 47.1])
    img = render_trajectory(w)
    other = render_trajectory(window([50.0, 48.2, 47.0]))
    p1, p2 = prompt_for(w, "a"), prompt_for(w, "b")
    assert cache_key("b", "m", p1.text_digest, img.digest, 1) != cache_key("b", "m", p2.text_digest, img.digest, 1)
    assert cache_key("b", "m", p1.text_digest, img.digest, 1) != cache_key("b", "m", p1.text_digest, other.digest, 1)


def test_query_caches_and_hits(tmp_path):
    w = window([50.0, 48.2, 47.1])
    cache = ResponseCache(tmp_path)
    backend = mock_backend(windows=[w])
    first = query(backend, prompt_for(w), render_trajectory(w), 1, cache)
    assert not first.from_cache
    stored = cache.path("m", first.cache_key)
    assert stored.exists() and json.loads(stored.read_text())["raw_text"] == first.raw_text

    backend.windows = {}  # a hit must not need the mock at all
    second = query(backend, prompt_for(w), render_trajectory(w), 1, cache)
    assert second.from_cache and second.raw_text == first.raw_text
    assert second.received_at == first.received_at
    assert query(mock_backend(windows=[w]), prompt_for(w), render_trajectory(w), 2, cache).cache_key != first.cache_key


def test_cache_preserves_raw_text_bytes(tmp_path):
    cache = ResponseCache(tmp_path)
    raw = "  predicted value ≈ 41.0 mL/min/1.73m²\r\n\ttrailing  "
    cache.put("b", "k", {"raw_text": raw})
    assert cache.get("b", "k")["raw_text"] == raw
    assert cache.get("b", "missing") is None
    assert not list((tmp_path / "b").glob(".tmp-*"))


def test_query_rejects_attempt_zero():
    w = window([50.0, 48.2, 47.1])
    with pytest.raises(ValueError):
        query(mock_backend(windows=[w]), prompt_for(w), None, 0)


def test_replay_full_and_missing(tmp_path):
    ws = [window([50.0, 48.2, 47.1], pid=f"P{i}") for i in range(3)]
    backend = mock_backend(windows=ws)
    cache = ResponseCache(tmp_path)
    originals = [query(backend, prompt_for(w), None, 1, cache) for w in ws]
    manifest = [
        {k: getattr(r, k) for k in ("backend_id", "window_id", "template_id", "attempt_index", "cache_key")}
        for r in originals
    ]
    replayed = list(replay_run(tmp_path, manifest))
    assert [r.raw_text for r in replayed] == [r.raw_text for r in originals]

    cache.path("m", originals[1].cache_key).unlink()
    with pytest.raises(ReplayError, match=originals[1].cache_key) as info:
        list(replay_run(tmp_path, manifest))
    assert info.value.key == originals[1].cache_key


# -- rate limiting ------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 20),
    st.floats(0, 1e7, allow_nan=False),
    st.lists(st.floats(0, 30, allow_nan=False), min_size=1, max_size=80),
)
def test_rate_limit_never_exceeded(limit, start, gaps):
    clock = Clock()
    clock.t = start
    limiter = RateLimiter(limit, clock=clock, sleep=clock.sleep)
    stamps = []
    for gap in gaps:
        clock.t += gap
        limiter.acquire()
        stamps.append(clock.t)
    for i, t in enumerate(stamps):
        in_window = [s for s in stamps[i:] if s < t + 60.0]
        assert len(in_window) <= limit


def test_rate_limit_terminates_at_large_clock_values():
    # "60 - elapsed" style waits can round below one ulp here and never advance the clock
    clock = Clock()
    clock.t = 1e6 + 0.1
    limiter = RateLimiter(3, clock=clock, sleep=clock.sleep)
    for gap in [0.3, 0.7, 0.1, 29.9, 0.0, 1e-9] * 20:
        clock.t += gap
        limiter.acquire()
    assert len(clock.sleeps) > 0


def test_rate_limit_blocks_until_slot_frees():
    clock = Clock()
    limiter = RateLimiter(2, clock=clock, sleep=clock.sleep)
    for _ in range(3):
        limiter.acquire()
    assert clock.t == 60.0 and clock.sleeps == [60.0]


# -- remote adapters ----------------------------------------------------------

REPLIES = {
    "openai": {"choices": [{"message": {"content": "I predict 44.0 mL/min/1.73m²."}}]},
    "anthropic": {"content": [{"type": "text", "text": "I predict 44.0 mL/min/1.73m²."}]},
    "gemini": {"candidates": [{"content": {"parts": [{"text": "I predict 44.0 mL/min/1.73m²."}]}}]},
}


@pytest.mark.parametrize("adapter", sorted(REPLIES))
def test_adapter_round_trip(adapter, monkeypatch):
    monkeypatch.setenv("EGFRLMM_TEST_KEY", "sk-test")
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json=REPLIES[adapter])

    backend, _ = remote_backend(handler, remote_config(adapter))
    assert backend.complete("hello", b"\x89PNG") == "I predict 44.0 mL/min/1.73m²."
    body = json.loads(seen[0].content)
    assert "sk-test" in " ".join(seen[0].headers.values())
    assert "sk-test" not in seen[0].content.decode()
    assert "iVBORw" in json.dumps(body)  # base64 of the PNG magic


def test_request_passes_temperature():
    _, _, body = build_request(remote_config(temperature=0.0), "k", "hi", None)
    assert body["temperature"] == 0.0
    _, _, body = build_request(remote_config(), "k", "hi", None)
    assert "temperature" not in body


def test_retries_with_exponential_backoff(monkeypatch):
    monkeypatch.setenv("EGFRLMM_TEST_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=REPLIES["openai"])

    backend, clock = remote_backend(handler)
    assert "44.0" in backend.complete("hi", None)
    assert len(calls) == 3 and clock.sleeps == [0.5, 1.0]
    assert backend.request_count == 3


def test_retries_exhausted(monkeypatch):
    monkeypatch.setenv("EGFRLMM_TEST_KEY", "sk-test")

    def handler(request):
        raise httpx.ConnectError("down", request=request)

    backend, _ = remote_backend(handler)
    with pytest.raises(TransportError, match="retries exhausted"):
        backend.complete("hi", None)
    assert backend.request_count == 3


def test_auth_failure_not_retried(monkeypatch):
    monkeypatch.setenv("EGFRLMM_TEST_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(401)

    backend, _ = remote_backend(handler)
    with pytest.raises(CredentialError):
        backend.complete("hi", None)
    assert len(calls) == 1


def test_missing_credential(monkeypatch):
    monkeypatch.delenv("EGFRLMM_TEST_KEY", raising=False)
    backend, _ = remote_backend(lambda r: httpx.Response(200, json=REPLIES["openai"]))
    with pytest.raises(CredentialError, match="EGFRLMM_TEST_KEY"):
        backend.complete("hi", None)


def test_offline_blocks_remote():
    backend = Backend(remote_config(), offline=True)
    with pytest.raises(OfflineViolation):
        backend.complete("hi", None)


def test_offline_remote_served_from_cache(tmp_path):
    w = window([50.0, 48.2, 47.1])
    cache = ResponseCache(tmp_path)
    cfg = remote_config()
    p = prompt_for(w)
    key = cache_key("r", cfg.model_name, p.text_digest, "", 1)
    cache.put("r", key, {"raw_text": "cached 43.0", "received_at": "t", "status": "ok",
                         "request": {"prompt_digest": p.text_digest, "image_digest": ""}})
    r = query(Backend(cfg, offline=True), p, None, 1, cache)
    assert r.from_cache and r.raw_text == "cached 43.0"
