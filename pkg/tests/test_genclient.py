import json
import threading
import time

import pytest

from mathforge.errors import RateLimited, Timeout, UpstreamError
from mathforge.genclient import (
    BACKOFF_BASE_SECONDS,
    BACKOFF_FACTOR,
    MAX_ATTEMPTS,
    MockRule,
    ScriptedVlmBackend,
    TokenBucket,
    VlmClient,
    VlmRequest,
    build_backend,
    cache_key,
    request_id_for,
)


def make_request(**overrides) -> VlmRequest:
    defaults = dict(model_id="m", prompt="hello", image=b"png-bytes", temperature=0.0, max_tokens=64)
    defaults.update(overrides)
    return VlmRequest(**defaults)


def test_cache_key_stable_for_identical_requests():
    assert cache_key(make_request()) == cache_key(make_request())


@pytest.mark.parametrize(
    "change",
    [
        {"model_id": "other"},
        {"prompt": "different"},
        {"image": b"other-bytes"},
        {"temperature": 0.7},
        {"max_tokens": 65},
    ],
)
def test_cache_key_sensitive_to_every_field(change):
    assert cache_key(make_request()) != cache_key(make_request(**change))


def test_cache_key_ignores_file_names():
    # Content-addressed: the key never sees a path, only bytes.
    same_bytes = b"identical image content"
    a = make_request(image=same_bytes)
    b = make_request(image=bytes(same_bytes))
    assert cache_key(a) == cache_key(b)


def test_request_id_is_deterministic():
    digest = cache_key(make_request())
    assert request_id_for(digest) == "req-" + digest[:16]


def test_prompt_and_image_must_be_non_empty():
    with pytest.raises(ValueError):
        make_request(prompt="")
    with pytest.raises(ValueError):
        make_request(image=b"")


class CountingBackend:
    def __init__(self, text="reply", failures=0, exc=None):
        self.calls = 0
        self.text = text
        self.failures = failures
        self.exc = exc

    def send(self, request):
        self.calls += 1
        if self.exc is not None and self.calls <= self.failures:
            raise self.exc
        return self.text


def test_cache_hit_skips_upstream(tmp_path):
    backend = CountingBackend()
    client = VlmClient(backend, cache_dir=tmp_path)
    first = client.complete(make_request())
    second = client.complete(make_request())
    assert backend.calls == 1
    assert not first.cached
    assert second.cached
    assert first.text == second.text == "reply"
    assert first.request_id == second.request_id
    assert client.stats.cache_hits == 1


def test_cache_survives_client_restart(tmp_path):
    backend = CountingBackend()
    VlmClient(backend, cache_dir=tmp_path).complete(make_request())
    fresh = VlmClient(backend, cache_dir=tmp_path)
    response = fresh.complete(make_request())
    assert backend.calls == 1
    assert response.cached


def test_throttle_retries_with_exponential_backoff(tmp_path):
    from mathforge.errors import Throttled

    sleeps: list[float] = []
    backend = CountingBackend(failures=10, exc=Throttled("busy"))
    client = VlmClient(backend, cache_dir=tmp_path, sleep=sleeps.append)
    with pytest.raises(RateLimited):
        client.complete(make_request())
    assert backend.calls == MAX_ATTEMPTS
    expected = [BACKOFF_BASE_SECONDS * BACKOFF_FACTOR**i for i in range(MAX_ATTEMPTS - 1)]
    assert sleeps == expected


def test_throttle_then_success(tmp_path):
    from mathforge.errors import Throttled

    sleeps: list[float] = []
    backend = CountingBackend(failures=2, exc=Throttled("busy"))
    client = VlmClient(backend, cache_dir=tmp_path, sleep=sleeps.append)
    response = client.complete(make_request())
    assert response.text == "reply"
    assert backend.calls == 3
    assert sleeps == [1.0, 2.0]
    assert client.stats.retries == 2


def test_upstream_error_is_not_retried(tmp_path):
    backend = CountingBackend(failures=10, exc=UpstreamError("500"))
    client = VlmClient(backend, cache_dir=tmp_path, sleep=lambda _: None)
    with pytest.raises(UpstreamError):
        client.complete(make_request())
    assert backend.calls == 1


def test_timeout_propagates_immediately(tmp_path):
    backend = CountingBackend(failures=10, exc=Timeout("slow"))
    client = VlmClient(backend, cache_dir=tmp_path, sleep=lambda _: None)
    with pytest.raises(Timeout):
        client.complete(make_request())
    assert backend.calls == 1


def test_scripted_backend_returns_canned_text():
    backend = ScriptedVlmBackend([MockRule(match="hello", response="T")])
    assert backend.send(make_request()) == "T"


def test_scripted_backend_rule_order_and_expansion():
    backend = ScriptedVlmBackend(
        [
            MockRule(match=r"answer: (\w+)", response=r"echo \1"),
            MockRule(match=".*", response="fallback"),
        ]
    )
    assert backend.send(make_request(prompt="the answer: blue here")) == "echo blue"
    assert backend.send(make_request(prompt="nothing relevant")) == "fallback"


def test_scripted_backend_no_match_raises():
    backend = ScriptedVlmBackend([MockRule(match="never", response="x")])
    with pytest.raises(UpstreamError):
        backend.send(make_request(prompt="hello"))


def test_scripted_backend_default_response():
    backend = ScriptedVlmBackend([], default="D")
    assert backend.send(make_request()) == "D"


def test_build_backend_reads_script(tmp_path):
    script = tmp_path / "mock.json"
    script.write_text(json.dumps({"rules": [{"match": "x", "response": "y"}]}))
    backend = build_backend(f"mock:{script}")
    assert isinstance(backend, ScriptedVlmBackend)
    assert backend.send(make_request(prompt="box")) == "y"


def test_build_backend_rejects_garbage():
    with pytest.raises(ValueError):
        build_backend("carrier-pigeon:coop")


def test_concurrent_identical_requests_single_flight(tmp_path):
    class SlowBackend:
        def __init__(self):
            self.calls = 0
            self._lock = threading.Lock()

        def send(self, request):
            with self._lock:
                self.calls += 1
            time.sleep(0.05)
            return "slow reply"

    backend = SlowBackend()
    client = VlmClient(backend, cache_dir=tmp_path)
    results = []
    threads = [
        threading.Thread(target=lambda: results.append(client.complete(make_request())))
        for _ in range(6)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.calls == 1
    assert {r.text for r in results} == {"slow reply"}


def test_in_flight_concurrency_never_exceeds_limit(tmp_path):
    class GaugeBackend:
        def __init__(self):
            self.active = 0
            self.max_active = 0
            self._lock = threading.Lock()

        def send(self, request):
            with self._lock:
                self.active += 1
                self.max_active = max(self.max_active, self.active)
            time.sleep(0.02)
            with self._lock:
                self.active -= 1
            return request.prompt

    backend = GaugeBackend()
    client = VlmClient(backend, cache_dir=tmp_path, max_concurrency=2)
    threads = [
        threading.Thread(target=client.complete, args=(make_request(prompt=f"p{i}"),))
        for i in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.max_active <= 2


def test_token_bucket_enforces_rate():
    now = [0.0]
    sleeps: list[float] = []

    def clock():
        return now[0]

    def sleep(duration):
        sleeps.append(duration)
        now[0] += duration

    bucket = TokenBucket(rpm=2, clock=clock, sleep=sleep)
    bucket.acquire()
    bucket.acquire()  # burst capacity of 2
    bucket.acquire()  # must wait for a refill at 2/minute
    assert sleeps and abs(sleeps[0] - 30.0) < 1e-9


def test_raw_response_stored_verbatim(tmp_path):
    backend = CountingBackend(text="line1\nline2 ✓")
    client = VlmClient(backend, cache_dir=tmp_path)
    response = client.complete(make_request())
    digest = cache_key(make_request())
    stored = json.loads((tmp_path / f"{digest}.json").read_text(encoding="utf-8"))
    assert stored["raw"] == "line1\nline2 ✓"
    assert stored["text"] == response.text
