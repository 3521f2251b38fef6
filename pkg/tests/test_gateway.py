import json
import random
import string
import threading
import time

import numpy as np
import pytest

from cotrec.gateway import (
    CapabilityError,
    ChatRequest,
    ChatResponse,
    DiskCache,
    Gateway,
    MockBackend,
    TransientError,
    TransportError,
)


def req(text="hello", **kw):
    return ChatRequest("system", text, **kw)


def test_cache_hit_is_byte_identical(tmp_path):
    gw = Gateway(MockBackend(), DiskCache(tmp_path))
    a = gw.chat(req())
    b = gw.chat(req())
    assert a == b
    assert gw.backend_calls == 1 and gw.cache_hits == 1
    assert len(gw.cache) == 1


def test_mock_is_pure_across_instances():
    assert MockBackend(seed=3).chat(req("x")) == MockBackend(seed=3).chat(req("x"))
    assert MockBackend(seed=3).chat(req("x")) != MockBackend(seed=4).chat(req("x"))


def test_label_scores_cover_label_set():
    resp = Gateway(MockBackend()).chat(req(label_set=("A", "B", "C")))
    assert set(resp.label_scores) == {"A", "B", "C"}
    assert resp.text == max(resp.label_scores, key=resp.label_scores.get)


def test_no_label_scoring_raises_capability():
    with pytest.raises(CapabilityError):
        Gateway(MockBackend(label_scoring=False)).chat(req(label_set=("A", "B")))


def test_bad_label_set_rejected():
    with pytest.raises(ValueError):
        req(label_set=("A", "A"))
    with pytest.raises(ValueError):
        req(label_set=())


def test_mock_template_embeds_digest_and_bullets():
    out = MockBackend().chat(ChatRequest("s", "items:\n- first thing\n- second thing", task="summarize")).text
    assert out.startswith("SUMMARIZE[")
    assert "first thing" in out and "second thing" in out


def test_embed_deterministic_and_distinct():
    gw = Gateway(MockBackend(dim=16))
    a = gw.embed(["same text", "same text"]).vectors
    assert np.array_equal(a[0], a[1])
    rng = random.Random(0)
    texts = list({"".join(rng.choices(string.ascii_lowercase + " ", k=12)) for _ in range(1000)})
    v = gw.embed(texts).vectors
    assert len({row.tobytes() for row in v}) == len(texts)


def test_embed_empty_list_rejected():
    with pytest.raises(ValueError):
        Gateway(MockBackend()).embed([])


def test_embed_per_text_cache(tmp_path):
    gw = Gateway(MockBackend(dim=8), DiskCache(tmp_path))
    first = gw.embed(["a b", "c d"]).vectors
    calls = gw.backend_calls
    again = gw.embed(["c d", "a b", "e"]).vectors
    assert gw.backend_calls == calls + 1
    assert np.array_equal(again[0], first[1]) and np.array_equal(again[1], first[0])


def test_pinned_vectors_change_backend_id():
    a = MockBackend(vectors={"x": [1.0, 0.0]}, dim=2)
    b = MockBackend(vectors={"x": [0.0, 1.0]}, dim=2)
    assert a.backend_id != b.backend_id
    assert np.array_equal(a.embed(["x"])[0], [1.0, 0.0])


class Flaky:
    backend_id = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientError("503")
        return ChatResponse("ok")

    def embed(self, texts):
        raise NotImplementedError


def test_retries_then_succeeds():
    delays = []
    gw = Gateway(Flaky(2), max_attempts=3, sleep=delays.append)
    assert gw.chat(req()).text == "ok"
    assert len(delays) == 2 and delays[1] > delays[0] * 0.3
    assert gw.backend_calls == 3


def test_exhausted_retries_is_transport_error():
    gw = Gateway(Flaky(10), max_attempts=3, sleep=lambda s: None)
    with pytest.raises(TransportError):
        gw.chat(req())


class Slow:
    backend_id = "slow"

    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def chat(self, request):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.01)
        with self.lock:
            self.active -= 1
        return ChatResponse(request.user_prompt)

    def embed(self, texts):
        raise NotImplementedError


def test_in_flight_bound():
    backend = Slow()
    gw = Gateway(backend, max_in_flight=3)
    threads = [threading.Thread(target=gw.chat, args=(req(str(k)),)) for k in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert 1 <= backend.peak <= 3


def test_partial_cache_file_is_a_miss(tmp_path):
    cache = DiskCache(tmp_path)
    cache.put("k", b'{"ok": 1}')
    (tmp_path / "k.json").write_text('{"key": "k", "val')
    assert cache.get("k") is None


def test_transcript_records_meta(gateway):
    gateway.chat(req(task="describe"), item_id="x")
    entry = gateway.transcript[-1]
    assert entry.task == "describe" and entry.meta == {"item_id": "x"}


def http_backend(handler):
    import httpx

    from cotrec.gateway import HttpBackend

    return HttpBackend("http://llm.test/v1", "m", client=httpx.Client(transport=httpx.MockTransport(handler)))


def logprob_reply(tokens):
    import httpx

    top = [{"token": t, "logprob": lp} for t, lp in tokens]
    return httpx.Response(200, json={"choices": [{"message": {"content": tokens[0][0]},
                                                   "logprobs": {"content": [{"top_logprobs": top}]}}]})


def test_http_label_scores_from_logprobs():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return logprob_reply([("B", -0.1), (" A", -2.0), ("zzz", -3.0)])

    resp = Gateway(http_backend(handler)).chat(req(label_set=("A", "B", "C"), seed=3))
    assert seen["logprobs"] is True and seen["max_tokens"] == 1 and seen["seed"] == 3
    assert resp.label_scores["B"] > resp.label_scores["A"] > resp.label_scores["C"]


def test_http_without_logprobs_is_capability_error():
    import httpx

    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "A"}}]})

    with pytest.raises(CapabilityError):
        Gateway(http_backend(handler)).chat(req(label_set=("A", "B")))


def test_http_429_is_retried():
    import httpx

    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(429)
        return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

    gw = Gateway(http_backend(handler), max_attempts=4, sleep=lambda s: None)
    assert gw.chat(req()).text == "fine"
    assert len(calls) == 3


def test_http_client_error_not_retried():
    import httpx

    from cotrec.gateway import GatewayError

    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(GatewayError):
        Gateway(http_backend(handler), sleep=lambda s: None).chat(req())
    assert len(calls) == 1


def test_http_embeddings_ordered_by_index():
    import httpx

    def handler(request):
        return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0.0, 1.0]},
                                                  {"index": 0, "embedding": [1.0, 0.0]}]})

    v = Gateway(http_backend(handler)).embed(["a", "b"]).vectors
    assert v.tolist() == [[1.0, 0.0], [0.0, 1.0]]
