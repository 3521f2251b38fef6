"""Text-generation and text-embedding gateway with a content-addressed cache.

Every LLM call in the pipeline goes through :class:`Gateway`. A gateway wraps
one backend (``MockBackend`` for offline runs, ``HttpBackend`` for a
chat-completions style server), an optional :class:`DiskCache`, retry with
jittered exponential backoff, and a bound on in-flight requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class TransientError(GatewayError):
    """Rate limit, 5xx or transport failure; worth retrying."""


class TransportError(GatewayError):
    """Retries exhausted."""


class CapabilityError(GatewayError):
    """Backend cannot honour the request (e.g. no per-label scores)."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int = 512
    label_set: tuple[str, ...] | None = None
    # task names the template that produced the prompt; seed is forwarded to the backend
    task: str = ""
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.label_set is not None:
            labels = tuple(self.label_set)
            if not labels or any(not lab for lab in labels) or len(set(labels)) != len(labels):
                raise ValueError(f"label_set must hold distinct non-empty labels, got {labels!r}")
            object.__setattr__(self, "label_set", labels)

    def canonical(self) -> dict:
        return {
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "label_set": list(self.label_set) if self.label_set is not None else None,
            "task": self.task,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    label_scores: dict[str, float] | None = None

    def to_json(self) -> dict:
        return {"text": self.text, "label_scores": self.label_scores}

    @classmethod
    def from_json(cls, obj: dict) -> "ChatResponse":
        return cls(obj["text"], obj.get("label_scores"))


@dataclass(frozen=True)
class EmbedResponse:
    vectors: np.ndarray  # (len(texts), d_lm)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] == 0:
            raise ValueError(f"expected a (n, d) matrix with d > 0, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def cache_key(backend_id: str, payload: dict) -> str:
    return hashlib.sha256(canonical_bytes({"backend": backend_id, "request": payload})).hexdigest()


class DiskCache:
    """Directory of ``<hex key>.json`` files.

    Readers never lock. Writers go through write-to-temp then ``os.replace``
    so a reader sees either nothing or a complete entry.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> bytes | None:
        try:
            raw = self._path(key).read_bytes()
        except FileNotFoundError:
            return None
        try:
            return json.loads(raw)["value"].encode("utf-8")
        except (ValueError, KeyError, TypeError):
            log.warning("ignoring unreadable cache entry %s", key)
            return None

    def put(self, key: str, value: bytes) -> None:
        entry = {"key": key, "created_at": time.time(), "value": value.decode("utf-8")}
        tmp = self.root / f".{key}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_bytes(canonical_bytes(entry))
        os.replace(tmp, self._path(key))

    def __contains__(self, key: str) -> bool:
        return self._path(key).exists()

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.json"))


class Backend(Protocol):
    backend_id: str

    def chat(self, req: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


# -- mock backend -----------------------------------------------------------------

_TAG_RE = re.compile(r"^([A-Z]+)\[([0-9a-f]{8})\]", re.M)
_HEADER_RE = re.compile(r"^[A-Z]+\[[0-9a-f]{8}\](?: <- [^:]*)?: ")
_WORD_RE = re.compile(r"[a-z0-9]+")


def digest8(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def _bullets(prompt: str) -> list[str]:
    return [line[2:].strip() for line in prompt.splitlines() if line.startswith("- ") and line[2:].strip()]


def _segments(text: str) -> list[str]:
    """Content segments of a mock output, with its header stripped."""
    body = _HEADER_RE.sub("", text, count=1)
    return [s.strip() for s in body.split(" | ") if s.strip()]


class MockBackend:
    """Deterministic stand-in for an LLM: every output is a pure function of the request.

    Chat output has the form ``TASK[<digest>] <- PARENT[..] ...: seg | seg``
    where the digest hashes the request, the parents are the leading tags of
    earlier mock outputs quoted in the prompt, and the segments are echoed from
    the prompt's ``- `` bullet lines. The ``keywords`` task answers with a
    semicolon-separated list, and label requests get hash-derived scores.

    Embeddings are a normalised bag of hashed word vectors plus a small
    whole-text component, so texts sharing vocabulary point in similar
    directions while distinct texts still get distinct vectors. ``vectors``
    pins exact embeddings for chosen texts.
    """

    def __init__(
        self,
        seed: int = 0,
        dim: int = 128,
        label_scoring: bool = True,
        vectors: dict[str, Sequence[float]] | None = None,
        max_segments: int = 5,
    ):
        self.seed = seed
        self.dim = dim
        self.label_scoring = label_scoring
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in (vectors or {}).items()}
        self.max_segments = max_segments
        self._token_cache: dict[str, np.ndarray] = {}
        self.backend_id = f"mock:v1:seed={seed}:dim={dim}:labels={int(label_scoring)}"
        if self.vectors:
            pinned = hashlib.sha256()
            for k in sorted(self.vectors):
                pinned.update(k.encode("utf-8") + self.vectors[k].tobytes())
            self.backend_id += f":pinned={pinned.hexdigest()[:12]}"

    def _hash_int(self, *parts: str) -> int:
        h = hashlib.sha256("\x1f".join((str(self.seed),) + parts).encode("utf-8")).digest()
        return int.from_bytes(h[:8], "little")

    def _unit(self, value: int) -> float:
        return (value >> 11) / float(1 << 53)

    def chat(self, req: ChatRequest) -> ChatResponse:
        digest = digest8(str(self.seed) + "\x1f" + canonical_bytes(req.canonical()).decode("utf-8"))
        if req.label_set is not None:
            scores = {
                lab: self._unit(self._hash_int("label", req.user_prompt, str(req.seed), lab)) for lab in req.label_set
            }
            if not self.label_scoring:
                raise CapabilityError(f"{self.backend_id} does not return label scores")
            return ChatResponse(max(req.label_set, key=lambda lab: scores[lab]), scores)

        if req.task.startswith("rank"):
            labels = re.findall(r"^([A-Z])\. ", req.user_prompt, re.M)
            if labels:
                return ChatResponse(max(labels, key=lambda lab: self._hash_int("gen", req.user_prompt, str(req.seed), lab)))
        bullets = _bullets(req.user_prompt)
        if req.task == "keywords":
            return ChatResponse(self._keywords(bullets))

        parents = [f"{t}[{d}]" for t, d in _TAG_RE.findall("\n".join(bullets))]
        segs: list[str] = []
        for b in bullets:
            for s in _segments(b):
                if s not in segs:
                    segs.append(s)
        # merges keep the most recent content, everything else the earliest
        segs = segs[-self.max_segments:] if req.task == "merge" else segs[: self.max_segments]
        head = f"{(req.task or 'chat').upper()}[{digest}]"
        if parents:
            head += " <- " + " ".join(parents)
        return ChatResponse(f"{head}: " + " | ".join(segs))

    def _keywords(self, bullets: list[str]) -> str:
        words: list[str] = []
        for b in bullets:
            for s in _segments(b):
                for w in _WORD_RE.findall(s.lower()):
                    if len(w) > 2 and not re.fullmatch(r"[0-9a-f]{8}|\d+", w) and w not in words:
                        words.append(w)
        for filler in ("overall impression", "personal fit", "value"):
            if len(words) >= 3:
                break
            words.append(filler)
        return "; ".join(words[:6])

    def _token_vector(self, token: str) -> np.ndarray:
        v = self._token_cache.get(token)
        if v is None:
            v = np.random.default_rng(self._hash_int("tok", token)).standard_normal(self.dim)
            self._token_cache[token] = v
        return v

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for row, text in enumerate(texts):
            if text in self.vectors:
                out[row] = self.vectors[text]
                continue
            v = 0.1 * np.random.default_rng(self._hash_int("text", text)).standard_normal(self.dim)
            for tok in _WORD_RE.findall(text.lower()):
                v += self._token_vector(tok)
            out[row] = v / np.linalg.norm(v)
        return out


# -- HTTP backend -----------------------------------------------------------------


class HttpBackend:
    """Chat-completions / embeddings endpoints in the widely used OpenAI wire format."""

    def __init__(
        self,
        base_url: str,
        model: str,
        embed_model: str | None = None,
        api_key_env: str = "COTREC_API_KEY",
        timeout: float = 60.0,
        top_logprobs: int = 20,
        client=None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.embed_model = embed_model or model
        self.top_logprobs = top_logprobs
        api_key = os.environ.get(api_key_env, "")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self.backend_id = f"http:{self.base_url}:{self.model}:{self.embed_model}"

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        try:
            resp = self._client.post(f"{self.base_url}{path}", json=payload)
        except httpx.TransportError as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code} from {path}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
        return resp.json()

    def chat(self, req: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        if req.label_set is not None:
            payload.update(logprobs=True, top_logprobs=self.top_logprobs, max_tokens=1)
        body = self._post("/chat/completions", payload)
        choice = body["choices"][0]
        text = choice["message"].get("content") or ""
        if req.label_set is None:
            return ChatResponse(text)
        try:
            top = choice["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError):
            raise CapabilityError(f"{self.backend_id} returned no first-token log-probabilities") from None
        found: dict[str, float] = {}
        for entry in top:
            tok = str(entry["token"]).strip()
            if tok in req.label_set and tok not in found:
                found[tok] = float(entry["logprob"])
        if not found:
            raise CapabilityError("no requested label among the returned top log-probabilities")
        # labels outside the returned top-k sit strictly below every observed one
        floor = min(found.values()) - 10.0
        return ChatResponse(text, {lab: found.get(lab, floor) for lab in req.label_set})

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = self._post("/embeddings", {"model": self.embed_model, "input": list(texts)})
        rows = sorted(body["data"], key=lambda r: r["index"])
        return np.asarray([r["embedding"] for r in rows], dtype=np.float64)


# -- gateway ----------------------------------------------------------------------


@dataclass
class TranscriptEntry:
    task: str
    system_prompt: str
    user_prompt: str
    response: str
    meta: dict = field(default_factory=dict)


class Gateway:
    def __init__(
        self,
        backend: Backend,
        cache: DiskCache | None = None,
        max_in_flight: int = 8,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        record: bool = False,
    ):
        if max_in_flight < 1 or max_attempts < 1:
            raise ValueError("max_in_flight and max_attempts must be >= 1")
        self.backend = backend
        self.cache = cache
        self.max_in_flight = max_in_flight
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self.backend_calls = 0
        self.cache_hits = 0
        self.transcript: list[TranscriptEntry] | None = [] if record else None

    def _call(self, fn, *args):
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._slots:
                    with self._lock:
                        self.backend_calls += 1
                    return fn(*args)
            except TransientError as exc:
                if attempt == self.max_attempts:
                    raise TransportError(f"gave up after {attempt} attempts: {exc}") from exc
                delay = self.backoff_base * 2 ** (attempt - 1) * random.uniform(0.5, 1.5)
                log.warning("transient backend failure (%s); retry %d in %.2fs", exc, attempt, delay)
                self._sleep(delay)

    def _cached(self, payload: dict, compute: Callable[[], bytes]) -> bytes:
        key = cache_key(self.backend.backend_id, payload)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                with self._lock:
                    self.cache_hits += 1
                return hit
        value = compute()
        if self.cache is not None:
            self.cache.put(key, value)
        return value

    def chat(self, req: ChatRequest, **meta) -> ChatResponse:
        def compute() -> bytes:
            resp = self._call(self.backend.chat, req)
            if req.label_set is not None and set(resp.label_scores or {}) != set(req.label_set):
                raise GatewayError("backend label scores do not cover the requested label set")
            return canonical_bytes(resp.to_json())

        raw = self._cached({"chat": req.canonical()}, compute)
        resp = ChatResponse.from_json(json.loads(raw))
        if self.transcript is not None:
            with self._lock:
                self.transcript.append(TranscriptEntry(req.task, req.system_prompt, req.user_prompt, resp.text, meta))
        return resp

    def embed(self, texts: Sequence[str]) -> EmbedResponse:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        if any(not t for t in texts):
            raise ValueError("embed texts must be non-empty")
        rows: list[list[float] | None] = [None] * len(texts)
        missing: list[int] = []
        keys = [cache_key(self.backend.backend_id, {"embed": t}) for t in texts]
        for k, key in enumerate(keys):
            hit = self.cache.get(key) if self.cache is not None else None
            if hit is None:
                missing.append(k)
            else:
                rows[k] = json.loads(hit)
                with self._lock:
                    self.cache_hits += 1
        if missing:
            uniq = list(dict.fromkeys(texts[k] for k in missing))
            fresh = self._call(self.backend.embed, uniq)
            by_text = {t: [float(x) for x in v] for t, v in zip(uniq, fresh)}
            for k in missing:
                rows[k] = by_text[texts[k]]
                if self.cache is not None:
                    self.cache.put(keys[k], canonical_bytes(rows[k]))
        return EmbedResponse(np.asarray(rows, dtype=np.float64))

