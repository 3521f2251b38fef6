"""List-wise ranking of a candidate slate from index-label scores.

The LLM sees the user's recent history and the candidates labelled ``A.``,
``B.``, ... and is asked for the single most likely label. Candidates are then
sorted by the per-label scores (first-token log-probabilities on a real
backend). The enriched variant adds the user's long-term preference and each
candidate's subjective keywords to the prompt.
"""

from __future__ import annotations

import json
import re
import string
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .corpus import ItemMeta
from .gateway import CapabilityError, ChatRequest, Gateway
from .prompts import Prompts

LABELS = string.ascii_uppercase
PLAIN = "plain"
ENRICHED = "enriched"


class SlateError(ValueError):
    pass


class RankingError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSlate:
    user_id: str
    candidates: tuple[str, ...]
    # 1-based position of the evaluation target; never rendered into prompts
    target_position: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise SlateError("slate is empty")
        if len(self.candidates) > len(LABELS):
            raise SlateError(f"slate of {len(self.candidates)} exceeds the {len(LABELS)}-label alphabet")
        if len(set(self.candidates)) != len(self.candidates):
            raise SlateError("slate candidates must be distinct")

    @property
    def size(self) -> int:
        return len(self.candidates)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(LABELS[: self.size])


@dataclass(frozen=True)
class RankerVariant:
    tag: str = PLAIN
    preferences: Mapping[str, str] = field(default_factory=dict)
    keywords: Mapping[tuple[str, str], Sequence[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in (PLAIN, ENRICHED):
            raise ConfigurationError(f"unknown ranker variant {self.tag!r}")


@dataclass(frozen=True)
class RankingResult:
    permutation: tuple[int, ...]  # 1-based slate positions, best first
    scores: tuple[float, ...] | None  # per slate position, None in fallback mode
    fallback_used: bool = False

    def __post_init__(self):
        if sorted(self.permutation) != list(range(1, len(self.permutation) + 1)):
            raise RankingError(f"not a permutation of 1..{len(self.permutation)}: {self.permutation}")

    def rank_of(self, position: int) -> int:
        """Output rank (1-based) of the candidate at slate ``position``."""
        return self.permutation.index(position) + 1

    def ranked(self, slate: CandidateSlate) -> list[str]:
        return [slate.candidates[p - 1] for p in self.permutation]


def build_prompt(
    variant: RankerVariant,
    history: Sequence[str],
    slate: CandidateSlate,
    catalog: Mapping[str, ItemMeta],
    prompts: Prompts | None = None,
    seed: int | None = None,
) -> ChatRequest:
    """Ranking request for ``slate``; ``history`` holds item ids, oldest first."""
    prompts = prompts or Prompts.load()
    lines = []
    for label, item_id in zip(slate.labels, slate.candidates):
        line = f"{label}. {catalog[item_id].caption}"
        if variant.tag == ENRICHED:
            kw = variant.keywords.get((slate.user_id, item_id))
            if not kw:
                raise ConfigurationError(f"no perception for (user {slate.user_id!r}, item {item_id!r})")
            line += f" (impressions: {'; '.join(kw)})"
        lines.append(line)
    pref_block = ""
    if variant.tag == ENRICHED:
        pref = variant.preferences.get(slate.user_id)
        if not pref:
            raise ConfigurationError(f"no preference for user {slate.user_id!r}")
        pref_block = prompts.fragment("rank_preference", preference=pref)
    system, user = prompts.chat(
        "rank",
        history="\n".join(f"* {catalog[i].caption}" for i in history),
        preference=pref_block,
        candidates="\n".join(lines),
    )
    return ChatRequest(system, user, temperature=0.0, max_tokens=1, label_set=slate.labels, task="rank", seed=seed)


def order_by_scores(scores: Sequence[float]) -> tuple[int, ...]:
    """Positions by descending score; equal scores keep retriever (slate) order."""
    return tuple(sorted(range(1, len(scores) + 1), key=lambda p: (-scores[p - 1], p)))


def rank_slate(req: ChatRequest, slate: CandidateSlate, gateway: Gateway) -> RankingResult:
    try:
        resp = gateway.chat(req, user_id=slate.user_id, stage="rank")
    except CapabilityError:
        return _fallback(req, slate, gateway)
    scores = tuple(float(resp.label_scores[lab]) for lab in slate.labels)
    return RankingResult(order_by_scores(scores), scores, False)


def _fallback(req: ChatRequest, slate: CandidateSlate, gateway: Gateway) -> RankingResult:
    """Generated-label mode: the named candidate goes first, the rest keep retriever order."""
    gen = ChatRequest(req.system_prompt, req.user_prompt, req.temperature, 8, None, "rank_generate", req.seed)
    text = gateway.chat(gen, user_id=slate.user_id, stage="rank").text
    m = re.search(r"\b([A-Z])\b", text)
    if m is None or m.group(1) not in slate.labels:
        raise RankingError(f"no valid label in generated text {text[:40]!r}")
    first = slate.labels.index(m.group(1)) + 1
    rest = tuple(p for p in range(1, slate.size + 1) if p != first)
    return RankingResult((first,) + rest, None, True)


class LLMRanker:
    """Callable ranker: ``ranker(slate) -> RankingResult``.

    ``histories`` maps user id to the item ids shown as history (the most
    recent ``history_len`` are used). With ``record_transcript`` every call is
    appended to ``self.transcript`` for auditing.
    """

    def __init__(
        self,
        gateway: Gateway,
        catalog: Mapping[str, ItemMeta],
        histories: Mapping[str, Sequence[str]],
        variant: RankerVariant | None = None,
        prompts: Prompts | None = None,
        history_len: int = 10,
        seed: int | None = None,
        record_transcript: bool = False,
    ):
        self.gateway = gateway
        self.catalog = catalog
        self.histories = histories
        self.variant = variant or RankerVariant()
        self.prompts = prompts or Prompts.load()
        self.history_len = history_len
        self.seed = seed
        self.transcript: list[dict] | None = [] if record_transcript else None
        self._lock = threading.Lock()

    def __call__(self, slate: CandidateSlate) -> RankingResult:
        history = list(self.histories.get(slate.user_id, ()))[-self.history_len:] if self.history_len else []
        req = build_prompt(self.variant, history, slate, self.catalog, self.prompts, self.seed)
        result = rank_slate(req, slate, self.gateway)
        if self.transcript is not None:
            with self._lock:
                self.transcript.append({
                    "user_id": slate.user_id,
                    "variant": self.variant.tag,
                    "labels": list(slate.labels),
                    "candidates": list(slate.candidates),
                    "scores": list(result.scores) if result.scores is not None else None,
                    "permutation": list(result.permutation),
                    "fallback_used": result.fallback_used,
                    "prompt": req.user_prompt,
                })
        return result


def identity_ranker(slate: CandidateSlate) -> RankingResult:
    """Keeps retriever order; the "no ranker" baseline."""
    return RankingResult(tuple(range(1, slate.size + 1)), None, False)


def rank_user(
    user_id: str,
    retrieve: Callable[[str, int], Sequence[str]],
    ranker: Callable[[CandidateSlate], RankingResult],
    m: int = 10,
) -> tuple[CandidateSlate, RankingResult]:
    """Retrieve ``m`` candidates for the user, then rank them."""
    slate = CandidateSlate(user_id, tuple(retrieve(user_id, m)))
    return slate, ranker(slate)


def save_transcript(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
