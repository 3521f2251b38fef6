"""Offline extraction of user preferences and per-(user, item) perceptions.

Preferences are built by a left fold over overlapping windows of a user's
training sequence: the first window's short-term summary seeds the long-term
preference, every later window is summarized and merged into it. Perceptions
run three chat calls per (user, item): objective description (shared across
users), role-played review, keyword extraction.
"""

from __future__ import annotations

import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Dataset, ItemMeta, UserSplit
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import Prompts

ITEM_TAG_RE = re.compile(r"\[i:([^\]]+)\]")


class ConfigurationError(ValueError):
    pass


class ExtractionError(Exception):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(f"step {step}: {message}" if step is not None else message)
        self.step = step


@dataclass(frozen=True)
class BatchPlan:
    windows: tuple[tuple[int, int], ...]
    batch_size: int
    overlap: int

    @property
    def n(self) -> int:
        return self.windows[-1][1]


@dataclass(frozen=True)
class ShortTermInterest:
    user_id: str
    window: int
    text: str


@dataclass(frozen=True)
class UserPreference:
    user_id: str
    text: str
    revision: int


@dataclass(frozen=True)
class ItemPerception:
    user_id: str
    item_id: str
    objective_description: str
    simulated_review: str
    keywords: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "objective_description": self.objective_description,
            "simulated_review": self.simulated_review,
            "keywords": list(self.keywords),
        }


def plan_batches(n: int, batch_size: int, overlap: int) -> BatchPlan:
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    if batch_size < 1 or not 0 <= overlap < batch_size:
        raise ConfigurationError(f"need 0 <= overlap < batch_size, got B={batch_size}, O={overlap}")
    step = batch_size - overlap
    windows = []
    start = 0
    while True:
        end = min(start + batch_size, n)
        windows.append((start, end))
        if end == n:
            break
        start += step
    return BatchPlan(tuple(windows), batch_size, overlap)


def item_line(item: ItemMeta) -> str:
    """Prompt line for an item; the ``[i:<id>]`` tag makes prompts auditable."""
    return f"[i:{item.item_id}] {item.caption}"


def parse_keywords(text: str, lo: int = 3, hi: int = 10) -> list[str] | None:
    """Parse a semicolon-separated line; ``None`` when fewer than ``lo`` phrases survive."""
    line = next((ln for ln in text.splitlines() if ";" in ln), text)
    out: list[str] = []
    for raw in line.split(";"):
        phrase = raw.strip().strip("\"'`*-•").strip()
        if phrase and phrase not in out:
            out.append(phrase)
    if len(out) < lo:
        return None
    return out[:hi]


@dataclass
class Extractor:
    gateway: Gateway
    prompts: Prompts = field(default_factory=Prompts.load)
    batch_size: int = 10
    overlap: int = 2
    use_prior: bool = False
    max_tokens: int = 256
    min_keywords: int = 3
    max_keywords: int = 10

    def __post_init__(self):
        if not 0 <= self.overlap < self.batch_size:
            raise ConfigurationError(f"need 0 <= overlap < batch_size, got B={self.batch_size}, O={self.overlap}")
        self._descriptions: dict[str, str] = {}
        self._desc_lock = threading.Lock()

    def _chat(self, task: str, meta: dict, **values) -> str:
        system, user = self.prompts.chat(task, **values)
        req = ChatRequest(system, user, temperature=0.0, max_tokens=self.max_tokens, task=task)
        return self.gateway.chat(req, **meta).text.strip()

    # -- preference fold ---------------------------------------------------

    def summarize_batch(
        self, items: Sequence[ItemMeta], prior: UserPreference | None = None, user_id: str = "", window: int = 0
    ) -> ShortTermInterest:
        if not items:
            raise ValueError("summarize_batch needs at least one item")
        prior_block = self.prompts.fragment("summarize_prior", preference=prior.text) if prior is not None else ""
        text = self._chat(
            "summarize",
            {"user_id": user_id, "stage": "preference", "window": window},
            items="\n".join(f"- {item_line(x)}" for x in items),
            prior=prior_block,
        )
        if not text:
            raise ExtractionError(f"empty short-term summary for user {user_id!r}, window {window}")
        return ShortTermInterest(user_id, window, text)

    def merge_preference(self, long: UserPreference, short: ShortTermInterest) -> UserPreference:
        if long.revision < 1 or not long.text:
            raise ValueError("long-term preference is not initialized")
        if not short.text.strip():
            raise ValueError("short-term interest text is empty")
        text = self._chat(
            "merge",
            {"user_id": long.user_id, "stage": "preference", "window": short.window},
            long=long.text,
            short=short.text,
        )
        if not text:
            raise ExtractionError(f"empty merged preference for user {long.user_id!r}")
        return UserPreference(long.user_id, text, long.revision + 1)

    def maintain_preference(
        self, user_id: str, items: Sequence[ItemMeta], plan: BatchPlan | None = None
    ) -> UserPreference:
        """Fold the user's training items into a long-term preference.

        ``items`` must be the training prefix only; validation and test items
        never enter these prompts.
        """
        if plan is None:
            plan = plan_batches(len(items), self.batch_size, self.overlap)
        if plan.n != len(items):
            raise ValueError(f"plan covers {plan.n} items but the sequence has {len(items)}")
        pref: UserPreference | None = None
        for w, (start, end) in enumerate(plan.windows):
            short = self.summarize_batch(items[start:end], pref if self.use_prior else None, user_id, w)
            if pref is None:
                pref = UserPreference(user_id, short.text, 1)
            else:
                pref = self.merge_preference(pref, short)
        return pref

    # -- item perception ---------------------------------------------------

    def describe_item(self, item: ItemMeta) -> str:
        if not item.caption.strip():
            raise ValueError(f"item {item.item_id!r} has no caption")
        with self._desc_lock:
            if item.item_id in self._descriptions:
                return self._descriptions[item.item_id]
        details = self.prompts.fragment("describe_details", description=item.description) if item.description else ""
        text = self._chat(
            "describe",
            {"stage": "perception", "item_id": item.item_id},
            item=item_line(item),
            details=details,
        )
        if not text:
            raise ExtractionError(f"empty description for item {item.item_id!r}", step=1)
        with self._desc_lock:
            self._descriptions.setdefault(item.item_id, text)
        return text

    def roleplay_review(self, pref: UserPreference, item: ItemMeta, desc: str) -> str:
        if pref is None or pref.revision < 1 or not pref.text:
            raise ValueError("user preference is not initialized")
        return self._chat(
            "review",
            {"user_id": pref.user_id, "stage": "perception", "item_id": item.item_id},
            preference=pref.text,
            item=item_line(item),
            description=desc,
        )

    def extract_keywords(self, review: str, meta: dict | None = None) -> list[str]:
        if not review.strip():
            raise ValueError("review is empty")
        values = dict(review=review, min_keywords=self.min_keywords, max_keywords=self.max_keywords)
        for task in ("keywords", "keywords_retry"):
            phrases = parse_keywords(self._chat(task, meta or {}, **values), self.min_keywords, self.max_keywords)
            if phrases is not None:
                return phrases
        raise ExtractionError("keyword output unparseable after one reprompt", step=3)

    def perceive_item(self, pref: UserPreference, item: ItemMeta) -> ItemPerception:
        meta = {"user_id": pref.user_id, "stage": "perception", "item_id": item.item_id}
        desc = self._step(1, self.describe_item, item)
        review = self._step(2, self.roleplay_review, pref, item, desc)
        keywords = self._step(3, self.extract_keywords, review, meta)
        return ItemPerception(pref.user_id, item.item_id, desc, review, tuple(keywords))

    @staticmethod
    def _step(step: int, fn, *args):
        try:
            out = fn(*args)
        except ExtractionError as exc:
            if exc.step is None:
                raise ExtractionError(str(exc), step=step) from exc
            raise
        except (GatewayError, ValueError) as exc:
            raise ExtractionError(f"{type(exc).__name__}: {exc}", step=step) from exc
        if not out:
            raise ExtractionError("empty output", step=step)
        return out


# -- bulk runs --------------------------------------------------------------------


def extract_preferences(
    ex: Extractor, dataset: Dataset, splits: Mapping[str, UserSplit], users: Iterable[str] | None = None
) -> dict[str, UserPreference]:
    """One fold per user over the training split; users run in parallel."""
    users = list(users) if users is not None else list(dataset.users)

    def one(u: str) -> UserPreference:
        return ex.maintain_preference(u, [dataset.items[i] for i in splits[u].train])

    with ThreadPoolExecutor(max_workers=ex.gateway.max_in_flight) as pool:
        return dict(zip(users, pool.map(one, users)))


def extract_perceptions(
    ex: Extractor,
    dataset: Dataset,
    prefs: Mapping[str, UserPreference],
    pairs: Iterable[tuple[str, str]],
) -> dict[tuple[str, str], ItemPerception]:
    pairs = list(dict.fromkeys(pairs))
    # descriptions first so concurrent pairs on one item share a single call
    items = list(dict.fromkeys(i for _, i in pairs))
    with ThreadPoolExecutor(max_workers=ex.gateway.max_in_flight) as pool:
        list(pool.map(lambda i: ex.describe_item(dataset.items[i]), items))
        results = pool.map(lambda p: ex.perceive_item(prefs[p[0]], dataset.items[p[1]]), pairs)
        return dict(zip(pairs, results))


def find_leaks(transcript, splits: Mapping[str, UserSplit]) -> list[dict]:
    """Prompts that mention a user's held-out (val/test) item.

    A perception prompt may name its own subject item; everything else tagged
    in a user's prompts must come from that user's training prefix.
    """
    leaks = []
    for entry in transcript:
        user = entry.meta.get("user_id")
        if not user or user not in splits:
            continue
        held_out = {splits[user].val, splits[user].test}
        allowed = {entry.meta.get("item_id")}
        for tag in ITEM_TAG_RE.findall(entry.system_prompt + "\n" + entry.user_prompt):
            if tag in held_out and tag not in allowed:
                leaks.append({"user_id": user, "item_id": tag, "task": entry.task})
    return leaks


# -- persistence ------------------------------------------------------------------


def save_preferences(prefs: Mapping[str, UserPreference], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(prefs):
            p = prefs[u]
            fh.write(json.dumps({"user_id": p.user_id, "text": p.text, "revision": p.revision}, ensure_ascii=False) + "\n")


def load_preferences(path: str | Path) -> dict[str, UserPreference]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[r["user_id"]] = UserPreference(r["user_id"], r["text"], int(r["revision"]))
    return out


def save_perceptions(perc: Mapping[tuple[str, str], ItemPerception], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(perc):
            fh.write(json.dumps(perc[key].to_json(), ensure_ascii=False) + "\n")


def load_perceptions(path: str | Path) -> dict[tuple[str, str], ItemPerception]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[(r["user_id"], r["item_id"])] = ItemPerception(
                    r["user_id"], r["item_id"], r["objective_description"], r["simulated_review"], tuple(r["keywords"])
                )
    return out
