"""Interaction logs, item metadata, k-core filtering and leave-one-out splits.

Dense ids start at 1 for both users and items; 0 is reserved for padding in
the retriever. Ids are assigned in order of first appearance, so every step
here is deterministic given the input files.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class CorpusError(Exception):
    """Base class for dataset problems surfaced to the CLI."""


class ParseError(CorpusError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}, line {line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class ReferentialError(CorpusError):
    pass


class SplitError(CorpusError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    caption: str
    description: str = ""

    def text(self, with_description: bool = False) -> str:
        if with_description and self.description:
            return f"{self.caption}. {self.description}"
        return self.caption


@dataclass(frozen=True)
class Dataset:
    """Chronological per-user sequences plus the item table.

    ``sequences`` maps user id to its interactions sorted by timestamp (ties kept
    in input order). ``users`` and ``items`` list ids in dense-index order, so
    ``users[k - 1]`` has dense id ``k``.
    """

    sequences: Mapping[str, tuple[Interaction, ...]]
    items: Mapping[str, ItemMeta]
    users: tuple[str, ...]
    item_order: tuple[str, ...]
    user_index: Mapping[str, int] = field(init=False, repr=False, compare=False)
    item_index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "user_index", {u: k + 1 for k, u in enumerate(self.users)})
        object.__setattr__(self, "item_index", {i: k + 1 for k, i in enumerate(self.item_order)})

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.item_order)

    def item_sequence(self, user_id: str) -> list[str]:
        return [x.item_id for x in self.sequences[user_id]]

    def dense_sequence(self, user_id: str) -> list[int]:
        return [self.item_index[x.item_id] for x in self.sequences[user_id]]

    def interactions(self) -> list[Interaction]:
        return [x for u in self.users for x in self.sequences[u]]

    def is_empty(self) -> bool:
        return not self.users

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "users": list(self.users),
            "items": [
                {"item_id": i, "caption": self.items[i].caption, "description": self.items[i].description}
                for i in self.item_order
            ],
            "sequences": {
                u: [[x.item_id, x.timestamp] for x in self.sequences[u]] for u in self.users
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Dataset":
        items = {m["item_id"]: ItemMeta(m["item_id"], m["caption"], m.get("description", "")) for m in obj["items"]}
        sequences = {
            u: tuple(Interaction(u, i, int(t)) for i, t in obj["sequences"][u]) for u in obj["users"]
        }
        return cls(sequences, items, tuple(obj["users"]), tuple(m["item_id"] for m in obj["items"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class UserSplit:
    train: tuple[str, ...]
    val: str
    test: str


def build_dataset(interactions: Iterable[Interaction], items: Mapping[str, ItemMeta]) -> Dataset:
    """Group interactions by user and sort chronologically (stable on ties)."""
    per_user: dict[str, list[Interaction]] = {}
    item_order: dict[str, None] = {}
    for x in interactions:
        if x.item_id not in items:
            raise ReferentialError(f"interaction ({x.user_id}, {x.item_id}) references unknown item {x.item_id!r}")
        per_user.setdefault(x.user_id, []).append(x)
        item_order.setdefault(x.item_id, None)
    sequences = {u: tuple(sorted(xs, key=lambda x: x.timestamp)) for u, xs in per_user.items()}
    kept_items = {i: items[i] for i in item_order}
    return Dataset(sequences, kept_items, tuple(per_user), tuple(item_order))


def _read_jsonl(path: Path, required: tuple[str, ...]) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(path, line_no, "record is not an object")
            missing = [k for k in required if k not in rec or rec[k] is None]
            if missing:
                raise ParseError(path, line_no, f"missing field(s): {', '.join(missing)}")
            rows.append((line_no, rec))
    return rows


def read_items(path: str | Path) -> dict[str, ItemMeta]:
    path = Path(path)
    items: dict[str, ItemMeta] = {}
    for line_no, rec in _read_jsonl(path, ("item_id", "caption")):
        item_id, caption = str(rec["item_id"]), str(rec["caption"]).strip()
        if not caption:
            raise ParseError(path, line_no, "empty caption")
        if item_id in items:
            raise ParseError(path, line_no, f"duplicate item_id {item_id!r}")
        items[item_id] = ItemMeta(item_id, caption, str(rec.get("description") or "").strip())
    return items


def read_interactions(path: str | Path) -> list[Interaction]:
    path = Path(path)
    out: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()
    for line_no, rec in _read_jsonl(path, ("user_id", "item_id", "timestamp")):
        ts = rec["timestamp"]
        if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
            raise ParseError(path, line_no, f"timestamp must be a non-negative integer, got {ts!r}")
        x = Interaction(str(rec["user_id"]), str(rec["item_id"]), ts)
        key = (x.user_id, x.item_id, x.timestamp)
        if key in seen:
            continue
        seen.add(key)
        out.append(x)
    return out


def ingest(interactions_path: str | Path, items_path: str | Path) -> Dataset:
    """Read the two JSON Lines files into a chronologically ordered Dataset.

    Exact duplicate (user, item, timestamp) records are dropped.
    """
    items = read_items(items_path)
    return build_dataset(read_interactions(interactions_path), items)


def filter_k_core(d: Dataset, k: int = 5) -> Dataset:
    """Peel users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    xs = d.interactions()
    while True:
        user_deg = Counter(x.user_id for x in xs)
        item_deg = Counter(x.item_id for x in xs)
        kept = [x for x in xs if user_deg[x.user_id] >= k and item_deg[x.item_id] >= k]
        if len(kept) == len(xs):
            break
        xs = kept
    return build_dataset(xs, d.items)


def split_leave_one_out(d: Dataset) -> dict[str, UserSplit]:
    splits = {}
    for u in d.users:
        seq = d.item_sequence(u)
        if len(seq) < 3:
            raise SplitError(f"user {u!r} has {len(seq)} interaction(s); leave-one-out needs at least 3")
        splits[u] = UserSplit(tuple(seq[:-2]), seq[-2], seq[-1])
    return splits


def save_splits(splits: Mapping[str, UserSplit], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, s in splits.items():
            fh.write(json.dumps({"user_id": u, "train": list(s.train), "val": s.val, "test": s.test}) + "\n")


def load_splits(path: str | Path) -> dict[str, UserSplit]:
    out = {}
    for _, rec in _read_jsonl(Path(path), ("user_id", "train", "val", "test")):
        out[rec["user_id"]] = UserSplit(tuple(rec["train"]), rec["val"], rec["test"])
    return out
