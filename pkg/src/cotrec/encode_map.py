"""Encode & Map: text -> language-model vector -> retriever embedding space.

The map is a PCA projection fitted jointly on item and preference texts, so
user and item rows land in one shared space.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import ItemMeta
from .gateway import Gateway

log = logging.getLogger(__name__)

INIT_STD = 0.02
RANDOM = "random"
TEXT = "text-initialized"
PADDING = "padding"


class RankDeficiencyError(ValueError):
    def __init__(self, rank: int, wanted: int):
        super().__init__(f"centered corpus has rank {rank}, cannot extract {wanted} components")
        self.rank = rank


@dataclass(frozen=True)
class Reducer:
    mean: np.ndarray  # (d_lm,)
    projection: np.ndarray  # (d_lm, d_crm), orthonormal columns

    @property
    def d_lm(self) -> int:
        return self.projection.shape[0]

    @property
    def d_crm(self) -> int:
        return self.projection.shape[1]

    def to_json(self) -> dict:
        return {
            "d_lm": self.d_lm,
            "d_crm": self.d_crm,
            "mean": self.mean.tolist(),
            "projection": self.projection.reshape(-1).tolist(),  # row-major
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Reducer":
        proj = np.asarray(obj["projection"], dtype=np.float64).reshape(obj["d_lm"], obj["d_crm"])
        return cls(np.asarray(obj["mean"], dtype=np.float64), proj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Reducer":
        return cls.from_json(json.loads(Path(path).read_text()))


def fit_reducer(corpus: np.ndarray, d_crm: int, rtol: float = 1e-10) -> Reducer:
    """PCA by SVD of the centered corpus.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(corpus, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("corpus must be a matrix")
    n, d_lm = x.shape
    if not 1 <= d_crm <= d_lm:
        raise ValueError(f"need 1 <= d_crm <= d_lm={d_lm}, got {d_crm}")
    if n < d_crm:
        raise ValueError(f"need at least d_crm={d_crm} rows, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("corpus contains non-finite values")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    top = s[0] if s.size else 0.0
    rank = int(np.sum(s > rtol * top * max(n, d_lm))) if top > 0 else 0
    if rank < d_crm:
        raise RankDeficiencyError(rank, d_crm)
    proj = vt[:d_crm].T.copy()
    pivot = np.argmax(np.abs(proj), axis=0)
    signs = np.sign(proj[pivot, np.arange(d_crm)])
    proj *= signs
    return Reducer(mean, proj)


def reduce(r: Reducer, v: np.ndarray) -> np.ndarray:
    """Project one vector (or a stack of row vectors)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != r.d_lm:
        raise ValueError(f"expected dimension {r.d_lm}, got {v.shape[-1]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("input contains non-finite values")
    return (v - r.mean) @ r.projection


def encode_and_map(texts: Sequence[str], r: Reducer, gateway: Gateway) -> np.ndarray:
    vectors = gateway.embed(texts).vectors
    return reduce(r, vectors)


@dataclass(frozen=True)
class EmbeddingTable:
    values: np.ndarray  # (rows, dim); row 0 is padding
    provenance: tuple[str, ...]

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding table contains non-finite values")
        if len(self.provenance) != self.values.shape[0]:
            raise ValueError("one provenance tag per row required")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, values=self.values, provenance=np.asarray(self.provenance))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        with np.load(path) as z:
            return cls(z["values"], tuple(str(p) for p in z["provenance"]))


def _random_rows(n: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, INIT_STD, size=(n, dim))


def _rescale(rows: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Give text rows the expected norm of a random row, sqrt(dim) * INIT_STD."""
    target = np.sqrt(rows.shape[1]) * INIT_STD
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    out = np.where(norms > 1e-12, rows / np.maximum(norms, 1e-12) * target, fallback)
    return out


def _table(texts: Sequence[str] | None, n: int, dim: int, r: Reducer | None, gateway: Gateway | None, seed: int):
    values = np.zeros((n + 1, dim))
    random_rows = _random_rows(n, dim, seed)
    if texts is None:
        values[1:] = random_rows
        return EmbeddingTable(values, (PADDING,) + (RANDOM,) * n)
    if r is None or gateway is None:
        raise ValueError("text initialization needs a fitted reducer and a gateway")
    if r.d_crm != dim:
        raise ValueError(f"reducer maps to {r.d_crm} dims, table needs {dim}")
    values[1:] = _rescale(encode_and_map(texts, r, gateway), random_rows)
    return EmbeddingTable(values, (PADDING,) + (TEXT,) * n)


def item_texts(items: Sequence[ItemMeta], mode: str, descriptions: Mapping[str, str] | None = None) -> list[str]:
    """Texts fed to the encoder for ``caption`` or ``description`` mode.

    ``descriptions`` (e.g. generated objective descriptions) override the
    metadata description; items with neither fall back to the caption.
    """
    if mode == "caption":
        return [it.caption for it in items]
    if mode != "description":
        raise ValueError(f"no item text for mode {mode!r}")
    out = []
    for it in items:
        desc = (descriptions or {}).get(it.item_id) or it.description
        if not desc:
            log.info("item %s has no description; using its caption", it.item_id)
            out.append(it.caption)
        else:
            out.append(f"{it.caption}. {desc}")
    return out


def build_item_table(
    mode: str,
    items: Sequence[ItemMeta],
    dim: int,
    seed: int,
    r: Reducer | None = None,
    gateway: Gateway | None = None,
    descriptions: Mapping[str, str] | None = None,
) -> EmbeddingTable:
    """Item table in dense-id order (``items[k]`` is row ``k + 1``); row 0 is zero padding."""
    if mode not in ("random", "caption", "description"):
        raise ValueError(f"unknown item embedding mode {mode!r}")
    texts = None if mode == "random" else item_texts(items, mode, descriptions)
    return _table(texts, len(items), dim, r, gateway, seed)


def build_user_table(
    mode: str,
    users: Sequence[str],
    dim: int,
    seed: int,
    prefs: Mapping[str, object] | None = None,
    r: Reducer | None = None,
    gateway: Gateway | None = None,
) -> EmbeddingTable | None:
    """User table in dense-id order, or ``None`` for mode ``none``.

    Row 0 is unused so dense user ids index rows directly.
    """
    if mode == "none":
        return None
    if mode == "random":
        return _table(None, len(users), dim, r, gateway, seed)
    if mode != "preference":
        raise ValueError(f"unknown user embedding mode {mode!r}")
    if prefs is None:
        raise ValueError("preference mode needs user preferences")
    missing = [u for u in users if u not in prefs]
    if missing:
        raise ValueError(f"no preference for {len(missing)} user(s), e.g. {missing[0]!r}")
    texts = [getattr(prefs[u], "text", prefs[u]) for u in users]
    return _table(texts, len(users), dim, r, gateway, seed)
