"""Causal self-attention next-item retriever with an optional prepended user slot.

Token layout per sequence (length ``max_len``, left padded with 0)::

    with user slot:     [0 ... 0, u, i_1, ..., i_n]     (most recent max_len - 1 items)
    without:            [0 ... 0, i_1, ..., i_n]        (most recent max_len items)

Positions are counted from the first non-padding token, so the user slot (when
present) always gets positional row 0 and extra left padding changes nothing.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encode_map import INIT_STD, EmbeddingTable

log = logging.getLogger(__name__)

PAD = 0
CHECKPOINT_MAGIC = b"COTRECKP"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    blocks: int = 2
    heads: int = 1
    max_len: int = 50
    lr: float = 1e-3
    epochs: int = 200
    negatives: int = 1
    batch_size: int = 128
    seed: int = 0
    use_user_slot: bool = False
    dropout: float = 0.0
    eval_every: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ValueError("max_len must be >= 3")
        if self.negatives < 1:
            raise ValueError("need at least one negative per positive")


class Layout(NamedTuple):
    tokens: np.ndarray  # (max_len,) item ids, or the user id at the user slot
    is_user: np.ndarray  # (max_len,) bool
    targets: np.ndarray  # (max_len,) next item id, 0 where unsupervised


def build_input(user: int, seq: Sequence[int], cfg: ModelConfig, with_targets: bool = True) -> Layout:
    """Left-padded layout for one user.

    Each item position is trained to predict the item after it; the user slot
    and the final item have no target.
    """
    if not seq:
        raise ValueError("sequence must be non-empty")
    n = cfg.max_len
    keep = n - 1 if cfg.use_user_slot else n
    items = list(seq)[-keep:]
    head = [user] if cfg.use_user_slot else []
    content = head + items
    pad = n - len(content)
    tokens = np.array([PAD] * pad + content, dtype=np.int64)
    is_user = np.zeros(n, dtype=bool)
    if cfg.use_user_slot:
        is_user[pad] = True
    targets = np.zeros(n, dtype=np.int64)
    if with_targets:
        start = pad + len(head)
        targets[start : n - 1] = items[1:]
    return Layout(tokens, is_user, targets)


class Block(nn.Module):
    """Post-norm transformer block: attention, residual, norm, feed-forward, residual, norm."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, 4 * dim)
        self.ff2 = nn.Linear(4 * dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads

        def split(t):
            return t.view(b, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~allowed[:, None], float("-inf"))
        a = (self.drop(att.softmax(-1)) @ v).transpose(1, 2).reshape(b, n, d)
        x = self.ln1(x + self.drop(self.o(a)))
        return self.ln2(x + self.drop(self.ff2(F.gelu(self.ff1(x)))))


class SASRec(nn.Module):
    def __init__(self, n_items: int, n_users: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_items = n_items
        self.n_users = n_users
        d = cfg.dim
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=PAD)
        self.user_emb = nn.Embedding(n_users + 1, d) if cfg.use_user_slot else None
        self.pos_emb = nn.Embedding(cfg.max_len, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.dropout) for _ in range(cfg.blocks))
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.pos_emb.weight, 0.0, INIT_STD)
        nn.init.normal_(self.item_emb.weight, 0.0, INIT_STD)
        with torch.no_grad():
            self.item_emb.weight[PAD].zero_()
        if self.user_emb is not None:
            nn.init.normal_(self.user_emb.weight, 0.0, INIT_STD)

    def load_tables(self, item_table: EmbeddingTable | None, user_table: EmbeddingTable | None) -> None:
        with torch.no_grad():
            if item_table is not None:
                if item_table.values.shape != tuple(self.item_emb.weight.shape):
                    raise ValueError(f"item table shape {item_table.values.shape} != {tuple(self.item_emb.weight.shape)}")
                self.item_emb.weight.copy_(torch.as_tensor(item_table.values))
                self.item_emb.weight[PAD].zero_()
            if user_table is not None:
                if self.user_emb is None:
                    raise ValueError("user table given but the model has no user slot")
                if user_table.values.shape != tuple(self.user_emb.weight.shape):
                    raise ValueError(f"user table shape {user_table.values.shape} != {tuple(self.user_emb.weight.shape)}")
                self.user_emb.weight.copy_(torch.as_tensor(user_table.values))

    def forward(self, tokens: torch.Tensor, is_user: torch.Tensor) -> torch.Tensor:
        """Hidden states, shape (batch, length, dim)."""
        valid = tokens != PAD
        x = self.item_emb(tokens.masked_fill(is_user, PAD))
        if self.user_emb is not None:
            x = torch.where(is_user[..., None], self.user_emb(tokens * is_user), x)
        pos = (valid.long().cumsum(1) - 1).clamp(min=0)
        x = self.drop((x + self.pos_emb(pos)) * valid[..., None])
        n = tokens.shape[1]
        eye = torch.eye(n, dtype=torch.bool, device=tokens.device)
        causal = torch.ones(n, n, dtype=torch.bool, device=tokens.device).tril()
        # a query may always see itself, so all-padding rows stay finite
        allowed = causal & (valid[:, None, :] | eye)
        for blk in self.blocks:
            x = blk(x, allowed)
        return x

    def item_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        """Logits over items 1..n_items (column j is item j + 1)."""
        return hidden @ self.item_emb.weight[1:].T


def score(hidden: torch.Tensor, item_table: torch.Tensor) -> torch.Tensor:
    """Dot-product logits of one hidden state against every row of an item table."""
    return item_table @ hidden


def bce_loss(
    model: SASRec, tokens: torch.Tensor, is_user: torch.Tensor, targets: torch.Tensor, negatives: torch.Tensor
) -> torch.Tensor:
    """Masked binary cross-entropy with sampled negatives.

    ``negatives`` has shape (batch, length, k); positions whose target is 0
    contribute nothing, and a fully masked batch gives 0.
    """
    h = model(tokens, is_user)
    mask = (targets != PAD).to(h.dtype)
    pos = (h * model.item_emb(targets)).sum(-1)
    neg = (h[:, :, None, :] * model.item_emb(negatives)).sum(-1)
    per = -F.logsigmoid(pos) - F.logsigmoid(-neg).sum(-1)
    return (per * mask).sum() / mask.sum().clamp(min=1.0)


def sample_negatives(targets: torch.Tensor, n_items: int, k: int, gen: torch.Generator) -> torch.Tensor:
    """Uniform items different from the positive at each position (0 where unsupervised)."""
    shape = tuple(targets.shape) + (k,)
    if n_items < 2:
        raise ValueError("negative sampling needs at least two items")
    r = torch.randint(1, n_items, shape, generator=gen)
    r = r + (r >= targets[..., None]).long()
    return r * (targets[..., None] != PAD)


def _stack(layouts: Sequence[Layout]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return (
        torch.as_tensor(np.stack([x.tokens for x in layouts])),
        torch.as_tensor(np.stack([x.is_user for x in layouts])),
        torch.as_tensor(np.stack([x.targets for x in layouts])),
    )


@dataclass
class TrainResult:
    model: SASRec
    history: list[dict] = field(default_factory=list)


def train(
    sequences: Mapping[int, Sequence[int]],
    n_items: int,
    n_users: int,
    cfg: ModelConfig,
    item_table: EmbeddingTable | None = None,
    user_table: EmbeddingTable | None = None,
    val_targets: Mapping[int, int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Fit on per-user training sequences (dense ids) with Adam and a fixed epoch budget.

    Returns the final-epoch model. When ``val_targets`` is given, validation
    Hit@10 / NDCG@10 are logged every ``cfg.eval_every`` epochs.
    """
    torch.set_num_threads(1)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = SASRec(n_items, n_users, cfg).to(dtype)
    if item_table is not None or user_table is not None:
        model.load_tables(item_table, user_table)
    users = sorted(sequences)
    tokens, is_user, targets = _stack([build_input(u, sequences[u], cfg) for u in users])
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.98), eps=1e-9)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(users), generator=gen)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, len(users), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            negs = sample_negatives(targets[idx], n_items, cfg.negatives, gen)
            loss = bce_loss(model, tokens[idx], is_user[idx], targets[idx], negs)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {b} (lr={cfg.lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        row = {"epoch": epoch, "loss": total / max(batches, 1)}
        if val_targets and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            ranks = target_ranks(model, {u: sequences[u] for u in val_targets}, val_targets)
            row["val_hit10"] = float(np.mean([r is not None and r <= 10 for r in ranks.values()]))
            row["val_ndcg10"] = float(
                np.mean([1.0 / math.log2(1 + r) if r is not None and r <= 10 else 0.0 for r in ranks.values()])
            )
        history.append(row)
        log.debug("epoch %d %s", epoch, row)
    model.eval()
    return TrainResult(model, history)


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_hit10", "val_ndcg10"])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row.get("val_hit10", "")), repr(row.get("val_ndcg10", ""))])


# -- inference ---------------------------------------------------------------------


@torch.no_grad()
def user_scores(model: SASRec, inputs: Mapping[int, Sequence[int]], batch_size: int = 256) -> dict[int, np.ndarray]:
    """Scores over items 1..n_items from each user's final position (index j is item j + 1)."""
    model.eval()
    users = list(inputs)
    out = {}
    for start in range(0, len(users), batch_size):
        chunk = users[start : start + batch_size]
        tokens, is_user, _ = _stack([build_input(u, inputs[u], model.cfg, with_targets=False) for u in chunk])
        h = model(tokens, is_user)[:, -1]
        logits = model.item_logits(h).double().numpy()
        out.update(zip(chunk, logits))
    return out


def rank_items(scores: np.ndarray, exclude: set[int] | None = None) -> np.ndarray:
    """Item ids sorted by descending score, ties by ascending id, excluded ids removed."""
    ids = np.arange(1, scores.shape[0] + 1)
    order = np.lexsort((ids, -scores))
    ranked = ids[order]
    if exclude:
        ranked = ranked[~np.isin(ranked, list(exclude))]
    return ranked


class Retrieved(NamedTuple):
    items: list[int]
    scores: list[float]
    short: bool  # fewer than K eligible items


def retrieve_topk(
    model: SASRec, user: int, seq: Sequence[int], k: int, exclude_history: bool = True, scores: np.ndarray | None = None
) -> Retrieved:
    if k < 1:
        raise ValueError("K must be >= 1")
    if scores is None:
        scores = user_scores(model, {user: seq})[user]
    ranked = rank_items(scores, set(seq) if exclude_history else None)[:k]
    return Retrieved([int(i) for i in ranked], [float(scores[i - 1]) for i in ranked], len(ranked) < k)


def target_rank(scores: np.ndarray, target: int, exclude: set[int] | None = None) -> int | None:
    """1-based rank of ``target`` under :func:`rank_items` ordering, ``None`` if excluded."""
    if exclude and target in exclude:
        return None
    s = scores[target - 1]
    ids = np.arange(1, scores.shape[0] + 1)
    ahead = (scores > s) | ((scores == s) & (ids < target))
    if exclude:
        ahead &= ~np.isin(ids, list(exclude))
    return int(ahead.sum()) + 1


def target_ranks(
    model: SASRec, inputs: Mapping[int, Sequence[int]], targets: Mapping[int, int], exclude_history: bool = True
) -> dict[int, int | None]:
    scores = user_scores(model, inputs)
    return {
        u: target_rank(scores[u], targets[u], set(inputs[u]) if exclude_history else None) for u in targets
    }


@torch.no_grad()
def train_hit_at_1(model: SASRec, sequences: Mapping[int, Sequence[int]]) -> float:
    """Fraction of users whose last supervised training position ranks its target first."""
    model.eval()
    users = sorted(sequences)
    tokens, is_user, targets = _stack([build_input(u, sequences[u], model.cfg) for u in users])
    h = model(tokens, is_user)
    hits = 0
    for row in range(len(users)):
        pos = int(torch.nonzero(targets[row]).max())
        logits = model.item_logits(h[row, pos])
        hits += int(int(logits.argmax()) + 1 == int(targets[row, pos]))
    return hits / len(users)


# -- checkpoints -------------------------------------------------------------------


def param_bytes(model: nn.Module) -> bytes:
    return b"".join(t.detach().cpu().contiguous().numpy().tobytes() for t in model.state_dict().values())


def save_checkpoint(model: SASRec, path: str | Path, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header length, JSON header, raw tensors."""
    state = model.state_dict()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "n_items": model.n_items,
        "n_users": model.n_users,
        "tensors": [[name, list(t.shape), str(t.dtype).replace("torch.", "")] for name, t in state.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head)
        fh.write(param_bytes(model))


def load_checkpoint(path: str | Path) -> tuple[SASRec, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a retriever checkpoint")
    version, hlen = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[off : off + hlen])
    off += hlen
    cfg = ModelConfig(**header["config"])
    dtype = getattr(torch, header["tensors"][0][2])
    model = SASRec(header["n_items"], header["n_users"], cfg).to(dtype)
    state = {}
    for name, shape, dt in header["tensors"]:
        arr_dtype = torch.empty(0, dtype=getattr(torch, dt)).numpy().dtype
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=arr_dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, header.get("meta", {})
