"""Hit@K, NDCG@K, mean absolute position bias, and the evaluation drivers."""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Dataset, UserSplit
from .ranker import CandidateSlate, RankingResult
from .retriever import SASRec, rank_items, target_rank, user_scores

Ranker = Callable[[CandidateSlate], RankingResult]


def hit_at_k(rank: int | None, k: int) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    return int(rank is not None and rank <= k)


def ndcg_at_k(rank: int | None, k: int) -> float:
    """Single-relevant-item NDCG: 1 / log2(1 + rank) inside the cut-off, else 0."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(1 + rank)


# -- position bias ---------------------------------------------------------------


@dataclass(frozen=True)
class PositionBiasRecord:
    sample_id: str
    ranks: tuple[int, ...]  # ranks[j - 1]: output rank of the target placed at position j

    @property
    def m(self) -> int:
        return len(self.ranks)

    @property
    def mean_rank(self) -> float:
        return sum(self.ranks) / len(self.ranks)


def sample_bias(rec: PositionBiasRecord) -> float:
    """Mean absolute deviation of the target's rank across its M placements."""
    if not rec.ranks or any(r is None for r in rec.ranks):
        raise ValueError(f"sample {rec.sample_id!r} is missing ranks")
    mean = rec.mean_rank
    return sum(abs(r - mean) for r in rec.ranks) / len(rec.ranks)


def mapb(records: Sequence[PositionBiasRecord]) -> float:
    if not records:
        raise ValueError("MAPB needs at least one sample")
    if len({r.m for r in records}) != 1:
        raise ValueError("all samples must share the slate size M")
    return sum(sample_bias(r) for r in records) / len(records)


@dataclass(frozen=True)
class BiasSample:
    sample_id: str
    user_id: str
    target: str
    fillers: tuple[str, ...]  # M - 1 non-target items, in retriever order


def position_bias_harness(ranker: Ranker, samples: Sequence[BiasSample], m: int) -> list[PositionBiasRecord]:
    """Rank each sample's slate M times, with the target at positions 1..M in turn."""
    records = []
    for s in samples:
        fillers = list(s.fillers)[: m - 1]
        if len(fillers) != m - 1 or s.target in fillers:
            raise ValueError(f"sample {s.sample_id!r} needs {m - 1} fillers distinct from the target")
        ranks = []
        for j in range(1, m + 1):
            cands = fillers[: j - 1] + [s.target] + fillers[j - 1 :]
            result = ranker(CandidateSlate(s.user_id, tuple(cands), target_position=j))
            ranks.append(result.rank_of(j))
        records.append(PositionBiasRecord(s.sample_id, tuple(ranks)))
    return records


# -- reports -----------------------------------------------------------------------


@dataclass
class MetricReport:
    dataset: str
    retriever: str
    ranker: str
    k: int
    per_run: dict[str, list[float]] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def runs(self) -> int:
        return max((len(v) for v in self.per_run.values()), default=0)

    @property
    def means(self) -> dict[str, float]:
        return {name: sum(vals) / len(vals) for name, vals in self.per_run.items() if vals}

    def rows(self) -> list[dict]:
        means = self.means
        return [
            {
                "dataset": self.dataset,
                "retriever": self.retriever,
                "ranker": self.ranker,
                "metric": name,
                "k": self.k,
                "runs": len(vals),
                "mean": repr(means[name]),
                "per_run": " ".join(repr(v) for v in vals),
            }
            for name, vals in self.per_run.items()
        ]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "retriever": self.retriever,
            "ranker": self.ranker,
            "k": self.k,
            "runs": self.runs,
            "means": self.means,
            "per_run": self.per_run,
            "notes": self.notes,
        }


CSV_FIELDS = ["dataset", "retriever", "ranker", "metric", "k", "runs", "mean", "per_run"]


def reports_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerows(rep.rows())
    return buf.getvalue()


def write_reports(reports: Sequence[MetricReport], out_dir: str | Path, stem: str) -> None:
    out_dir = Path(out_dir)
    (out_dir / f"{stem}.csv").write_text(reports_csv(reports))
    (out_dir / f"{stem}.json").write_text(json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n")
    (out_dir / f"{stem}.txt").write_text(format_table(reports) + "\n")


def format_table(reports: Sequence[MetricReport], metrics: Sequence[str] | None = None) -> str:
    """Aligned text table, one row per (retriever, ranker), one column per metric."""
    if not reports:
        return "(no results)"
    if metrics is None:
        metrics = list(dict.fromkeys(m for r in reports for m in r.per_run))
    header = ["dataset", "retriever", "ranker"] + [f"{m}@{reports[0].k}" if m in ("hit", "ndcg") else m for m in metrics]
    body = []
    for r in reports:
        means = r.means
        body.append([r.dataset, r.retriever, r.ranker] + [f"{means[m]:.4f}" if m in means else "-" for m in metrics])
    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]
    fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(row) for row in body])


# -- retriever evaluation -------------------------------------------------------


def eval_inputs(dataset: Dataset, splits: Mapping[str, UserSplit], stage: str = "test"):
    """Dense (inputs, targets) for leave-one-out: test sees train + val, val sees train."""
    inputs, targets = {}, {}
    for u, s in splits.items():
        uid = dataset.user_index[u]
        hist = list(s.train) + ([s.val] if stage == "test" else [])
        inputs[uid] = [dataset.item_index[i] for i in hist]
        targets[uid] = dataset.item_index[s.test if stage == "test" else s.val]
    return inputs, targets


def retriever_run(model: SASRec, dataset: Dataset, splits: Mapping[str, UserSplit], k: int = 10) -> dict[str, float]:
    """Hit@K and NDCG@K of one model over all test users, ranking the full item set."""
    inputs, targets = eval_inputs(dataset, splits, "test")
    scores = user_scores(model, inputs)
    ranks = [target_rank(scores[u], targets[u], set(inputs[u])) for u in targets]
    return {
        "hit": float(np.mean([hit_at_k(r, k) for r in ranks])),
        "ndcg": float(np.mean([ndcg_at_k(r, k) for r in ranks])),
    }


def eval_retriever(
    models: Sequence[SASRec], dataset: Dataset, splits: Mapping[str, UserSplit], k: int = 10,
    dataset_tag: str = "", retriever_tag: str = "",
) -> MetricReport:
    """One run per trained model (typically one per seed)."""
    rep = MetricReport(dataset_tag, retriever_tag, "none", k, {"hit": [], "ndcg": []})
    for model in models:
        run = retriever_run(model, dataset, splits, k)
        rep.per_run["hit"].append(run["hit"])
        rep.per_run["ndcg"].append(run["ndcg"])
    return rep


# -- ranker evaluation ----------------------------------------------------------


@dataclass(frozen=True)
class EvalSlate:
    user_id: str
    retrieved: tuple[str, ...]  # top-M in retriever order
    target: str

    @property
    def hit(self) -> bool:
        return self.target in self.retrieved

    def slate(self) -> tuple[CandidateSlate, bool]:
        """Slate containing the target (injected over the lowest-scored filler when missing)."""
        cands = list(self.retrieved)
        injected = not self.hit
        if injected:
            cands[-1] = self.target
        return CandidateSlate(self.user_id, tuple(cands), cands.index(self.target) + 1), injected

    def bias_sample(self) -> BiasSample:
        fillers = tuple(i for i in self.retrieved if i != self.target)[: len(self.retrieved) - 1]
        return BiasSample(self.user_id, self.user_id, self.target, fillers)


def build_eval_slates(
    model: SASRec, dataset: Dataset, splits: Mapping[str, UserSplit], m: int = 10
) -> dict[str, EvalSlate]:
    inputs, targets = eval_inputs(dataset, splits, "test")
    scores = user_scores(model, inputs)
    out = {}
    for u in splits:
        uid = dataset.user_index[u]
        top = rank_items(scores[uid], set(inputs[uid]))[:m]
        out[u] = EvalSlate(u, tuple(dataset.item_order[i - 1] for i in top), splits[u].test)
    return out


def eval_ranker(
    make_ranker: Callable[[int], Ranker],
    slates: Mapping[str, EvalSlate],
    k: int = 10,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    bias_users: int | None = 100,
    with_bias: bool = True,
    dataset_tag: str = "",
    retriever_tag: str = "",
    ranker_tag: str = "",
) -> MetricReport:
    """NDCG@K of the target in ranked slates, plus MAPB, once per seed.

    ``ndcg`` counts users whose retrieved slate missed the target as 0 (so an
    identity ranker reproduces the retriever's NDCG); ``ndcg_injected`` ranks
    slates with the target swapped in for the last filler. MAPB uses a
    seed-dependent subsample of ``bias_users`` users.
    """
    users = sorted(slates)
    metrics = {"ndcg": [], "ndcg_injected": []}
    if with_bias:
        metrics["mapb"] = []
    rep = MetricReport(dataset_tag, retriever_tag, ranker_tag, k, metrics)
    injected_users = []
    for seed in seeds:
        ranker = make_ranker(seed)
        natural, injected_scores = [], []
        injected_users = []
        for u in users:
            slate, injected = slates[u].slate()
            r = ranker(slate).rank_of(slate.target_position)
            g = ndcg_at_k(r, k)
            injected_scores.append(g)
            natural.append(0.0 if injected else g)
            if injected:
                injected_users.append(u)
        rep.per_run["ndcg"].append(float(np.mean(natural)))
        rep.per_run["ndcg_injected"].append(float(np.mean(injected_scores)))
        if with_bias:
            pool = [u for u in users if len(slates[u].retrieved) >= 2]
            chosen = pool if bias_users is None or bias_users >= len(pool) else sorted(random.Random(seed).sample(pool, bias_users))
            samples = [slates[u].bias_sample() for u in chosen]
            m = len(slates[chosen[0]].retrieved)
            rep.per_run["mapb"].append(mapb(position_bias_harness(ranker, samples, m)))
    rep.notes["injected_fraction"] = len(injected_users) / len(users) if users else 0.0
    return rep
