"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import hashlib
import json
import math
import random
import re
import time

import numpy as np
import pytest
import torch

from cotrec.cli import main
from cotrec.config import load_config
from cotrec.corpus import ItemMeta, load_splits
from cotrec.encode_map import encode_and_map, fit_reducer
from cotrec.evalkit import BiasSample, PositionBiasRecord, hit_at_k, mapb, ndcg_at_k, position_bias_harness, sample_bias
from cotrec.extraction import find_leaks, plan_batches
from cotrec.gateway import Gateway, MockBackend, TranscriptEntry
from cotrec.ranker import LLMRanker, RankingResult, order_by_scores
from cotrec.retriever import ModelConfig, SASRec, bce_loss, build_input, train, train_hit_at_1
from cotrec.synth import toy_world, write_fixture
from helpers import run_pipeline, write_config


@pytest.fixture
def verdict(capsys):
    def emit(n: int, title: str, ok: bool, detail: str, started: float):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({time.perf_counter() - started:.2f}s)")
        assert ok, f"criterion {n} failed: {detail}"

    return emit


# -- 1 ---------------------------------------------------------------------------------


def brute_force(rank, k):
    """Materialise a ranked list and score it position by position."""
    length = max(k, rank or 0) + 3
    ranked = ["other"] * length
    if rank is not None:
        ranked[rank - 1] = "target"
    hit = int("target" in ranked[:k])
    dcg = sum((1.0 if item == "target" else 0.0) / math.log2(pos + 1) for pos, item in enumerate(ranked[:k], start=1))
    return hit, dcg  # a single relevant item makes the ideal DCG 1


def test_criterion_01_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = random.Random(1)
    pairs = [(None if rng.random() < 0.1 else rng.randint(1, 60), rng.randint(1, 50)) for _ in range(1000)]
    mismatches = sum((hit_at_k(r, k), ndcg_at_k(r, k)) != brute_force(r, k) for r, k in pairs)
    closed = abs(ndcg_at_k(3, 10) - 0.5) < 1e-12 and abs(ndcg_at_k(1, 10) - 1.0) < 1e-12
    elapsed = time.perf_counter() - t0
    verdict(1, "metric oracles", mismatches == 0 and closed and elapsed < 1.0,
            f"{mismatches} mismatches over 1000 pairs, closed forms {'ok' if closed else 'wrong'}", t0)


# -- 2 ---------------------------------------------------------------------------------


def item_score(item_id: str) -> float:
    return int(hashlib.sha256(item_id.encode()).hexdigest()[:8], 16) / 2 ** 32


def invariant_ranker(slate):
    return RankingResult(order_by_scores([item_score(i) for i in slate.candidates]), None)


def first_slot_ranker(slate):
    scores = [item_score(i) for i in slate.candidates]
    scores[0] = 10.0
    return RankingResult(order_by_scores(scores), None)


def synthetic_samples(n=50, m=10):
    return [BiasSample(f"s{k}", f"u{k}", f"t{k}", tuple(f"f{k}-{j}" for j in range(m - 1))) for k in range(n)]


def test_criterion_02_mapb(verdict):
    t0 = time.perf_counter()
    # direct formula: mean over j of |r_j - mean(r)|
    direct = lambda ranks: sum(abs(r - sum(ranks) / len(ranks)) for r in ranks) / len(ranks)  # noqa: E731
    a, b = PositionBiasRecord("a", (1, 2)), PositionBiasRecord("b", (1, 2, 3, 4))
    values_ok = (
        sample_bias(a) == direct([1, 2]) == 0.5
        and sample_bias(b) == direct([1, 2, 3, 4]) == 1.0
        # same M for both samples: biases 0.5 and 1.0
        and mapb([PositionBiasRecord("c", (1, 1, 2, 2)), b]) == 0.75
    )
    samples = synthetic_samples()
    flat = mapb(position_bias_harness(invariant_ranker, samples, 10))
    biased = mapb(position_bias_harness(first_slot_ranker, samples, 10))
    elapsed = time.perf_counter() - t0
    ok = values_ok and flat == 0.0 and biased > 0.0 and elapsed < 5.0
    verdict(2, "MAPB", ok, f"formula values {'ok' if values_ok else 'wrong'}, invariant MAPB={flat}, first-slot MAPB={biased:.3f}", t0)


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_03_harness_exactness(verdict):
    t0 = time.perf_counter()
    m, n = 8, 12
    samples = synthetic_samples(n, m)
    catalog = {i: ItemMeta(i, f"caption of {i}") for s in samples for i in (s.target,) + s.fillers}
    ranker = LLMRanker(Gateway(MockBackend()), catalog, {}, history_len=0, record_transcript=True)
    position_bias_harness(ranker, samples, m)
    problems = []
    for s in samples:
        calls = [row for row in ranker.transcript if row["user_id"] == s.user_id]
        placements = sorted(row["candidates"].index(s.target) + 1 for row in calls)
        if len(calls) != m or placements != list(range(1, m + 1)):
            problems.append(s.sample_id)
    verdict(3, "position-bias harness", not problems and len(ranker.transcript) == m * n,
            f"{len(ranker.transcript)} calls for {n} samples at M={m}, {len(problems)} samples off", t0)


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_04_gradient_check(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig(dim=8, blocks=1, heads=1, max_len=4, use_user_slot=True)
    torch.manual_seed(0)
    model = SASRec(5, 2, cfg).double()
    with torch.no_grad():
        for p in model.parameters():  # move away from the trivial layer-norm init
            p.add_(0.3 * torch.randn_like(p))
        model.item_emb.weight[0].zero_()
    lays = [build_input(1, [1, 2, 3], cfg), build_input(2, [4, 5], cfg)]
    tokens = torch.as_tensor(np.stack([x.tokens for x in lays]))
    is_user = torch.as_tensor(np.stack([x.is_user for x in lays]))
    targets = torch.as_tensor(np.stack([x.targets for x in lays]))
    # two negatives at every supervised position, 0 elsewhere (as sample_negatives produces)
    negs = torch.tensor([[[0, 0], [3, 4], [4, 5], [0, 0]], [[0, 0], [0, 0], [1, 3], [0, 0]]])
    assert torch.equal(negs != 0, (targets != 0)[..., None].expand_as(negs))

    def loss():
        return bce_loss(model, tokens, is_user, targets, negs)

    model.zero_grad()
    loss().backward()
    eps = 1e-4
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            numeric = torch.zeros_like(analytic)
            flat = p.view(-1)
            for j in range(flat.numel()):
                keep = flat[j].item()
                flat[j] = keep + eps
                up = loss().item()
                flat[j] = keep - eps
                down = loss().item()
                flat[j] = keep
                numeric[j] = (up - down) / (2 * eps)
            # the key bias has an identically zero gradient (softmax ignores a constant
            # shift), so floor the scale well above finite-difference roundoff
            scale = max(analytic.norm().item(), numeric.norm().item(), 1e-6)
            rel = (analytic - numeric).norm().item() / scale
            if rel > worst:
                worst, worst_name = rel, name
    groups = len(list(model.named_parameters()))
    elapsed = time.perf_counter() - t0
    verdict(4, "retriever gradient check", worst < 1e-3 and elapsed < 30,
            f"max relative error {worst:.2e} ({worst_name}) over {groups} parameter groups", t0)


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_05_causality(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig(dim=16, blocks=2, heads=2, max_len=10, use_user_slot=True)
    torch.manual_seed(1)
    model = SASRec(30, 5, cfg).eval()
    rng = np.random.default_rng(5)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            length = int(rng.integers(2, 10))
            lay = build_input(int(rng.integers(1, 6)), rng.integers(1, 31, size=length).tolist(), cfg)
            tokens, is_user = torch.as_tensor(lay.tokens)[None], torch.as_tensor(lay.is_user)[None]
            first_item = int(np.argmax(lay.tokens != 0)) + 1
            t = int(rng.integers(first_item, cfg.max_len))
            changed = tokens.clone()
            changed[0, t:] = torch.as_tensor(rng.integers(1, 31, size=cfg.max_len - t))
            a, b = model(tokens, is_user), model(changed, is_user)
            worst = max(worst, (a[0, :t] - b[0, :t]).abs().max().item())
    verdict(5, "causality invariant", worst <= 1e-6, f"max change before the perturbed position {worst:.1e} over 100 trials", t0)


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_06_overfit(verdict):
    t0 = time.perf_counter()
    seqs = toy_world(n_users=50, n_items=20, n_clusters=4, length=12)
    model = train(seqs, 20, 50, ModelConfig(dim=32, blocks=2, max_len=12, epochs=200, seed=0)).model
    hit1 = train_hit_at_1(model, seqs)
    elapsed = time.perf_counter() - t0
    verdict(6, "overfit toy world", hit1 >= 0.9 and elapsed < 120, f"training Hit@1 {hit1:.3f} after 200 epochs", t0)


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_07_encode_map(verdict):
    t0 = time.perf_counter()
    gw = Gateway(MockBackend(dim=48))
    texts = [f"{a} {b} item {k}" for k, (a, b) in enumerate(zip(["red", "green", "blue", "gold"] * 10, ["cat", "dog", "owl"] * 14))]
    r = fit_reducer(gw.embed(texts).vectors, 12)
    ortho = np.abs(r.projection.T @ r.projection - np.eye(12)).max()

    # texts pinned to vectors inside a 6-dim affine subspace of a 48-dim space
    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.standard_normal((48, 6)))
    offset = rng.standard_normal(48)
    coords = rng.standard_normal((30, 6))
    pinned = {f"text {k}": offset + basis @ coords[k] for k in range(30)}
    sub_gw = Gateway(MockBackend(dim=48, vectors=pinned))
    names = list(pinned)
    raw = sub_gw.embed(names).vectors
    sub = fit_reducer(raw, 6)
    mapped = encode_and_map(names, sub, sub_gw)
    centered = raw - raw.mean(axis=0)
    gram_err = np.abs(centered @ centered.T - mapped @ mapped.T).max()

    direction = fit_reducer(np.array([[1.0, 1.0], [-1.0, -1.0], [3.0, 3.0]]), 1).projection[:, 0]
    dir_err = np.abs(direction - np.array([1, 1]) / math.sqrt(2)).max()
    ok = ortho < 1e-6 and gram_err < 1e-6 and dir_err < 1e-9
    verdict(7, "encode and map", ok, f"orthonormality {ortho:.1e}, Gram {gram_err:.1e}, 2-D direction {dir_err:.1e}", t0)


# -- 8 ---------------------------------------------------------------------------------


def enumerate_windows(n, b, o):
    starts = list(range(0, n, b - o))
    out = []
    for s in starts:
        out.append((s, min(s + b, n)))
        if s + b >= n:
            break
    return out


def test_criterion_08_batching(verdict):
    t0 = time.perf_counter()
    examples_ok = (
        list(plan_batches(10, 4, 1).windows) == [(0, 4), (3, 7), (6, 10)]
        and list(plan_batches(7, 4, 2).windows) == [(0, 4), (2, 6), (4, 7)]
    )
    rng = random.Random(8)
    failures = 0
    for _ in range(1000):
        b = rng.randint(1, 25)
        o = rng.randint(0, b - 1)
        n = rng.randint(1, 300)
        w = list(plan_batches(n, b, o).windows)
        covered = set().union(*(range(s, e) for s, e in w)) == set(range(n))
        ordered = all(s0 < s1 and e0 <= e1 for (s0, e0), (s1, e1) in zip(w, w[1:]))
        steps = all(s1 - s0 == b - o for (s0, _), (s1, _) in zip(w, w[1:]))
        sizes = all(e - s == b for s, e in w[:-1]) and 0 < w[-1][1] - w[-1][0] <= b
        if not (covered and ordered and steps and sizes and w == enumerate_windows(n, b, o)):
            failures += 1
    verdict(8, "batching oracle", examples_ok and failures == 0,
            f"examples {'ok' if examples_ok else 'wrong'}, {failures}/1000 random plans violate the properties", t0)


# -- 9 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_directional_ablation(tmp_path, verdict):
    t0 = time.perf_counter()
    write_fixture(tmp_path / "data", n_users=200, n_clusters=8, items_per_cluster=15, length=8, seed=0)
    (tmp_path / "c.yaml").write_text(json.dumps({
        "data": {"interactions": "data/interactions.jsonl", "items": "data/items.jsonl", "name": "clusters"},
        # a short budget: the init advantage shrinks as both cells converge
        "retriever": {"dim": 32, "epochs": 20, "eval_every": 0},
        "eval": {"seeds": [0, 1, 2, 3, 4]},
    }))
    cfg = str(tmp_path / "c.yaml")
    for stage in (["ingest"], ["extract", "preferences"], ["extract", "descriptions"], ["fit-reducer"],
                  ["train", "--cell", "none:random"], ["train", "--cell", "preference:description"],
                  ["eval", "--target", "retriever"]):
        assert main(stage + ["-c", cfg]) == 0
    rows = json.loads((load_config(cfg).run_dir / "eval/retriever/report.json").read_text())
    per_seed = {r["retriever"]: r["per_run"]["ndcg"] for r in rows}
    base_runs, our_runs = per_seed["user=none item=random"], per_seed["user=preference item=description"]
    base, ours = sum(base_runs) / len(base_runs), sum(our_runs) / len(our_runs)
    wins = sum(a > b for a, b in zip(our_runs, base_runs))
    elapsed = time.perf_counter() - t0
    ok = ours - base > 0 and len(our_runs) == len(base_runs) == 5 and elapsed < 600
    verdict(9, "directional ablation", ok,
            f"mean NDCG@10 over 5 seeds: preference+description {ours:.4f} vs none+random {base:.4f}, "
            f"margin {ours - base:+.4f}, ahead on {wins}/5 seeds", t0)


# -- 10 & 11 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    config = write_config(root)
    out = {}
    for name in ("first", "second"):
        run_pipeline(config, "--output-dir", str(root / name), "--cache-dir", str(root / f"cache-{name}"))
        out[name] = load_config(config, output_dir=str(root / name)).run_dir
    run_pipeline(config, "--output-dir", str(root / "warm"), "--cache-dir", str(root / "cache-first"))
    out["warm"] = load_config(config, output_dir=str(root / "warm")).run_dir
    return config, out


def test_criterion_10_end_to_end_determinism(twin_runs, verdict):
    t0 = time.perf_counter()
    _, runs = twin_runs
    csvs = ["eval/retriever/report.csv", "eval/ranker/report.csv"]
    identical = all((runs["first"] / c).read_bytes() == (runs["second"] / c).read_bytes() == (runs["warm"] / c).read_bytes()
                    for c in csvs)
    cold_calls = sum((json.loads(p.read_text())["gateway"] or {}).get("backend_calls", 0)
                     for p in runs["first"].rglob("manifest.json"))
    warm_calls = sum((json.loads(p.read_text())["gateway"] or {}).get("backend_calls", 0)
                     for p in runs["warm"].rglob("manifest.json"))
    ok = identical and warm_calls == 0 and cold_calls > 0
    verdict(10, "end-to-end determinism", ok,
            f"report CSVs {'byte-identical' if identical else 'DIFFER'} across runs, backend calls cold={cold_calls} warm={warm_calls}", t0)


TAG = re.compile(r"\[i:([^\]]+)\]")


def test_criterion_11_leakage_guard(twin_runs, verdict):
    t0 = time.perf_counter()
    _, runs = twin_runs
    run = runs["first"]
    splits = load_splits(run / "dataset/splits.jsonl")
    files = sorted((run / "extraction").glob("*/transcript.jsonl"))
    prompts, leaks = 0, []
    for f in files:
        for line in f.read_text().splitlines():
            row = json.loads(line)
            prompts += 1
            user = row["meta"].get("user_id")
            if user is None:
                # user-independent prompts (item descriptions) name only their own subject
                tags = set(TAG.findall(row["system"] + row["user"]))
                if tags - {row["meta"].get("item_id")}:
                    leaks.append((None, tags))
                continue
            held = {splits[user].val, splits[user].test} - {row["meta"].get("item_id")}
            leaks += [(user, t) for t in TAG.findall(row["system"] + row["user"]) if t in held]
    # negative control: the scanner must flag a planted held-out item
    u = next(iter(splits))
    planted = TranscriptEntry("summarize", "", f"- [i:{splits[u].test}] x", "", {"user_id": u})
    control = len(find_leaks([planted], splits)) == 1
    ok = files and prompts > 0 and not leaks and control
    verdict(11, "leakage guard", bool(ok),
            f"{prompts} extraction prompts in {len(files)} transcripts scanned, {len(leaks)} held-out mentions, planted leak {'caught' if control else 'MISSED'}", t0)
