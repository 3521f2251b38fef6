"""Synthetic interaction worlds for tests, demos and the CLI fixture.

``cluster_world`` builds users that each stick to one topical cluster. Item
captions and descriptions carry the cluster's vocabulary, so a bag-of-words
embedder (such as the mock backend's) maps same-cluster texts to nearby
directions.

Run ``python -m cotrec.synth OUT_DIR`` to write a fixture dataset as JSON Lines.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from .corpus import Interaction, ItemMeta, build_dataset

THEMES = [
    ("astronomy", "telescope", "orbit"), ("baking", "sourdough", "oven"), ("cycling", "gravel", "derailleur"),
    ("jazz", "saxophone", "swing"), ("gardening", "compost", "seedling"), ("chess", "endgame", "gambit"),
    ("hiking", "trail", "summit"), ("robotics", "servo", "actuator"), ("pottery", "glaze", "kiln"),
    ("sailing", "regatta", "mainsail"), ("knitting", "yarn", "stitch"), ("opera", "aria", "soprano"),
]
NOUNS = ["guide", "kit", "handbook", "set", "journal", "primer", "atlas", "collection"]


def toy_world(n_users: int = 50, n_items: int = 20, n_clusters: int = 4, length: int = 12) -> dict[int, list[int]]:
    """Dense-id sequences: each user cycles through its cluster from a fixed offset."""
    size = n_items // n_clusters
    seqs = {}
    for u in range(1, n_users + 1):
        c = (u - 1) % n_clusters
        members = list(range(1 + size * c, 1 + size * (c + 1)))
        offset = ((u - 1) // n_clusters) % size
        seqs[u] = [members[(offset + t) % size] for t in range(length)]
    return seqs


def cluster_world(
    n_users: int = 200,
    n_clusters: int = 8,
    items_per_cluster: int = 15,
    length: int = 8,
    noise: float = 0.0,
    seed: int = 0,
):
    """Returns ``(interactions, items)`` ready for :func:`cotrec.corpus.build_dataset`.

    Every user draws ``length`` distinct items from one cluster (with
    probability ``noise`` an item comes from another cluster instead).
    """
    if n_clusters > len(THEMES):
        raise ValueError(f"at most {len(THEMES)} clusters")
    rng = random.Random(seed)
    items: dict[str, ItemMeta] = {}
    members: list[list[str]] = []
    for c in range(n_clusters):
        topic, w1, w2 = THEMES[c]
        ids = []
        for k in range(items_per_cluster):
            item_id = f"c{c}-{k}"
            noun = NOUNS[(k + c) % len(NOUNS)]
            caption = f"{topic} {noun} no {c * items_per_cluster + k}"
            description = f"a {topic} {noun} covering {w1} and {w2} for {topic} fans"
            items[item_id] = ItemMeta(item_id, caption, description)
            ids.append(item_id)
        members.append(ids)
    interactions = []
    for u in range(n_users):
        c = u % n_clusters
        seq: list[str] = []
        pool = list(members[c])
        rng.shuffle(pool)
        while len(seq) < length:
            if noise and rng.random() < noise:
                other = rng.choice([k for k in range(n_clusters) if k != c])
                cand = rng.choice(members[other])
            else:
                cand = pool.pop()
            if cand not in seq:
                seq.append(cand)
        for t, item_id in enumerate(seq):
            interactions.append(Interaction(f"u{u:04d}", item_id, 1_700_000_000 + 3600 * t + u))
    return interactions, items


def cluster_dataset(**kwargs):
    interactions, items = cluster_world(**kwargs)
    return build_dataset(interactions, items)


def write_fixture(out_dir: str | Path, **kwargs) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    interactions, items = cluster_world(**kwargs)
    inter_path, items_path = out_dir / "interactions.jsonl", out_dir / "items.jsonl"
    with open(inter_path, "w") as fh:
        for x in interactions:
            fh.write(json.dumps({"user_id": x.user_id, "item_id": x.item_id, "timestamp": x.timestamp}) + "\n")
    with open(items_path, "w") as fh:
        for it in items.values():
            fh.write(json.dumps({"item_id": it.item_id, "caption": it.caption, "description": it.description}) + "\n")
    return inter_path, items_path


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="write a synthetic cluster-world dataset as JSON Lines")
    ap.add_argument("out_dir")
    ap.add_argument("--users", type=int, default=120)
    ap.add_argument("--clusters", type=int, default=6)
    ap.add_argument("--items-per-cluster", type=int, default=10)
    ap.add_argument("--length", type=int, default=8)
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    paths = write_fixture(
        args.out_dir, n_users=args.users, n_clusters=args.clusters, items_per_cluster=args.items_per_cluster,
        length=args.length, noise=args.noise, seed=args.seed,
    )
    print("\n".join(str(p) for p in paths))


if __name__ == "__main__":
    main()
