"""Small fixture pipeline shared by the CLI and acceptance tests."""

from pathlib import Path

import yaml

from cotrec.cli import main
from cotrec.synth import write_fixture

STAGES = [
    ["ingest"],
    ["extract", "preferences"],
    ["extract", "descriptions"],
    ["fit-reducer"],
    ["train", "--cell", "none:random"],
    ["train", "--cell", "preference:description"],
    ["retrieve"],
    ["extract", "perceptions"],
    ["eval", "--target", "retriever"],
    ["eval", "--target", "ranker"],
    ["report"],
]


def write_config(root: Path, **overrides) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    write_fixture(root / "data", n_users=48, n_clusters=4, items_per_cluster=8, length=7, noise=0.1, seed=0)
    cfg = {
        "data": {"interactions": "data/interactions.jsonl", "items": "data/items.jsonl", "name": "fixture"},
        "gateway": {"mock": True, "mock_dim": 32},
        "extraction": {"batch_size": 3, "overlap": 1},
        "retriever": {"dim": 8, "blocks": 1, "max_len": 10, "epochs": 4, "eval_every": 2},
        "ranker": {"m": 6},
        "eval": {"seeds": [0, 1], "bias_users": 4},
    }
    for key, val in overrides.items():
        cfg[key] = {**cfg.get(key, {}), **val}
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run_pipeline(config: Path, *extra: str) -> None:
    for stage in STAGES:
        code = main(stage + ["-c", str(config), *extra])
        assert code == 0, f"stage {stage} exited {code}"
