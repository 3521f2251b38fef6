"""Staged command-line pipeline.

    cotrec ingest          filter + split the raw JSON Lines files
    cotrec extract STAGE   preferences | descriptions | perceptions (LLM, offline, cached)
    cotrec fit-reducer     PCA map from language-model space to retriever space
    cotrec train           one ablation cell (--cell USER:ITEM) or all seven (--grid)
    cotrec retrieve        top-M candidates per user from a trained cell
    cotrec eval            --target retriever | ranker
    cotrec report          collect evaluation tables

Every command writes into ``<output_dir>/run-<config hash>/<stage>/`` together
with a ``manifest.json``. Exit codes: 0 ok, 2 usage or missing artifact,
3 backend failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .corpus import CorpusError, Dataset, filter_k_core, ingest, load_splits, save_splits, split_leave_one_out
from .encode_map import Reducer, build_item_table, build_user_table, fit_reducer, item_texts
from .evalkit import build_eval_slates, eval_ranker, eval_retriever, format_table, write_reports
from .extraction import (
    ExtractionError,
    Extractor,
    extract_perceptions,
    extract_preferences,
    find_leaks,
    load_perceptions,
    load_preferences,
    save_perceptions,
    save_preferences,
)
from .gateway import DiskCache, Gateway, GatewayError, HttpBackend, MockBackend
from .prompts import Prompts
from .ranker import ENRICHED, LLMRanker, RankerVariant, identity_ranker, save_transcript
from .retriever import load_checkpoint, save_checkpoint, train, write_history

log = logging.getLogger("cotrec")

EXIT_OK, EXIT_USAGE, EXIT_BACKEND = 0, 2, 3

USER_MODES = ("none", "random", "preference")
ITEM_MODES = ("random", "caption", "description")
# the seven rows of the retrieval ablation
GRID = (
    ("none", "random"), ("none", "caption"), ("none", "description"),
    ("random", "caption"), ("random", "description"),
    ("preference", "caption"), ("preference", "description"),
)
RETRIEVER_TAGS = {("none", "random"): "CRM", ("preference", "description"): "CRM++"}


class MissingArtifact(Exception):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def parse_cell(text: str) -> tuple[str, str]:
    parts = text.replace("-", ":").split(":")
    if len(parts) != 2 or parts[0] not in USER_MODES or parts[1] not in ITEM_MODES:
        raise ConfigError(f"cell must be USER:ITEM with USER in {USER_MODES} and ITEM in {ITEM_MODES}, got {text!r}")
    return parts[0], parts[1]


def cell_name(cell: tuple[str, str]) -> str:
    return f"{cell[0]}-{cell[1]}"


class Run:
    """Paths, shared artifacts and manifest bookkeeping for one config."""

    def __init__(self, cfg: PipelineConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.root = cfg.run_dir
        self.config_hash = cfg.content_hash()
        self._gateway: Gateway | None = None
        self.started = time.time()

    # -- artifacts -----------------------------------------------------------

    def stage(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, path: Path, hint: str) -> Path:
        if not path.is_file():
            raise MissingArtifact(f"missing artifact {path} ({hint})")
        return path

    def dataset(self) -> tuple[Dataset, dict]:
        d = self.root / "dataset"
        ds = Dataset.load(self.require(d / "dataset.json", "run `cotrec ingest` first"))
        return ds, load_splits(d / "splits.jsonl")

    @property
    def prefs_path(self) -> Path:
        return self.root / "extraction" / "preferences" / "preferences.jsonl"

    @property
    def descriptions_path(self) -> Path:
        return self.root / "extraction" / "descriptions" / "descriptions.jsonl"

    @property
    def perceptions_path(self) -> Path:
        return self.root / "extraction" / "perceptions" / "perceptions.jsonl"

    @property
    def reducer_path(self) -> Path:
        return self.root / "reducer" / "reducer.json"

    def checkpoint_path(self, cell, seed: int) -> Path:
        return self.root / "checkpoints" / cell_name(cell) / f"seed{seed}.ckpt"

    def descriptions(self) -> dict[str, str]:
        if not self.descriptions_path.is_file():
            return {}
        rows = [json.loads(ln) for ln in self.descriptions_path.read_text().splitlines() if ln.strip()]
        return {r["item_id"]: r["objective_description"] for r in rows}

    def gateway(self, record: bool = False) -> Gateway:
        if self._gateway is None:
            g = self.cfg.gateway
            if g.mock:
                backend = MockBackend(seed=g.mock_seed, dim=g.mock_dim)
            else:
                backend = HttpBackend(g.endpoint, g.model or "", g.embed_model, g.api_key_env)
            self._gateway = Gateway(backend, DiskCache(g.cache_dir), g.max_in_flight, g.max_attempts, record=record)
        return self._gateway

    def prompts(self) -> Prompts:
        return Prompts.load(self.cfg.extraction.prompts)

    def manifest(self, stage_dir: Path, consumed: list[Path], produced: list[Path], extra: dict | None = None) -> None:
        gw = self._gateway
        body = {
            "tool_version": __version__,
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.cfg.to_json(),
            "consumed": {str(p.relative_to(self.root) if p.is_relative_to(self.root) else p): sha256_file(p)
                         for p in consumed if p.is_file()},
            "produced": {str(p.relative_to(self.root)): sha256_file(p) for p in produced},
            "started_at": self.started,
            "finished_at": time.time(),
            "gateway": {"backend_calls": gw.backend_calls, "cache_hits": gw.cache_hits} if gw else None,
        }
        body.update(extra or {})
        (stage_dir / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------------


def cmd_ingest(run: Run, args) -> None:
    cfg = run.cfg
    for p in (cfg.data.interactions, cfg.data.items):
        if not p or not Path(p).is_file():
            raise MissingArtifact(f"input file {p!r} not found")
    raw = ingest(cfg.data.interactions, cfg.data.items)
    ds = filter_k_core(raw, cfg.data.k_core)
    if ds.is_empty():
        raise CorpusError(f"no users left after {cfg.data.k_core}-core filtering")
    splits = split_leave_one_out(ds)
    out = run.stage("dataset")
    ds.save(out / "dataset.json")
    save_splits(splits, out / "splits.jsonl")
    log.info("ingested %d users, %d items (%d users before filtering)", ds.n_users, ds.n_items, raw.n_users)
    run.manifest(out, [Path(cfg.data.interactions), Path(cfg.data.items)], [out / "dataset.json", out / "splits.jsonl"],
                 {"stats": {"users": ds.n_users, "items": ds.n_items, "interactions": len(ds.interactions())}})


def _transcript_rows(gw: Gateway) -> list[dict]:
    rows = [{"task": e.task, "meta": e.meta, "system": e.system_prompt, "user": e.user_prompt, "response": e.response}
            for e in gw.transcript or []]
    return sorted(rows, key=lambda r: json.dumps(r, sort_keys=True))


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def cmd_extract(run: Run, args) -> None:
    cfg = run.cfg
    ds, splits = run.dataset()
    gw = run.gateway(record=True)
    e = cfg.extraction
    ex = Extractor(gw, run.prompts(), e.batch_size, e.overlap, e.use_prior, e.max_tokens, e.min_keywords, e.max_keywords)
    out = run.stage("extraction", args.stage)
    consumed = [run.root / "dataset" / "dataset.json"]
    if args.stage == "preferences":
        prefs = extract_preferences(ex, ds, splits)
        save_preferences(prefs, run.prefs_path)
        produced = [run.prefs_path]
    elif args.stage == "descriptions":
        rows = [{"item_id": i, "objective_description": ex.describe_item(ds.items[i])} for i in ds.item_order]
        _write_jsonl(rows, run.descriptions_path)
        produced = [run.descriptions_path]
    else:
        prefs = load_preferences(run.require(run.prefs_path, "run `cotrec extract preferences` first"))
        pairs = _perception_pairs(run, args, ds, splits)
        perc = extract_perceptions(ex, ds, prefs, pairs)
        save_perceptions(perc, run.perceptions_path)
        consumed.append(run.prefs_path)
        produced = [run.perceptions_path]
    leaks = find_leaks(gw.transcript, splits)
    if leaks:
        raise RuntimeError(f"held-out items reached extraction prompts: {leaks[:3]}")
    transcript = out / "transcript.jsonl"
    _write_jsonl(_transcript_rows(gw), transcript)
    run.manifest(out, consumed, produced + [transcript], {"leaks": len(leaks)})


def _perception_pairs(run: Run, args, ds: Dataset, splits) -> list[tuple[str, str]]:
    """(user, item) pairs the ranker will need: candidates plus each user's test item.

    The test item is included because evaluation swaps it into slates that
    missed it.
    """
    if args.pairs:
        path = Path(args.pairs)
        if not path.is_file():
            raise MissingArtifact(f"pair file {path} not found")
        rows = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
        return [(r["user_id"], r["item_id"]) for r in rows]
    files = sorted((run.root / "retrieval").glob("*/candidates.jsonl"))
    if not files:
        raise MissingArtifact("no candidate lists found; run `cotrec retrieve` or pass --pairs")
    pairs = []
    for f in files:
        for ln in f.read_text().splitlines():
            if ln.strip():
                r = json.loads(ln)
                pairs.extend((r["user_id"], i) for i in r["candidates"])
                pairs.append((r["user_id"], splits[r["user_id"]].test))
    return sorted(set(pairs))


def cmd_fit_reducer(run: Run, args) -> None:
    cfg = run.cfg
    ds, _ = run.dataset()
    gw = run.gateway()
    items = [ds.items[i] for i in ds.item_order]
    texts = item_texts(items, "caption") + item_texts(items, "description", run.descriptions())
    consumed = [run.root / "dataset" / "dataset.json", run.descriptions_path]
    with_prefs = run.prefs_path.is_file()
    if with_prefs:
        prefs = load_preferences(run.prefs_path)
        texts += [prefs[u].text for u in ds.users]
        consumed.append(run.prefs_path)
    reducer = fit_reducer(gw.embed(texts).vectors, cfg.reducer_dim or cfg.retriever.dim)
    out = run.stage("reducer")
    reducer.save(run.reducer_path)
    run.manifest(out, consumed, [run.reducer_path], {"includes_preferences": with_prefs, "corpus_rows": len(texts)})


def _reducer(run: Run, need_prefs: bool) -> Reducer:
    run.require(run.reducer_path, "run `cotrec fit-reducer` first")
    if need_prefs:
        meta = json.loads((run.root / "reducer" / "manifest.json").read_text())
        if not meta.get("includes_preferences"):
            raise MissingArtifact("reducer was fitted without preferences; rerun `cotrec fit-reducer` after extraction")
    return Reducer.load(run.reducer_path)


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    if args.grid == bool(args.cell):
        raise ConfigError("pass exactly one of --cell USER:ITEM or --grid")
    cells = list(GRID) if args.grid else [parse_cell(args.cell)]
    ds, splits = run.dataset()
    sequences = {ds.user_index[u]: [ds.item_index[i] for i in splits[u].train] for u in ds.users}
    val = {ds.user_index[u]: ds.item_index[splits[u].val] for u in ds.users}
    items = [ds.items[i] for i in ds.item_order]
    for cell in cells:
        user_mode, item_mode = cell
        consumed = [run.root / "dataset" / "dataset.json"]
        reducer = prefs = None
        if item_mode != "random" or user_mode == "preference":
            reducer = _reducer(run, user_mode == "preference")
            consumed.append(run.reducer_path)
        if user_mode == "preference":
            prefs = load_preferences(run.require(run.prefs_path, "preference cell needs `cotrec extract preferences`"))
            consumed.append(run.prefs_path)
        gw = run.gateway() if reducer is not None else None
        out = run.stage("checkpoints", cell_name(cell))
        produced = []
        for seed in cfg.eval.seeds:
            dim = cfg.retriever.dim
            it = build_item_table(item_mode, items, dim, seed, reducer, gw, run.descriptions())
            ut = build_user_table(user_mode, ds.users, dim, seed + 7919, prefs, reducer, gw)
            mcfg = cfg.retriever.model_config(seed, user_mode != "none")
            result = train(sequences, ds.n_items, ds.n_users, mcfg, it, ut, val_targets=val)
            ckpt = run.checkpoint_path(cell, seed)
            save_checkpoint(result.model, ckpt, {"cell": cell_name(cell), "seed": seed})
            write_history(result.history, out / f"train_log_seed{seed}.csv")
            produced += [ckpt, out / f"train_log_seed{seed}.csv"]
            log.info("trained %s seed %d: final loss %.4f", cell_name(cell), seed, result.history[-1]["loss"])
        run.manifest(out, consumed, produced)


def _load_cell(run: Run, cell, seed: int):
    path = run.checkpoint_path(cell, seed)
    run.require(path, f"run `cotrec train --cell {cell[0]}:{cell[1]}` first")
    return load_checkpoint(path)[0]


def cmd_retrieve(run: Run, args) -> None:
    cfg = run.cfg
    ds, splits = run.dataset()
    cells = [parse_cell(c) for c in (args.cell or cfg.ranker.retrievers)]
    for cell in cells:
        model = _load_cell(run, cell, cfg.eval.seeds[0])
        slates = build_eval_slates(model, ds, splits, cfg.ranker.m)
        out = run.stage("retrieval", cell_name(cell))
        path = out / "candidates.jsonl"
        _write_jsonl([{"user_id": u, "candidates": list(slates[u].retrieved)} for u in ds.users], path)
        run.manifest(out, [run.checkpoint_path(cell, cfg.eval.seeds[0])], [path])


def cmd_eval(run: Run, args) -> None:
    if args.target == "retriever":
        _eval_retriever(run)
    else:
        _eval_ranker(run)


def _eval_retriever(run: Run) -> None:
    cfg = run.cfg
    ds, splits = run.dataset()
    reports, consumed = [], []
    for cell in GRID:
        paths = [run.checkpoint_path(cell, s) for s in cfg.eval.seeds]
        if not all(p.is_file() for p in paths):
            continue
        models = [load_checkpoint(p)[0] for p in paths]
        reports.append(eval_retriever(models, ds, splits, cfg.eval.k, cfg.data.name, f"user={cell[0]} item={cell[1]}"))
        consumed += paths
    if not reports:
        raise MissingArtifact("no trained checkpoints found; run `cotrec train` first")
    out = run.stage("eval", "retriever")
    write_reports(reports, out, "report")
    print(format_table(reports))
    run.manifest(out, consumed, [out / "report.csv", out / "report.json", out / "report.txt"])


def _eval_ranker(run: Run) -> None:
    cfg = run.cfg
    ds, splits = run.dataset()
    histories = {u: list(splits[u].train) + [splits[u].val] for u in ds.users}
    variants = list(cfg.ranker.variants)
    prefs = perc = None
    consumed = []
    if ENRICHED in variants:
        prefs = load_preferences(run.require(run.prefs_path, "enriched ranking needs `cotrec extract preferences`"))
        perc = load_perceptions(run.require(run.perceptions_path, "enriched ranking needs `cotrec extract perceptions`"))
        consumed += [run.prefs_path, run.perceptions_path]
    gw = run.gateway() if variants else None
    out = run.stage("eval", "ranker")
    reports, produced = [], []
    for cell_text in cfg.ranker.retrievers:
        cell = parse_cell(cell_text)
        model = _load_cell(run, cell, cfg.eval.seeds[0])
        consumed.append(run.checkpoint_path(cell, cfg.eval.seeds[0]))
        slates = build_eval_slates(model, ds, splits, cfg.ranker.m)
        tag = RETRIEVER_TAGS.get(cell, cell_name(cell))
        common = dict(k=cfg.eval.k, seeds=cfg.eval.seeds, bias_users=cfg.eval.bias_users,
                      dataset_tag=cfg.data.name, retriever_tag=tag)
        reports.append(eval_ranker(lambda seed: identity_ranker, slates, with_bias=False, ranker_tag="none", **common))
        for v in variants:
            variant = RankerVariant(v)
            if v == ENRICHED:
                kw = {key: p.keywords for key, p in perc.items()}
                needed = {(s.user_id, i) for s in slates.values() for i in s.retrieved + (s.target,)}
                missing = sorted(needed - set(kw))
                if missing:
                    raise MissingArtifact(f"no perception for {len(missing)} pair(s), e.g. {missing[0]}; "
                                          "run `cotrec retrieve` then `cotrec extract perceptions`")
                variant = RankerVariant(ENRICHED, {u: p.text for u, p in prefs.items()}, kw)
            rankers: list[LLMRanker] = []

            def make(seed, variant=variant):
                r = LLMRanker(gw, ds.items, histories, variant, run.prompts(), cfg.ranker.history, seed,
                              record_transcript=True)
                rankers.append(r)
                return r

            reports.append(eval_ranker(make, slates, ranker_tag="LLM" if v == "plain" else "LLM++", **common))
            rows = [dict(row, seed=r.seed) for r in rankers for row in r.transcript]
            path = out / f"transcript_{cell_name(cell)}_{v}.jsonl"
            save_transcript(rows, path)
            produced.append(path)
    write_reports(reports, out, "report")
    print(format_table(reports, ["ndcg", "ndcg_injected", "mapb"]))
    run.manifest(out, consumed, produced + [out / "report.csv", out / "report.json", out / "report.txt"])


def cmd_report(run: Run, args) -> None:
    from .evalkit import MetricReport

    sections = []
    for target, metrics in (("retriever", ["hit", "ndcg"]), ("ranker", ["ndcg", "ndcg_injected", "mapb"])):
        path = run.root / "eval" / target / "report.json"
        if not path.is_file():
            continue
        reps = [MetricReport(r["dataset"], r["retriever"], r["ranker"], r["k"], r["per_run"], r.get("notes", {}))
                for r in json.loads(path.read_text())]
        sections.append(f"== {target} ==\n{format_table(reps, metrics)}")
    if not sections:
        raise MissingArtifact("no evaluation reports found; run `cotrec eval` first")
    out = run.stage("report")
    text = "\n\n".join(sections) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    run.manifest(out, [run.root / "eval" / t / "report.json" for t in ("retriever", "ranker")], [out / "summary.txt"])


COMMANDS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "fit-reducer": cmd_fit_reducer,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML or JSON pipeline config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set retriever.epochs=20 (repeatable)")
    common.add_argument("--output-dir")
    common.add_argument("--cache-dir")
    common.add_argument("--mock", action=argparse.BooleanOptionalAction, default=None,
                        help="use the deterministic mock LLM backend")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="cotrec", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="filter and split the dataset")
    p = sub.add_parser("extract", parents=[common], help="offline LLM extraction")
    p.add_argument("stage", choices=["preferences", "descriptions", "perceptions"])
    p.add_argument("--pairs", help="JSON Lines of (user_id, item_id) pairs for the perceptions stage")
    sub.add_parser("fit-reducer", parents=[common], help="fit the text-to-embedding projection")
    p = sub.add_parser("train", parents=[common], help="train retriever checkpoints")
    p.add_argument("--cell", help="USER:ITEM, e.g. preference:description")
    p.add_argument("--grid", action="store_true", help="train all seven ablation cells")
    p = sub.add_parser("retrieve", parents=[common], help="write top-M candidates per user")
    p.add_argument("--cell", action="append", help="cell to retrieve with (default: ranker.retrievers)")
    p = sub.add_parser("eval", parents=[common], help="evaluate retriever or ranker")
    p.add_argument("--target", choices=["retriever", "ranker"], required=True)
    sub.add_parser("report", parents=[common], help="print collected evaluation tables")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, output_dir=args.output_dir, cache_dir=args.cache_dir,
                          mock=args.mock)
        run = Run(cfg, " ".join(["cotrec"] + (argv if argv is not None else sys.argv[1:])))
        COMMANDS[args.command](run, args)
    except (ConfigError, MissingArtifact, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GatewayError, ExtractionError) as exc:
        print(f"backend failure: {exc}\nCompleted calls are cached; rerun the same command to resume.", file=sys.stderr)
        return EXIT_BACKEND
    print(f"run directory: {run.root}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
