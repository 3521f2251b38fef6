"""Pipeline configuration: one YAML/JSON file, overridable from the command line.

Precedence, lowest to highest: built-in defaults, the config file, ``--set
section.key=value`` overrides, dedicated flags such as ``--output-dir``.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .retriever import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    interactions: str = ""
    items: str = ""
    k_core: int = 5
    name: str = "dataset"


@dataclass
class GatewayConfig:
    mock: bool = True
    mock_seed: int = 0
    mock_dim: int = 128
    endpoint: str | None = None
    model: str | None = None
    embed_model: str | None = None
    api_key_env: str = "COTREC_API_KEY"
    cache_dir: str = "cache"
    max_in_flight: int = 8
    max_attempts: int = 5


@dataclass
class ExtractionConfig:
    batch_size: int = 10
    overlap: int = 2
    use_prior: bool = False
    prompts: str | None = None
    max_tokens: int = 256
    min_keywords: int = 3
    max_keywords: int = 10


@dataclass
class RetrieverConfig:
    dim: int = 64
    blocks: int = 2
    heads: int = 1
    max_len: int = 50
    lr: float = 1e-3
    epochs: int = 200
    negatives: int = 1
    batch_size: int = 128
    dropout: float = 0.0
    eval_every: int = 1

    def model_config(self, seed: int, use_user_slot: bool) -> ModelConfig:
        return ModelConfig(seed=seed, use_user_slot=use_user_slot, **dataclasses.asdict(self))


@dataclass
class RankerConfig:
    m: int = 10
    history: int = 10
    variants: list[str] = field(default_factory=lambda: ["plain", "enriched"])
    # retriever cells whose slates are ranked: CRM and CRM++ in the ablation
    retrievers: list[str] = field(default_factory=lambda: ["none:random", "preference:description"])


@dataclass
class EvalConfig:
    k: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    bias_users: int = 100


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    reducer_dim: int | None = None
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def validate(self) -> None:
        if not self.eval.seeds:
            raise ConfigError("eval.seeds must list at least one explicit seed")
        if self.reducer_dim is not None and self.reducer_dim != self.retriever.dim:
            raise ConfigError(f"reducer_dim {self.reducer_dim} must equal retriever.dim {self.retriever.dim}")
        if not 0 <= self.extraction.overlap < self.extraction.batch_size:
            raise ConfigError("extraction.overlap must satisfy 0 <= overlap < batch_size")
        if not 1 <= self.ranker.m <= 26:
            raise ConfigError("ranker.m must be between 1 and 26")
        for v in self.ranker.variants:
            if v not in ("plain", "enriched"):
                raise ConfigError(f"unknown ranker variant {v!r}")
        if not self.gateway.mock and not self.gateway.endpoint:
            raise ConfigError("gateway.endpoint is required when gateway.mock is false")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Hash of everything that can change results (paths of caches and outputs excluded)."""
        obj = self.to_json()
        obj.pop("output_dir")
        for k in ("cache_dir", "max_in_flight", "max_attempts", "api_key_env"):
            obj["gateway"].pop(k)
        for k in ("interactions", "items"):
            p = Path(obj["data"][k])
            obj["data"][k] = hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else ""
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"run-{self.content_hash()[:12]}"


def _merge(dc, values: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(dc)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        cur = getattr(dc, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _merge(cur, val, f"{where}{key}.")
        else:
            setattr(dc, key, val)


def _set_path(values: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = values
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None, **flags) -> PipelineConfig:
    cfg = PipelineConfig()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values = yaml.safe_load(path.read_text()) or {}
        _merge(cfg, values, "")
        base = path.resolve().parent
    extra: dict = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_path(extra, key.strip(), raw)
    _merge(cfg, extra, "")
    for key, val in flags.items():
        if val is None:
            continue
        if key == "output_dir":
            cfg.output_dir = val
        elif key == "cache_dir":
            cfg.gateway.cache_dir = val
        elif key == "mock":
            cfg.gateway.mock = val
        else:
            raise ConfigError(f"unknown flag {key}")

    def resolve(p: str | None) -> str | None:
        if not p:
            return p
        q = Path(p)
        return os.path.normpath(q if q.is_absolute() else base / q)

    cfg.data.interactions = resolve(cfg.data.interactions)
    cfg.data.items = resolve(cfg.data.items)
    cfg.gateway.cache_dir = resolve(cfg.gateway.cache_dir)
    cfg.extraction.prompts = resolve(cfg.extraction.prompts)
    cfg.output_dir = resolve(cfg.output_dir)
    if cfg.extraction.prompts and not Path(cfg.extraction.prompts).is_file():
        raise ConfigError(f"prompts file {cfg.extraction.prompts} not found")
    cfg.validate()
    return cfg
