"""Pipeline configuration: one validated document drives every stage.

Defaults follow the tuned values for the reference product-review benchmark
(learning rate 1e-3, warmup ratio 0.05, prompt cap 128 tokens, batch 128,
beam 50, history cap 20, identifier length 7 with 128-way clustering). Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    interactions: str = ""
    items: str = ""
    format: str = "native"  # or "amazon"
    k_core: int = 5


@dataclass
class CfSection:
    dims: int = 64
    window: int = 2
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    seed: int = 0
    similarity: str = "dot"


@dataclass
class IndexSection:
    k: int = 128  # clusters per split
    c: int = 128  # stop splitting at or below this size
    l: int = 7  # identifier components
    e: int = 256  # item-embedding dims for clustering
    seed: int = 0
    min_freq: int = 1
    max_vocab: int | None = None
    source: str = "tfidf_projection"  # or "external_file"
    external_path: str = ""


@dataclass
class PromptSection:
    max_len: int = 128  # M, tokens per prompt
    max_items: int = 20  # L, history slots
    k_similar: int = 10


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    dtype: str = "float32"
    seed: int = 0


@dataclass
class TrainSection:
    lr: float = 0.001
    warmup_ratio: float = 0.05
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    max_instances_per_user: int | None = None
    stop_loss: float | None = None


@dataclass
class DecodeSection:
    beam: int = 50
    cutoffs: list[int] = field(default_factory=lambda: [5, 10, 20])
    top_n: int = 20


@dataclass
class SynthSection:
    n_blocks: int = 2
    items_per_block: int = 25
    n_users: int = 500
    seq_len_min: int = 8
    seq_len_max: int = 16
    within_block_prob: float = 0.9
    successor_prob: float = 0.6
    successor_ring: int = 5
    seed: int = 7


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    cf: CfSection = field(default_factory=CfSection)
    index: IndexSection = field(default_factory=IndexSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    synth: SynthSection = field(default_factory=SynthSection)
    out_dir: str = "out"

    def validate(self) -> None:
        checks = [
            (self.data.k_core >= 1, "data.k_core", "k_core >= 1"),
            (self.data.format in ("native", "amazon"), "data.format", "format in {native, amazon}"),
            (self.cf.dims >= 1, "cf.dims", "dims >= 1"),
            (self.cf.window >= 1, "cf.window", "window >= 1"),
            (self.cf.negatives >= 0, "cf.negatives", "negatives >= 0"),
            (self.cf.epochs >= 1, "cf.epochs", "epochs >= 1"),
            (self.cf.lr > 0, "cf.lr", "lr > 0"),
            (self.cf.similarity in ("dot", "cosine"), "cf.similarity", "similarity in {dot, cosine}"),
            (self.index.k >= 2, "index.k", "k >= 2"),
            (self.index.c >= 1, "index.c", "c >= 1"),
            (self.index.l >= 1, "index.l", "l >= 1"),
            (self.index.e >= 1, "index.e", "e >= 1"),
            (self.index.min_freq >= 1, "index.min_freq", "min_freq >= 1"),
            (self.index.source in ("tfidf_projection", "external_file"),
             "index.source", "source in {tfidf_projection, external_file}"),
            (self.prompt.max_len >= self.index.l + 2, "prompt.max_len", "max_len >= l + 2"),
            (self.prompt.max_items >= 1, "prompt.max_items", "max_items >= 1"),
            (self.prompt.k_similar >= 0, "prompt.k_similar", "k_similar >= 0"),
            (self.model.d_model >= 1, "model.d_model", "d_model >= 1"),
            (self.model.d_model % self.model.n_heads == 0,
             "model.n_heads", "d_model divisible by n_heads"),
            (self.model.ffn_mult >= 1, "model.ffn_mult", "ffn_mult >= 1"),
            (0.0 <= self.model.dropout < 1.0, "model.dropout", "0 <= dropout < 1"),
            (self.model.dtype in ("float32", "float64"), "model.dtype", "dtype in {float32, float64}"),
            (self.train.lr > 0, "train.lr", "lr > 0"),
            (0.0 <= self.train.warmup_ratio <= 1.0, "train.warmup_ratio", "0 <= warmup_ratio <= 1"),
            (self.train.batch_size >= 1, "train.batch_size", "batch_size >= 1"),
            (self.train.epochs >= 1, "train.epochs", "epochs >= 1"),
            (self.decode.beam >= 1, "decode.beam", "beam >= 1"),
            (len(self.decode.cutoffs) > 0 and all(k >= 1 for k in self.decode.cutoffs),
             "decode.cutoffs", "cutoffs non-empty, all >= 1"),
            (self.decode.top_n >= 1, "decode.top_n", "top_n >= 1"),
        ]
        for ok, key, constraint in checks:
            if not ok:
                raise ConfigError(f"config key {key}: violates {constraint}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTIONS = {
    "data": DataSection,
    "cf": CfSection,
    "index": IndexSection,
    "prompt": PromptSection,
    "model": ModelSection,
    "train": TrainSection,
    "decode": DecodeSection,
    "synth": SynthSection,
}


def config_from_dict(doc: dict) -> PipelineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    cfg = PipelineConfig()
    for key, value in doc.items():
        if key == "out_dir":
            cfg.out_dir = str(value)
            continue
        section_cls = _SECTIONS.get(key)
        if section_cls is None:
            raise ConfigError(f"unknown config key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key!r} must be a mapping")
        section = getattr(cfg, key)
        known = set(section.__dataclass_fields__)
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"unknown config key {key}.{k}")
            setattr(section, k, v)
    cfg.validate()
    return cfg


def load_config(path: str) -> PipelineConfig:
    with open(path) as f:
        doc = yaml.safe_load(f)
    return config_from_dict(doc)
