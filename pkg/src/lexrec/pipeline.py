"""Stage orchestration: every stage reads persisted upstream artifacts and
writes its own, tagged with a config fingerprint so unchanged stages are
no-ops and incompatible artifacts never mix."""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass

from . import cfembed, corpus as corpus_mod, lexindex, synth, vocab as vocab_mod
from .config import PipelineConfig
from .decoding import EncodingCache, IdTrie, Inferencer, format_recommendations
from .evaluation import evaluate
from .model import FusionModel, ModelConfig
from .prompts import PromptBuilder
from .training import TrainConfig, curve_csv, make_instances, train

ARTIFACT_VERSION = 1


class MissingArtifact(RuntimeError):
    def __init__(self, stage: str, needed_by: str):
        super().__init__(f"stage '{needed_by}' needs artifacts from '{stage}'; run that stage first")
        self.stage = stage


@dataclass
class StageSummary:
    stage: str
    fingerprint: str
    skipped: bool
    detail: str = ""

    def line(self) -> str:
        status = "up-to-date" if self.skipped else "done"
        tail = f" ({self.detail})" if self.detail else ""
        return f"[{self.stage}] {status} fp={self.fingerprint[:12]}{tail}"


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(_canon(obj).encode()).hexdigest()


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _meta_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}.meta.json")


def _write_meta(out_dir: str, stage: str, fp: str, inputs: dict) -> None:
    doc = {"version": ARTIFACT_VERSION, "stage": stage, "fingerprint": fp, "inputs": inputs}
    with open(_meta_path(out_dir, stage), "w") as f:
        f.write(_canon(doc))


def _read_meta(out_dir: str, stage: str) -> dict | None:
    path = _meta_path(out_dir, stage)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != ARTIFACT_VERSION:
        return None
    return doc


def _upstream_fp(out_dir: str, stage: str, needed_by: str) -> str:
    meta = _read_meta(out_dir, stage)
    if meta is None:
        raise MissingArtifact(stage, needed_by)
    return meta["fingerprint"]


@contextmanager
def stage_lock(out_dir: str):
    """One stage at a time per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    fd = None
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        yield
    except FileExistsError:
        raise RuntimeError(f"output directory {out_dir} is locked by another run") from None
    finally:
        if fd is not None:
            os.close(fd)
            os.unlink(path)


# --------------------------------------------------------------------- loaders


def load_corpus(out_dir: str, needed_by: str = "?") -> corpus_mod.SplitCorpus:
    path = os.path.join(out_dir, "corpus.json")
    if not os.path.exists(path):
        raise MissingArtifact("ingest", needed_by)
    with open(path) as f:
        corp = corpus_mod.Corpus.from_snapshot(f.read())
    return corpus_mod.split_leave_one_out(corp)


def load_cf(out_dir: str, needed_by: str = "?") -> tuple[cfembed.CfEmbeddings, list[list[tuple[int, float]]]]:
    emb_path = os.path.join(out_dir, "cf_embeddings.bin")
    sim_path = os.path.join(out_dir, "similar.json")
    if not (os.path.exists(emb_path) and os.path.exists(sim_path)):
        raise MissingArtifact("cf", needed_by)
    emb = cfembed.import_embeddings(emb_path)
    with open(sim_path) as f:
        sim = [[(int(i), float(s)) for i, s in lst] for lst in json.load(f)]
    return emb, sim


def load_index(out_dir: str, needed_by: str = "?") -> tuple[vocab_mod.Vocabulary, lexindex.LexicalIdMap]:
    vpath = os.path.join(out_dir, "vocab.json")
    ipath = os.path.join(out_dir, "idmap.json")
    if not (os.path.exists(vpath) and os.path.exists(ipath)):
        raise MissingArtifact("index", needed_by)
    with open(vpath) as f:
        voc = vocab_mod.Vocabulary.from_json(f.read())
    with open(ipath) as f:
        id_map = lexindex.LexicalIdMap.deserialize(f.read())
    return voc, id_map


def load_model(out_dir: str, needed_by: str = "?") -> FusionModel:
    path = os.path.join(out_dir, "model.ckpt")
    if not os.path.exists(path):
        raise MissingArtifact("train", needed_by)
    model, _, _, _ = FusionModel.load(path)
    return model


def make_builder(cfg: PipelineConfig, out_dir: str, needed_by: str) -> PromptBuilder:
    split = load_corpus(out_dir, needed_by)
    voc, id_map = load_index(out_dir, needed_by)
    _, sim = load_cf(out_dir, needed_by)
    k = cfg.prompt.k_similar
    sim = [lst[:k] for lst in sim]
    return PromptBuilder(
        corpus=split.corpus,
        id_map=id_map,
        vocab=voc,
        similar_lists=sim,
        max_len=cfg.prompt.max_len,
        max_items=cfg.prompt.max_items,
    )


# ---------------------------------------------------------------------- stages


def run_synth_data(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    fp = fingerprint({"synth": cfg.synth.__dict__})
    meta = _read_meta(out_dir, "synth-data")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("synth-data", fp, skipped=True)
    sc = synth.SynthConfig(**cfg.synth.__dict__)
    ds = synth.generate(sc)
    raw = os.path.join(out_dir, "raw")
    os.makedirs(raw, exist_ok=True)
    with open(os.path.join(raw, "interactions.jsonl"), "w") as f:
        f.write(ds.interactions_jsonl)
    with open(os.path.join(raw, "items.jsonl"), "w") as f:
        f.write(ds.items_jsonl)
    _write_meta(out_dir, "synth-data", fp, {})
    return StageSummary("synth-data", fp, False, f"{ds.n_users} users, {ds.n_items} items")


def run_ingest(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    inter_path = cfg.data.interactions or os.path.join(out_dir, "raw", "interactions.jsonl")
    items_path = cfg.data.items or os.path.join(out_dir, "raw", "items.jsonl")
    if not (os.path.exists(inter_path) and os.path.exists(items_path)):
        raise MissingArtifact("synth-data (or configure data.interactions/items)", "ingest")
    fp = fingerprint(
        {
            "data": cfg.data.__dict__,
            "files": [_file_hash(inter_path), _file_hash(items_path)],
        }
    )
    meta = _read_meta(out_dir, "ingest")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("ingest", fp, skipped=True)
    with open(inter_path) as fi, open(items_path) as ft:
        corp = corpus_mod.ingest(fi, ft, cfg.data.format)
    corp = corpus_mod.apply_k_core(corp, cfg.data.k_core)
    with open(os.path.join(out_dir, "corpus.json"), "w") as f:
        f.write(corp.to_snapshot())
    _write_meta(out_dir, "ingest", fp, {})
    split = corpus_mod.split_leave_one_out(corp)
    return StageSummary(
        "ingest", fp, False,
        f"{corp.n_users} users, {corp.n_items} items, {corp.n_interactions} interactions, "
        f"{split.n_excluded} users excluded from eval",
    )


def run_cf(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    up = _upstream_fp(out_dir, "ingest", "cf")
    fp = fingerprint({"cf": cfg.cf.__dict__, "k_similar": cfg.prompt.k_similar, "up": up})
    meta = _read_meta(out_dir, "cf")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("cf", fp, skipped=True)
    split = load_corpus(out_dir, "cf")
    cc = cfembed.CfConfig(**cfg.cf.__dict__)
    emb = cfembed.train_cf(split, cc)
    cfembed.export_binary(emb, os.path.join(out_dir, "cf_embeddings.bin"))
    k = min(cfg.prompt.k_similar, max(0, emb.n_items - 1))
    sim = cfembed.all_top_k(emb, k, cfg.cf.similarity)
    with open(os.path.join(out_dir, "similar.json"), "w") as f:
        json.dump([[[i, s] for i, s in lst] for lst in sim], f)
    _write_meta(out_dir, "cf", fp, {"ingest": up})
    return StageSummary("cf", fp, False, f"kernel={cfembed.active_kernel()}, k={k}")


def run_index(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    up = _upstream_fp(out_dir, "ingest", "index")
    fp = fingerprint({"index": cfg.index.__dict__, "up": up})
    meta = _read_meta(out_dir, "index")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("index", fp, skipped=True)
    split = load_corpus(out_dir, "index")
    corp = split.corpus
    texts = [rec.text() for rec in corp.items]
    voc = vocab_mod.build_vocab(texts, cfg.index.min_freq, cfg.index.max_vocab)
    vectors = vocab_mod.tfidf_matrix(texts, voc)
    if cfg.index.source == "external_file":
        emb = cfembed.import_embeddings(
            cfg.index.external_path, expected_count=corp.n_items, expected_dims=cfg.index.e
        ).vectors
    else:
        emb = lexindex.project_tfidf(vectors, len(voc), cfg.index.e, cfg.index.seed)
    id_map, tree = lexindex.build_id_map(
        vectors, voc, emb, k=cfg.index.k, c=cfg.index.c, id_len=cfg.index.l, seed=cfg.index.seed
    )
    with open(os.path.join(out_dir, "vocab.json"), "w") as f:
        f.write(voc.to_json())
    with open(os.path.join(out_dir, "idmap.json"), "w") as f:
        f.write(id_map.serialize())
    with open(os.path.join(out_dir, "idmap.tsv"), "w") as f:
        f.write(id_map.export_tsv([rec.item_key for rec in corp.items]))
    with open(os.path.join(out_dir, "tree.txt"), "w") as f:
        f.write(tree.render() + "\n")
    _write_meta(out_dir, "index", fp, {"ingest": up})
    return StageSummary("index", fp, False, f"|V|={len(voc)}, report={id_map.report}")


def run_prompts(cfg: PipelineConfig, out_dir: str, n_dump: int = 20) -> StageSummary:
    ups = {s: _upstream_fp(out_dir, s, "prompts") for s in ("ingest", "cf", "index")}
    fp = fingerprint({"prompt": cfg.prompt.__dict__, "up": ups})
    meta = _read_meta(out_dir, "prompts")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("prompts", fp, skipped=True)
    builder = make_builder(cfg, out_dir, "prompts")
    split = load_corpus(out_dir, "prompts")
    lines = []
    for u in range(min(n_dump, split.corpus.n_users)):
        hist = split.history(u, "test")
        if not hist:
            continue
        lines.append(f"=== user {split.corpus.users[u]} ===")
        lines.append(builder.render_bundle(hist))
    with open(os.path.join(out_dir, "prompts.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    _write_meta(out_dir, "prompts", fp, ups)
    return StageSummary("prompts", fp, False, f"dumped {min(n_dump, split.corpus.n_users)} bundles")


def _model_config(cfg: PipelineConfig, voc_size: int, max_id_len: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=voc_size,
        d_model=cfg.model.d_model,
        n_layers=cfg.model.n_layers,
        n_heads=cfg.model.n_heads,
        ffn_mult=cfg.model.ffn_mult,
        max_len=cfg.prompt.max_len,
        max_items=cfg.prompt.max_items,
        max_decode_len=max_id_len + 2,
        dropout=cfg.model.dropout,
        dtype=cfg.model.dtype,
        seed=cfg.model.seed,
    )


def run_train(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    ups = {s: _upstream_fp(out_dir, s, "train") for s in ("ingest", "cf", "index")}
    fp = fingerprint(
        {"model": cfg.model.__dict__, "train": cfg.train.__dict__,
         "prompt": cfg.prompt.__dict__, "up": ups}
    )
    meta = _read_meta(out_dir, "train")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("train", fp, skipped=True)
    split = load_corpus(out_dir, "train")
    builder = make_builder(cfg, out_dir, "train")
    voc, id_map = load_index(out_dir, "train")
    max_id_len = max(len(c) for c in id_map.components)
    mconfig = _model_config(cfg, len(voc), max_id_len)
    model = FusionModel(mconfig)
    instances = make_instances(split, builder, id_map, voc, cfg.train.max_instances_per_user)
    tconfig = TrainConfig(
        lr=cfg.train.lr,
        warmup_ratio=cfg.train.warmup_ratio,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        seed=cfg.train.seed,
        stop_loss=cfg.train.stop_loss,
    )
    state = train(model, instances, tconfig)
    model.save(os.path.join(out_dir, "model.ckpt"), step=state.step)
    with open(os.path.join(out_dir, "loss.csv"), "w") as f:
        f.write(curve_csv(state))
    _write_meta(out_dir, "train", fp, ups)
    last = state.curve[-1][1] if state.curve else float("nan")
    return StageSummary("train", fp, False,
                        f"{len(instances)} instances, {state.step} steps, last loss {last:.4f}")


def _make_inferencer(cfg: PipelineConfig, out_dir: str, needed_by: str) -> tuple[Inferencer, IdTrie]:
    model = load_model(out_dir, needed_by)
    builder = make_builder(cfg, out_dir, needed_by)
    voc, id_map = load_index(out_dir, needed_by)
    trie = IdTrie.build(id_map, voc)
    cache_path = os.path.join(out_dir, "encoding.cache")
    if os.path.exists(cache_path):
        cache = EncodingCache.load(cache_path)
        if cache.fingerprint != model.fingerprint():
            cache = EncodingCache.build(model, builder)
            cache.save(cache_path)
    else:
        cache = EncodingCache.build(model, builder)
        cache.save(cache_path)
    return Inferencer(model=model, builder=builder, trie=trie, cache=cache), trie


def run_evaluate(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    ups = {s: _upstream_fp(out_dir, s, "evaluate") for s in ("ingest", "cf", "index", "train")}
    fp = fingerprint({"decode": {**cfg.decode.__dict__}, "up": ups})
    meta = _read_meta(out_dir, "evaluate")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("evaluate", fp, skipped=True)
    split = load_corpus(out_dir, "evaluate")
    inferencer, _ = _make_inferencer(cfg, out_dir, "evaluate")
    outcome = evaluate(
        inferencer, split, cutoffs=tuple(cfg.decode.cutoffs),
        beam_size=cfg.decode.beam, config_fingerprint=fp,
    )
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(outcome.report.to_json())
    with open(os.path.join(out_dir, "report.csv"), "w") as f:
        f.write(outcome.report.to_csv())
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(outcome.report.to_table() + "\n")
    _write_meta(out_dir, "evaluate", fp, ups)
    allr = outcome.report.recall.get("all", {})
    detail = " ".join(f"R@{k}={allr[k]:.4f}" for k in sorted(allr))
    return StageSummary("evaluate", fp, False, detail)


def run_recommend(cfg: PipelineConfig, out_dir: str) -> StageSummary:
    ups = {s: _upstream_fp(out_dir, s, "recommend") for s in ("ingest", "cf", "index", "train")}
    fp = fingerprint({"decode": {**cfg.decode.__dict__}, "up": ups})
    meta = _read_meta(out_dir, "recommend")
    if meta and meta["fingerprint"] == fp:
        return StageSummary("recommend", fp, skipped=True)
    split = load_corpus(out_dir, "recommend")
    inferencer, _ = _make_inferencer(cfg, out_dir, "recommend")
    item_keys = [rec.item_key for rec in split.corpus.items]
    lines = []
    for u in split.eval_users():
        res = inferencer.infer(split.history(u, "test"), cfg.decode.beam, cfg.decode.top_n)
        lines.append(format_recommendations(split.corpus.users[u], res, item_keys))
    with open(os.path.join(out_dir, "recommendations.tsv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    _write_meta(out_dir, "recommend", fp, ups)
    return StageSummary("recommend", fp, False, f"{len(lines)} users")


STAGES = {
    "synth-data": run_synth_data,
    "ingest": run_ingest,
    "cf": run_cf,
    "index": run_index,
    "prompts": run_prompts,
    "train": run_train,
    "evaluate": run_evaluate,
    "recommend": run_recommend,
}


def run_stage(stage: str, cfg: PipelineConfig, out_dir: str) -> StageSummary:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    with stage_lock(out_dir):
        return STAGES[stage](cfg, out_dir)
