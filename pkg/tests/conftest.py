import numpy as np
import pytest

from lexrec import cfembed, corpus as C, lexindex, vocab as V
from lexrec.prompts import PromptBuilder
from lexrec.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two-block planted corpus with successor structure, ~60 users."""
    ds = generate(
        SynthConfig(
            n_blocks=2, items_per_block=25, n_users=60,
            seq_len_min=6, seq_len_max=10, seed=7,
        )
    )
    corp = C.ingest(ds.interactions_jsonl.splitlines(), ds.items_jsonl.splitlines())
    corp = C.apply_k_core(corp, 3)
    return C.split_leave_one_out(corp)


@pytest.fixture(scope="session")
def tiny_index(tiny_dataset):
    corp = tiny_dataset.corpus
    texts = [r.text() for r in corp.items]
    voc = V.build_vocab(texts)
    vectors = V.tfidf_matrix(texts, voc)
    emb = lexindex.project_tfidf(vectors, len(voc), 32, seed=1)
    id_map, tree = lexindex.build_id_map(vectors, voc, emb, k=4, c=8, id_len=3, seed=1)
    return voc, vectors, id_map, tree


@pytest.fixture(scope="session")
def tiny_builder(tiny_dataset, tiny_index):
    voc, _, id_map, _ = tiny_index
    emb = cfembed.train_cf(
        tiny_dataset, cfembed.CfConfig(dims=16, window=2, negatives=5, epochs=3, seed=0)
    )
    sim = cfembed.all_top_k(emb, 4)
    return PromptBuilder(
        corpus=tiny_dataset.corpus, id_map=id_map, vocab=voc,
        similar_lists=sim, max_len=24, max_items=6,
    )


def make_native_lines(interactions, items):
    """interactions: (user, item, ts) triples; items: (key, [(k, v), ...])."""
    import json

    ilines = [
        json.dumps({"user": u, "item": i, "ts": t}) for u, i, t in interactions
    ]
    tlines = [
        json.dumps({"item": k, "attrs": [{"key": a, "value": b} for a, b in attrs]})
        for k, attrs in items
    ]
    return ilines, tlines
