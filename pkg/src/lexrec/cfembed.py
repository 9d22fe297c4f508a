"""Collaborative-filtering item embeddings and similar-item retrieval.

A sliding-window skip-gram trainer with negative sampling learns item vectors
from training sequences; any sequence-aware recommender can substitute via
`import_embeddings`. The SGD inner loop runs through a compiled kernel when
the extension built, else through the numpy fallback (see `active_kernel`).
Force the fallback with LEXREC_PURE_PYTHON=1.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _sgns_np
from .corpus import SplitCorpus

try:
    from . import _sgns as _sgns_fast
except ImportError:
    _sgns_fast = None

_EMB_MAGIC = b"LXEMB01\n"


def active_kernel() -> str:
    if _sgns_fast is not None and not os.environ.get("LEXREC_PURE_PYTHON"):
        return "cython"
    return "numpy"


def _kernel():
    return _sgns_fast.train_pairs if active_kernel() == "cython" else _sgns_np.train_pairs


@dataclass
class CfConfig:
    dims: int = 64
    window: int = 2
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    seed: int = 0
    similarity: str = "dot"  # or "cosine"

    def fingerprint(self) -> dict:
        return {
            "dims": self.dims,
            "window": self.window,
            "negatives": self.negatives,
            "epochs": self.epochs,
            "lr": self.lr,
            "seed": self.seed,
        }


@dataclass
class CfEmbeddings:
    vectors: np.ndarray  # (n_items, dims) float64
    config: dict = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return self.vectors.shape[0]

    @property
    def dims(self) -> int:
        return self.vectors.shape[1]


def _window_pairs(sequences: list[list[int]], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers: list[int] = []
    contexts: list[int] = []
    for seq in sequences:
        n = len(seq)
        for t in range(n):
            lo = max(0, t - window)
            hi = min(n, t + window + 1)
            for j in range(lo, hi):
                if j == t:
                    continue
                centers.append(seq[t])
                contexts.append(seq[j])
    return (
        np.asarray(centers, dtype=np.int64),
        np.asarray(contexts, dtype=np.int64),
    )


def _noise_cdf(sequences: list[list[int]], n_items: int) -> np.ndarray:
    counts = np.zeros(n_items, dtype=np.float64)
    for seq in sequences:
        for it in seq:
            counts[it] += 1.0
    weights = counts**0.75
    total = weights.sum()
    if total == 0:
        weights = np.ones(n_items, dtype=np.float64)
        total = float(n_items)
    return np.cumsum(weights / total)


def train_cf(split: SplitCorpus, config: CfConfig) -> CfEmbeddings:
    """Train item embeddings on training sequences only (never valid/test targets).

    Deterministic for a fixed seed: initialization, negative draws and the
    update schedule all derive from one seeded generator.
    """
    n_items = split.corpus.n_items
    sequences = split.train
    centers, contexts = _window_pairs(sequences, config.window)
    if len(centers) == 0:
        raise ValueError("no training pairs: corpus has no usable training sequences")

    rng = np.random.default_rng(config.seed)
    w_in = (rng.random((n_items, config.dims)) - 0.5) / config.dims
    w_out = np.zeros((n_items, config.dims), dtype=np.float64)

    cdf = _noise_cdf(sequences, n_items)
    kernel = _kernel()
    n_pairs = len(centers)
    total = n_pairs * config.epochs
    min_lr = config.lr * 1e-4
    losses: list[float] = []
    for epoch in range(config.epochs):
        if config.negatives > 0:
            u = rng.random((n_pairs, config.negatives))
            negs = np.searchsorted(cdf, u).astype(np.int64)
        else:
            negs = np.zeros((n_pairs, 0), dtype=np.int64)
        loss = kernel(
            w_in, w_out, centers, contexts, np.ascontiguousarray(negs),
            config.lr, min_lr, epoch * n_pairs, total,
        )
        losses.append(loss / n_pairs)

    if not np.all(np.isfinite(w_in)):
        raise FloatingPointError("non-finite embeddings after training")
    return CfEmbeddings(vectors=w_in, config=config.fingerprint(), epoch_losses=losses)


def top_k_similar(
    emb: CfEmbeddings, item: int, k: int, similarity: str = "dot"
) -> list[tuple[int, float]]:
    """The k most similar items to `item`, excluding itself.

    Ordered by score descending, ties broken by ascending item index.
    """
    n = emb.n_items
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    vecs = emb.vectors
    if similarity == "cosine":
        norms = np.linalg.norm(vecs, axis=1)
        norms[norms == 0] = 1.0
        scores = (vecs @ vecs[item]) / (norms * (norms[item] if norms[item] else 1.0))
    elif similarity == "dot":
        scores = vecs @ vecs[item]
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    order = np.lexsort((np.arange(n), -scores))
    out: list[tuple[int, float]] = []
    for idx in order:
        if idx == item:
            continue
        out.append((int(idx), float(scores[idx])))
        if len(out) == k:
            break
    return out


def all_top_k(emb: CfEmbeddings, k: int, similarity: str = "dot") -> list[list[tuple[int, float]]]:
    if k == 0:
        return [[] for _ in range(emb.n_items)]
    k = min(k, emb.n_items - 1)
    return [top_k_similar(emb, i, k, similarity) for i in range(emb.n_items)]


def export_text(emb: CfEmbeddings, path: str) -> None:
    """Header line `count dims`, then one row of decimal floats per item.

    repr() keeps full float64 precision, so text round-trips exactly.
    """
    with open(path, "w") as f:
        f.write(f"{emb.n_items} {emb.dims}\n")
        for row in emb.vectors:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def export_binary(emb: CfEmbeddings, path: str) -> None:
    """Compact variant: magic, json header, little-endian float32 rows."""
    header = json.dumps(
        {"count": emb.n_items, "dims": emb.dims, "dtype": "<f4"},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(emb.vectors.astype("<f4").tobytes())


def import_embeddings(
    path: str, expected_count: int | None = None, expected_dims: int | None = None
) -> CfEmbeddings:
    """Load embeddings exported by export_text/export_binary (format sniffed)."""
    with open(path, "rb") as f:
        magic = f.read(len(_EMB_MAGIC))
        if magic == _EMB_MAGIC:
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            count, dims = header["count"], header["dims"]
            data = np.frombuffer(f.read(), dtype=header["dtype"]).astype(np.float64)
            if data.size != count * dims:
                raise ValueError(
                    f"embedding payload mismatch: expected {count * dims} floats, got {data.size}"
                )
            vectors = data.reshape(count, dims)
        else:
            f.seek(0)
            lines = f.read().decode().splitlines()
            count, dims = map(int, lines[0].split())
            if len(lines) - 1 < count:
                raise ValueError(f"expected {count} embedding rows, got {len(lines) - 1}")
            vectors = np.empty((count, dims), dtype=np.float64)
            for i in range(count):
                row = lines[1 + i].split()
                if len(row) != dims:
                    raise ValueError(f"row {i}: expected {dims} values, got {len(row)}")
                vectors[i] = [float(v) for v in row]
    if expected_count is not None and count != expected_count:
        raise ValueError(f"embedding count mismatch: expected {expected_count}, got {count}")
    if expected_dims is not None and dims != expected_dims:
        raise ValueError(f"embedding dims mismatch: expected {expected_dims}, got {dims}")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("imported embeddings contain non-finite values")
    return CfEmbeddings(vectors=vectors, config={"source": os.path.basename(path)})
