"""Word-level vocabulary, tokenizer and TF-IDF vectors over item text.

Identifiers produced downstream are sequences of ordinary vocabulary tokens,
so the same tokenizer serves item text, prompts and identifier components.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
DIGIT_TOKENS = tuple(str(d) for d in range(10))
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK) + DIGIT_TOKENS

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

# Lowercase alphanumeric runs; special-token literals survive verbatim so that
# detokenize -> tokenize is the identity on token ids.
_TOKEN_RE = re.compile(r"<pad>|<bos>|<eos>|<unk>|[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    token_to_id: dict[str, int]
    df: np.ndarray  # per-token document frequency over item texts
    n_docs: int

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    def to_json(self) -> str:
        doc = {
            "tokens": self.tokens,
            "df": self.df.tolist(),
            "n_docs": self.n_docs,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        tokens = list(doc["tokens"])
        return cls(
            tokens=tokens,
            token_to_id={t: i for i, t in enumerate(tokens)},
            df=np.asarray(doc["df"], dtype=np.int64),
            n_docs=int(doc["n_docs"]),
        )


def build_vocab(texts: list[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Corpus-derived vocabulary: specials first, then tokens ordered by
    (frequency desc, lexicographic). `max_size` caps the total size including
    specials; specials are always kept.
    """
    tf: dict[str, int] = {}
    df: dict[str, int] = {}
    for text in texts:
        toks = tokenize(text)
        for t in toks:
            tf[t] = tf.get(t, 0) + 1
        for t in set(toks):
            df[t] = df.get(t, 0) + 1

    specials = set(SPECIAL_TOKENS)
    candidates = [t for t, c in tf.items() if c >= min_freq and t not in specials]
    candidates.sort(key=lambda t: (-tf[t], t))
    if max_size is not None:
        budget = max(0, max_size - len(SPECIAL_TOKENS))
        candidates = candidates[:budget]

    tokens = list(SPECIAL_TOKENS) + candidates
    df_arr = np.zeros(len(tokens), dtype=np.int64)
    for i, t in enumerate(tokens):
        df_arr[i] = df.get(t, 0)
    return Vocabulary(
        tokens=tokens,
        token_to_id={t: i for i, t in enumerate(tokens)},
        df=df_arr,
        n_docs=len(texts),
    )


@dataclass(frozen=True)
class SparseVector:
    """L2-normalized sparse vector with strictly increasing indices.

    The zero vector (empty text) is represented with empty arrays.
    """

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        assert self.indices.ndim == 1 and self.values.ndim == 1
        assert len(self.indices) == len(self.values)
        if len(self.indices) > 1:
            assert np.all(np.diff(self.indices) > 0), "indices must be strictly increasing"

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values**2)))

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size, dtype=np.float64)
        out[self.indices] = self.values
        return out


def tfidf_vector(text: str, vocab: Vocabulary) -> SparseVector:
    """weight(t) = tf(t) * (ln((1+N)/(1+df(t))) + 1), then L2-normalized.

    Tokens outside the vocabulary are ignored. Empty text yields the zero
    vector.
    """
    counts: dict[int, int] = {}
    for tok in tokenize(text):
        tid = vocab.token_to_id.get(tok)
        if tid is not None:
            counts[tid] = counts.get(tid, 0) + 1
    if not counts:
        return SparseVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    idx = np.array(sorted(counts), dtype=np.int64)
    n = vocab.n_docs
    w = np.array(
        [counts[i] * (math.log((1 + n) / (1 + int(vocab.df[i]))) + 1.0) for i in idx],
        dtype=np.float64,
    )
    w /= np.sqrt(np.sum(w**2))
    return SparseVector(idx, w)


def tfidf_matrix(texts: list[str], vocab: Vocabulary) -> list[SparseVector]:
    return [tfidf_vector(t, vocab) for t in texts]
