"""Trie-constrained decoding and two-stage inference.

A prefix tree over catalog identifiers restricts every decoding step to
continuations of valid identifiers; the allowed-token probabilities are
renormalized per step, so the complete-identifier probabilities form a proper
distribution (they sum to 1). Inference is two-stage: item prompt encodings
are precomputed offline into an `EncodingCache`, so the online cost per
request is encoding the user prompt only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lexindex import LexicalIdMap
from .model import FusedMemory, FusionModel
from .prompts import PromptBuilder
from .vocab import BOS_ID, EOS_ID, Vocabulary

CACHE_MAGIC = b"LXCACHE1"


class TrieError(ValueError):
    pass


class TrieNode:
    __slots__ = ("children", "item")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item: int | None = None  # set on the EOS-terminal node


class IdTrie:
    """Prefix tree over identifier component-token sequences, closed by EOS."""

    def __init__(self):
        self.root = TrieNode()
        self.n_items = 0

    @classmethod
    def build(cls, id_map: LexicalIdMap, vocab: Vocabulary) -> "IdTrie":
        trie = cls()
        for item in range(id_map.n_items):
            ids = id_map.token_ids(item, vocab)
            node = trie.root
            for tok in ids:
                node = node.children.setdefault(tok, TrieNode())
            term = node.children.setdefault(EOS_ID, TrieNode())
            if term.item is not None:
                raise TrieError(
                    f"duplicate identifier for items {term.item} and {item}: "
                    f"{id_map.display(item)}"
                )
            term.item = item
            trie.n_items += 1
        return trie

    def walk(self, tokens: list[int]) -> TrieNode | None:
        node = self.root
        for t in tokens:
            node = node.children.get(t)
            if node is None:
                return None
        return node

    def terminals(self) -> list[tuple[list[int], int]]:
        """All (token path incl. EOS, item) pairs, by path walk."""
        out: list[tuple[list[int], int]] = []
        stack: list[tuple[TrieNode, list[int]]] = [(self.root, [])]
        while stack:
            node, path = stack.pop()
            if node.item is not None:
                out.append((path, node.item))
            for tok in sorted(node.children, reverse=True):
                stack.append((node.children[tok], path + [tok]))
        return out


def constrained_step(logits: np.ndarray, node: TrieNode) -> dict[int, float]:
    """Log-probabilities over the node's allowed tokens, renormalized.

    Tokens outside the trie get probability zero by construction.
    """
    allowed = sorted(node.children)
    if not allowed:
        raise TrieError("trie node has no continuations (corrupt trie)")
    scores = logits[allowed].astype(np.float64)
    m = scores.max()
    logz = m + np.log(np.exp(scores - m).sum())
    return {tok: float(s - logz) for tok, s in zip(allowed, scores)}


@dataclass
class BeamHypothesis:
    tokens: list[int]
    node: TrieNode
    score: float  # cumulative log-probability, <= 0


@dataclass
class BeamResult:
    ranked: list[tuple[int, float]]  # (item, log score) best first
    shortfall: bool = False


def beam_search(
    model: FusionModel,
    memory: FusedMemory,
    trie: IdTrie,
    beam_size: int,
    top_n: int,
) -> BeamResult:
    """Length-synchronous constrained beam search over one fused memory.

    Scores are cumulative renormalized log-probabilities (no length penalty);
    ties break by ascending item index at the final ranking. With beam_size at
    least the catalog size nothing is ever pruned, so the ranking equals
    exhaustive scoring.
    """
    if not 1 <= top_n <= beam_size:
        raise ValueError("require 1 <= top_n <= beam_size")
    alive = [BeamHypothesis(tokens=[], node=trie.root, score=0.0)]
    finished: list[tuple[int, float]] = []
    max_steps = model.config.max_decode_len - 1
    for _ in range(max_steps + 1):
        if not alive:
            break
        prefixes = np.full((len(alive), 1 + len(alive[0].tokens)), BOS_ID, dtype=np.int64)
        for i, hyp in enumerate(alive):
            prefixes[i, 1:] = hyp.tokens
        logits = _last_logits(model, memory, prefixes)
        candidates: list[tuple[float, int, int]] = []
        for hi, (hyp, row) in enumerate(zip(alive, logits)):
            step = constrained_step(row, hyp.node)
            for tok, lp in step.items():
                candidates.append((hyp.score + lp, tok, hi))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        prev_alive = alive
        alive = []
        for score, tok, hi in candidates[:beam_size]:
            hyp = prev_alive[hi]
            child = hyp.node.children[tok]
            if tok == EOS_ID:
                finished.append((child.item, score))
            else:
                alive.append(BeamHypothesis(tokens=hyp.tokens + [tok], node=child, score=score))
    finished.sort(key=lambda f: (-f[1], f[0]))
    shortfall = len(finished) < top_n
    return BeamResult(ranked=finished[:top_n], shortfall=shortfall)


def _last_logits(model: FusionModel, memory: FusedMemory, prefixes: np.ndarray) -> np.ndarray:
    """(B, T) prefixes -> (B, vocab) next-token scores, sharing one memory."""
    B = prefixes.shape[0]
    if memory.x.data.shape[0] == 1 and B > 1:
        mem = FusedMemory(
            x=Tensor(np.broadcast_to(memory.x.data, (B,) + memory.x.data.shape[1:])),
            valid=np.broadcast_to(memory.valid, (B,) + memory.valid.shape[1:]),
            n_blocks=memory.n_blocks,
        )
    else:
        mem = memory
    with ag.no_grad():
        logits = model.decode(mem, prefixes, rng=None)
    return logits.data[:, -1, :]


def exhaustive_rank(model: FusionModel, memory: FusedMemory, trie: IdTrie) -> list[tuple[int, float]]:
    """Score every complete identifier by teacher forcing with the same
    per-step renormalization as the beam; the oracle for beam equivalence."""
    out: list[tuple[int, float]] = []
    for path, item in trie.terminals():
        node = trie.root
        score = 0.0
        prefix = [BOS_ID]
        for tok in path:
            logits = _last_logits(model, memory, np.array([prefix], dtype=np.int64))[0]
            score += constrained_step(logits, node)[tok]
            node = node.children[tok]
            prefix.append(tok)
        out.append((item, score))
    out.sort(key=lambda f: (-f[1], f[0]))
    return out


class EncodingCache:
    """Precomputed encoder outputs for item prompts, keyed by item index.

    Entries are only valid for the checkpoint whose fingerprint they carry.
    File layout (documented for memory-mapping): magic, little-endian uint32
    header length, canonical JSON header {dtype, shape [M, d], fingerprint,
    items: [...]}, then per item one H block (M*d) and one mask block (M)
    of the stated dtype, in `items` order, densely packed.
    """

    def __init__(self, fingerprint: str, max_len: int, d_model: int, dtype: str):
        self.fingerprint = fingerprint
        self.max_len = max_len
        self.d_model = d_model
        self.dtype = dtype
        self.blocks: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.misses = 0

    @classmethod
    def build(cls, model: FusionModel, builder: PromptBuilder,
              items: list[int] | None = None, batch_size: int = 64) -> "EncodingCache":
        cfg = model.config
        cache = cls(model.fingerprint(), cfg.max_len, cfg.d_model, cfg.dtype)
        items = list(range(builder.corpus.n_items)) if items is None else items
        from .vocab import PAD_ID

        for b0 in range(0, len(items), batch_size):
            chunk = items[b0 : b0 + batch_size]
            tokens = np.full((len(chunk), cfg.max_len), PAD_ID, dtype=np.int64)
            for i, item in enumerate(chunk):
                toks, _ = _item_tokens(builder, item)
                tokens[i, : len(toks)] = toks
            with ag.no_grad():
                h, valid = model.encode(tokens, rng=None)
            for i, item in enumerate(chunk):
                cache.blocks[item] = (h.data[i].copy(), valid[i].copy())
        return cache

    def get(self, item: int) -> tuple[np.ndarray, np.ndarray] | None:
        entry = self.blocks.get(item)
        if entry is None:
            self.misses += 1
        return entry

    def save(self, path: str) -> None:
        items = sorted(self.blocks)
        header = json.dumps(
            {
                "dtype": self.dtype,
                "shape": [self.max_len, self.d_model],
                "fingerprint": self.fingerprint,
                "items": items,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        dt = np.dtype(np.float32 if self.dtype == "float32" else np.float64).newbyteorder("<")
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for item in items:
                h, mask = self.blocks[item]
                f.write(np.ascontiguousarray(h).astype(dt).tobytes())
                f.write(mask.astype(dt).tobytes())

    @classmethod
    def load(cls, path: str) -> "EncodingCache":
        with open(path, "rb") as f:
            if f.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
                raise ValueError("not an encoding cache file")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            M, d = header["shape"]
            dt = np.dtype(np.float32 if header["dtype"] == "float32" else np.float64).newbyteorder("<")
            cache = cls(header["fingerprint"], M, d, header["dtype"])
            np_dt = np.float32 if header["dtype"] == "float32" else np.float64
            for item in header["items"]:
                h = np.frombuffer(f.read(M * d * dt.itemsize), dtype=dt).reshape(M, d).astype(np_dt)
                mask = np.frombuffer(f.read(M * dt.itemsize), dtype=dt).astype(bool)
                cache.blocks[item] = (h, mask)
        return cache


def _item_tokens(builder: PromptBuilder, item: int) -> tuple[list[int], bool]:
    from .prompts import tokenize_prompt

    return tokenize_prompt(builder.item_prompt_text(item), builder.vocab, builder.max_len)


@dataclass
class Inferencer:
    """Two-stage inference: online user-prompt encoding over cached item blocks."""

    model: FusionModel
    builder: PromptBuilder
    trie: IdTrie
    cache: EncodingCache | None = None
    online_tokens: int = 0  # tokens encoded online, accumulated across calls

    def __post_init__(self):
        if self.cache is not None and self.cache.fingerprint != self.model.fingerprint():
            raise ValueError("encoding cache fingerprint does not match the checkpoint")

    def _encode_online(self, token_lists: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        from .vocab import PAD_ID

        cfg = self.model.config
        tokens = np.full((len(token_lists), cfg.max_len), PAD_ID, dtype=np.int64)
        for i, toks in enumerate(token_lists):
            tokens[i, : len(toks)] = toks
        self.online_tokens += sum(len(t) for t in token_lists)
        with ag.no_grad():
            h, valid = self.model.encode(tokens, rng=None)
        return h.data, valid

    def memory_for(self, history: list[int]) -> FusedMemory:
        cfg = self.model.config
        bundle = self.builder.build(history)
        blocks: list[np.ndarray] = []
        valids: list[np.ndarray] = []
        user_h, user_valid = self._encode_online([bundle.user_tokens])
        blocks.append(user_h[0])
        valids.append(user_valid[0])
        for j, item in enumerate(bundle.item_indices):
            entry = self.cache.get(item) if self.cache is not None else None
            if entry is None:
                h, v = self._encode_online([bundle.item_tokens[j]])
                entry = (h[0], v[0])
            blocks.append(entry[0])
            valids.append(entry[1])
        n_blocks = len(blocks)
        dt = cfg.np_dtype()
        pos = self.model.params["item_pos"].data
        mem = np.empty((1, n_blocks * cfg.max_len, cfg.d_model), dtype=dt)
        for j in range(n_blocks):
            mem[0, j * cfg.max_len : (j + 1) * cfg.max_len] = blocks[j] + pos[j]
        valid = np.concatenate(valids)[None, :]
        return FusedMemory(x=Tensor(mem), valid=valid, n_blocks=n_blocks)

    def infer(self, history: list[int], beam_size: int = 50, top_n: int = 10) -> BeamResult:
        memory = self.memory_for(history)
        return beam_search(self.model, memory, self.trie, beam_size, top_n)


def format_recommendations(user_key: str, result: BeamResult, item_keys: list[str]) -> str:
    lines = [
        f"{user_key}\t{rank}\t{item_keys[item]}\t{score!r}"
        for rank, (item, score) in enumerate(result.ranked, start=1)
    ]
    return "\n".join(lines)
