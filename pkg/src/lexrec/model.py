"""Late-fusion encoder-decoder over prompt bundles.

Every prompt in a bundle is encoded independently (so item encodings can be
precomputed and cached); the decoder sees the concatenation of all encoded
blocks, each block offset by a learned per-slot position embedding (slot 0 =
user prompt, slots 1..L = item prompts newest-first), as its cross-attention
memory. Without the position table the decoder is provably blind to item
order; the table is what breaks that symmetry.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .vocab import PAD_ID

_NEG = -1e9  # additive mask value; exp() underflows to exactly 0.0 in both dtypes

CHECKPOINT_MAGIC = b"LXCKPT01"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 128  # tokens per prompt (M)
    max_items: int = 20  # history slots (L)
    max_decode_len: int = 16
    dropout: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "ffn_mult",
                     "max_len", "max_items", "max_decode_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_mult": self.ffn_mult,
            "max_len": self.max_len,
            "max_items": self.max_items,
            "max_decode_len": self.max_decode_len,
            "dropout": self.dropout,
            "dtype": self.dtype,
            "seed": self.seed,
        }


@dataclass
class FusedMemory:
    """Cross-attention memory: one row block per prompt, invalid rows masked."""

    x: Tensor  # (B, n_blocks * M, d)
    valid: np.ndarray  # (B, n_blocks * M) bool
    n_blocks: int


class FusionModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params()

    # ------------------------------------------------------------------ setup
    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(self.config.np_dtype()), requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, f, v = cfg.d_model, cfg.d_model * cfg.ffn_mult, cfg.vocab_size

        def normal(*shape):
            return rng.standard_normal(shape) * 0.02

        self._param("embed", normal(v, d))
        self._param("enc_pos", normal(cfg.max_len, d))
        self._param("dec_pos", normal(cfg.max_decode_len, d))
        self._param("item_pos", normal(cfg.max_items + 1, d))
        for side, n in (("enc", cfg.n_layers), ("dec", cfg.n_layers)):
            for i in range(n):
                p = f"{side}.{i}"
                for blk in ("self",) if side == "enc" else ("self", "cross"):
                    for w in ("wq", "wk", "wv", "wo"):
                        self._param(f"{p}.{blk}.{w}", normal(d, d))
                n_ln = 2 if side == "enc" else 3
                for j in range(1, n_ln + 1):
                    self._param(f"{p}.ln{j}.g", np.ones(d))
                    self._param(f"{p}.ln{j}.b", np.zeros(d))
                self._param(f"{p}.ffn.w1", normal(d, f))
                self._param(f"{p}.ffn.b1", np.zeros(f))
                self._param(f"{p}.ffn.w2", normal(f, d))
                self._param(f"{p}.ffn.b2", np.zeros(d))
            self._param(f"{side}.final_ln.g", np.ones(d))
            self._param(f"{side}.final_ln.b", np.zeros(d))
        self._param("lm_head", normal(d, v))

    # -------------------------------------------------------------- building blocks
    def _heads_split(self, t: Tensor, B: int, T: int) -> Tensor:
        cfg = self.config
        t = ag.reshape(t, (B, T, cfg.n_heads, cfg.d_model // cfg.n_heads))
        return ag.transpose(t, (0, 2, 1, 3))

    def _attention(
        self,
        q_in: Tensor,
        kv_in: Tensor,
        prefix: str,
        mask: np.ndarray,
        rng: np.random.Generator | None,
    ) -> Tensor:
        cfg = self.config
        B, Tq = q_in.shape[0], q_in.shape[1]
        Tk = kv_in.shape[1]
        dh = cfg.d_model // cfg.n_heads
        q = self._heads_split(ag.matmul(q_in, self.params[f"{prefix}.wq"]), B, Tq)
        k = self._heads_split(ag.matmul(kv_in, self.params[f"{prefix}.wk"]), B, Tk)
        v = self._heads_split(ag.matmul(kv_in, self.params[f"{prefix}.wv"]), B, Tk)
        scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        scores = scores + Tensor(mask)
        attn = ag.softmax(scores, axis=-1)
        attn = ag.dropout(attn, cfg.dropout, rng)
        out = ag.matmul(attn, v)
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (B, Tq, cfg.d_model))
        return ag.matmul(out, self.params[f"{prefix}.wo"])

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        h = ag.relu(ag.matmul(x, self.params[f"{prefix}.w1"]) + self.params[f"{prefix}.b1"])
        h = ag.dropout(h, self.config.dropout, rng)
        return ag.matmul(h, self.params[f"{prefix}.w2"]) + self.params[f"{prefix}.b2"]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ag.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _key_mask(self, valid: np.ndarray) -> np.ndarray:
        # (B, Tk) bool -> additive (B, 1, 1, Tk)
        m = np.where(valid, 0.0, _NEG).astype(self.config.np_dtype())
        return m[:, None, None, :]

    # ------------------------------------------------------------------ encoder
    def encode(self, tokens: np.ndarray, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, np.ndarray]:
        """Encode a batch of prompts independently: (B, T) ids -> (B, T, d).

        Each row of the batch is a standalone prompt; nothing mixes across
        rows, which is what makes per-item precomputation sound.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        B, T = tokens.shape
        if T > cfg.max_len:
            raise ValueError(f"prompt length {T} exceeds max_len {cfg.max_len}")
        valid = tokens != PAD_ID
        x = ag.embedding(self.params["embed"], tokens)
        x = x + ag.embedding(self.params["enc_pos"], np.arange(T))
        x = ag.dropout(x, cfg.dropout, rng)
        mask = self._key_mask(valid)
        for i in range(cfg.n_layers):
            p = f"enc.{i}"
            ln = self._ln(x, f"{p}.ln1")
            a = self._attention(ln, ln, f"{p}.self", mask, rng)
            x = x + ag.dropout(a, cfg.dropout, rng)
            h = self._ffn(self._ln(x, f"{p}.ln2"), f"{p}.ffn", rng)
            x = x + ag.dropout(h, cfg.dropout, rng)
        return self._ln(x, "enc.final_ln"), valid

    # ------------------------------------------------------------------ fusion
    def fuse(
        self,
        enc_out: Tensor,
        enc_valid: np.ndarray,
        block_map: np.ndarray,
        block_valid: np.ndarray,
        slot_ids: np.ndarray,
    ) -> FusedMemory:
        """Assemble per-bundle memory from a stack of encoded prompts.

        block_map[b, j] indexes into enc_out rows (== len(enc_out) selects an
        all-zero dummy for unused slots); slot_ids[b, j] picks the position
        row added to every token of that block.
        """
        cfg = self.config
        B, mb = block_map.shape
        if mb > cfg.max_items + 1:
            raise ValueError(f"{mb} blocks exceed the {cfg.max_items + 1} slot table")
        N, M = enc_out.shape[0], enc_out.shape[1]
        table = ag.concat([enc_out, Tensor(np.zeros((1, M, cfg.d_model), dtype=cfg.np_dtype()))], axis=0)
        mem = ag.embedding(table, block_map)  # (B, mb, M, d)
        pos = ag.embedding(self.params["item_pos"], slot_ids)  # (B, mb, d)
        mem = mem + ag.reshape(pos, (B, mb, 1, cfg.d_model))
        keep = block_valid[:, :, None, None].astype(cfg.np_dtype())
        mem = mem * Tensor(keep)
        mem = ag.reshape(mem, (B, mb * M, cfg.d_model))
        tok_valid = np.concatenate([enc_valid, np.zeros((1, M), dtype=bool)], axis=0)[block_map]
        tok_valid &= block_valid[:, :, None]
        return FusedMemory(x=mem, valid=tok_valid.reshape(B, mb * M), n_blocks=mb)

    # ------------------------------------------------------------------ decoder
    def decode(
        self,
        memory: FusedMemory,
        dec_tokens: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Causal decoding over the fused memory; returns (B, T, vocab) scores."""
        cfg = self.config
        dec_tokens = np.asarray(dec_tokens, dtype=np.int64)
        B, T = dec_tokens.shape
        if T > cfg.max_decode_len:
            raise ValueError(f"decode length {T} exceeds max_decode_len {cfg.max_decode_len}")
        x = ag.embedding(self.params["embed"], dec_tokens)
        x = x + ag.embedding(self.params["dec_pos"], np.arange(T))
        x = ag.dropout(x, cfg.dropout, rng)
        causal = np.where(
            np.tril(np.ones((T, T), dtype=bool)), 0.0, _NEG
        ).astype(cfg.np_dtype())[None, None, :, :]
        cross_mask = self._key_mask(memory.valid)
        for i in range(cfg.n_layers):
            p = f"dec.{i}"
            ln = self._ln(x, f"{p}.ln1")
            a = self._attention(ln, ln, f"{p}.self", causal, rng)
            x = x + ag.dropout(a, cfg.dropout, rng)
            a = self._attention(self._ln(x, f"{p}.ln2"), memory.x, f"{p}.cross", cross_mask, rng)
            x = x + ag.dropout(a, cfg.dropout, rng)
            h = self._ffn(self._ln(x, f"{p}.ln3"), f"{p}.ffn", rng)
            x = x + ag.dropout(h, cfg.dropout, rng)
        x = self._ln(x, "dec.final_ln")
        return ag.matmul(x, self.params["lm_head"])

    # ------------------------------------------------------------------ persistence
    def state_bytes(self, step: int = 0, extra: dict | None = None,
                    moments: dict[str, tuple[np.ndarray, np.ndarray]] | None = None) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "step": step,
            "extra": extra or {},
            "params": [{"name": n, "shape": list(t.data.shape)} for n, t in self.params.items()],
            "has_moments": moments is not None,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        out = [CHECKPOINT_MAGIC, struct.pack("<I", len(hbytes)), hbytes]
        for name, t in self.params.items():
            out.append(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())
        if moments is not None:
            for name in self.params:
                m, v = moments[name]
                out.append(np.ascontiguousarray(m).astype("<f8").tobytes())
                out.append(np.ascontiguousarray(v).astype("<f8").tobytes())
        return b"".join(out)

    def save(self, path: str, step: int = 0, extra: dict | None = None, moments=None) -> None:
        with open(path, "wb") as f:
            f.write(self.state_bytes(step=step, extra=extra, moments=moments))

    @classmethod
    def load_bytes(cls, blob: bytes) -> tuple["FusionModel", int, dict, dict | None]:
        if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        off = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack("<I", blob[off : off + 4])
        off += 4
        header = json.loads(blob[off : off + hlen])
        off += hlen
        config = ModelConfig(**header["config"])
        model = cls(config)
        dt = np.dtype(config.np_dtype()).newbyteorder("<")
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) * dt.itemsize
            arr = np.frombuffer(blob[off : off + n], dtype=dt).reshape(shape)
            model.params[spec["name"]].data = arr.astype(config.np_dtype())
            off += n
        moments = None
        if header.get("has_moments"):
            moments = {}
            for spec in header["params"]:
                shape = tuple(spec["shape"])
                n = int(np.prod(shape)) * 8
                m = np.frombuffer(blob[off : off + n], dtype="<f8").reshape(shape).copy()
                off += n
                v = np.frombuffer(blob[off : off + n], dtype="<f8").reshape(shape).copy()
                off += n
                moments[spec["name"]] = (m, v)
        return model, header["step"], header.get("extra", {}), moments

    @classmethod
    def load(cls, path: str) -> tuple["FusionModel", int, dict, dict | None]:
        with open(path, "rb") as f:
            return cls.load_bytes(f.read())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()


def collate_bundles(bundles: list, config: ModelConfig) -> dict:
    """Pack prompt bundles for one batched forward pass.

    Returns enc_tokens (N, M) for all prompts of all bundles plus the
    per-bundle block map / slot ids / validity needed by fuse().
    """
    M = config.max_len
    enc_rows: list[list[int]] = []
    B = len(bundles)
    mb = max(1 + len(b.item_tokens) for b in bundles)
    block_map = np.full((B, mb), 0, dtype=np.int64)
    block_valid = np.zeros((B, mb), dtype=bool)
    slot_ids = np.zeros((B, mb), dtype=np.int64)
    for bi, b in enumerate(bundles):
        rows = [b.user_tokens] + list(b.item_tokens)
        for j, toks in enumerate(rows):
            block_map[bi, j] = len(enc_rows)
            block_valid[bi, j] = True
            slot_ids[bi, j] = j
            enc_rows.append(toks)
    n_rows = len(enc_rows)
    block_map[~block_valid] = n_rows  # dummy zero block
    enc_tokens = np.full((n_rows, M), PAD_ID, dtype=np.int64)
    for i, toks in enumerate(enc_rows):
        enc_tokens[i, : len(toks)] = toks
    return {
        "enc_tokens": enc_tokens,
        "block_map": block_map,
        "block_valid": block_valid,
        "slot_ids": slot_ids,
    }


def forward_memory(model: FusionModel, bundles: list, rng=None) -> FusedMemory:
    parts = collate_bundles(bundles, model.config)
    enc_out, enc_valid = model.encode(parts["enc_tokens"], rng)
    return model.fuse(
        enc_out, enc_valid, parts["block_map"], parts["block_valid"], parts["slot_ids"]
    )
