"""Interaction corpus: ingestion, k-core filtering, leave-one-out splitting.

A `Corpus` is an immutable view of users, items (with ordered key/value
attributes) and per-user chronological item sequences, all addressed by dense
integer indices. Construction is single-writer; once built, a corpus is safe
to share across threads.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

SNAPSHOT_VERSION = 1


class ParseError(ValueError):
    """Malformed input record; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    timestamp: int

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


@dataclass(frozen=True)
class ItemRecord:
    item_key: str
    attributes: tuple[tuple[str, str], ...]

    def __post_init__(self):
        keys = [k for k, _ in self.attributes]
        if len(keys) != len(set(keys)):
            raise ValueError(f"duplicate attribute keys for item {self.item_key!r}")

    def text(self) -> str:
        """Attribute values joined in input order, used for vocabulary/TF-IDF."""
        return " ".join(v for _, v in self.attributes)


@dataclass
class Corpus:
    users: list[str]
    items: list[ItemRecord]
    sequences: list[list[int]]
    dropped_unknown_items: int = 0

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def item_index(self) -> dict[str, int]:
        return {rec.item_key: i for i, rec in enumerate(self.items)}

    def to_snapshot(self) -> str:
        """Canonical serialization; identical corpora serialize bitwise-identically."""
        doc = {
            "version": SNAPSHOT_VERSION,
            "users": self.users,
            "items": [
                {"item": rec.item_key, "attrs": [[k, v] for k, v in rec.attributes]}
                for rec in self.items
            ],
            "sequences": self.sequences,
            "dropped_unknown_items": self.dropped_unknown_items,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_snapshot(cls, text: str) -> "Corpus":
        doc = json.loads(text)
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported corpus snapshot version {doc.get('version')}")
        items = [
            ItemRecord(d["item"], tuple((k, v) for k, v in d["attrs"]))
            for d in doc["items"]
        ]
        return cls(
            users=list(doc["users"]),
            items=items,
            sequences=[list(s) for s in doc["sequences"]],
            dropped_unknown_items=doc.get("dropped_unknown_items", 0),
        )


@dataclass
class SplitCorpus:
    """Leave-one-out split.

    `train` covers every corpus user; users whose sequence is shorter than 3
    keep their whole sequence as train data and get no valid/test item
    (they are excluded from evaluation but still feed CF training).
    """

    corpus: Corpus
    train: list[list[int]]
    valid: list[int | None]
    test: list[int | None]
    n_excluded: int = 0

    def eval_users(self) -> list[int]:
        return [u for u in range(self.corpus.n_users) if self.test[u] is not None]

    def history(self, user: int, mode: str = "test") -> list[int]:
        """Items preceding the prediction target: train (+valid when mode='test')."""
        if mode == "test":
            v = self.valid[user]
            return self.train[user] + ([v] if v is not None else [])
        if mode == "valid":
            return list(self.train[user])
        raise ValueError(f"unknown mode {mode!r}")

    def target(self, user: int, mode: str = "test") -> int | None:
        return self.test[user] if mode == "test" else self.valid[user]


def _parse_json_line(line: str, line_no: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        # Public review-metadata dumps are Python literals rather than strict
        # JSON; accept both.
        try:
            obj = ast.literal_eval(line)
        except (ValueError, SyntaxError) as exc:
            raise ParseError(line_no, f"unparseable record: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError(line_no, "record is not an object")
    return obj


def _flatten_categories(cats) -> str:
    if isinstance(cats, str):
        return cats
    parts: list[str] = []
    stack = list(reversed(cats)) if isinstance(cats, list) else []
    while stack:
        x = stack.pop()
        if isinstance(x, list):
            stack.extend(reversed(x))
        elif x is not None:
            parts.append(str(x))
    return ", ".join(parts)


# Metadata fields surfaced as item attributes, in prompt order.
_AMAZON_ATTR_FIELDS = ("title", "brand", "categories", "description", "price", "salesRank")


def _amazon_item(obj: dict) -> tuple[str, tuple[tuple[str, str], ...]]:
    key = obj.get("asin")
    attrs: list[tuple[str, str]] = []
    for f in _AMAZON_ATTR_FIELDS:
        if f not in obj or obj[f] is None:
            continue
        v = obj[f]
        if f == "categories":
            sv = _flatten_categories(v)
        elif f == "salesRank" and isinstance(v, dict):
            sv = ", ".join(f"{k}: {v[k]}" for k in sorted(v))
        else:
            sv = str(v)
        attrs.append((f.lower(), sv))
    return key, tuple(attrs)


def parse_interactions(lines: Iterable[str], fmt: str = "native") -> Iterator[RawInteraction]:
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        obj = _parse_json_line(line, line_no)
        try:
            if fmt == "native":
                yield RawInteraction(str(obj["user"]), str(obj["item"]), int(obj["ts"]))
            elif fmt == "amazon":
                yield RawInteraction(
                    str(obj["reviewerID"]), str(obj["asin"]), int(obj["unixReviewTime"])
                )
            else:
                raise ValueError(f"unknown format {fmt!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValueError) and "unknown format" in str(exc):
                raise
            raise ParseError(line_no, f"bad interaction record: {exc}") from None


def parse_items(lines: Iterable[str], fmt: str = "native") -> Iterator[ItemRecord]:
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        obj = _parse_json_line(line, line_no)
        try:
            if fmt == "native":
                attrs = tuple((str(a["key"]), str(a["value"])) for a in obj.get("attrs", []))
                yield ItemRecord(str(obj["item"]), attrs)
            elif fmt == "amazon":
                key, attrs = _amazon_item(obj)
                if key is None:
                    raise KeyError("asin")
                yield ItemRecord(str(key), attrs)
            else:
                raise ValueError(f"unknown format {fmt!r}")
        except (KeyError, TypeError) as exc:
            raise ParseError(line_no, f"bad item record: {exc}") from None


def ingest(
    interaction_lines: Iterable[str],
    item_lines: Iterable[str],
    fmt: str = "native",
) -> Corpus:
    """Assemble a dense-index corpus from line-delimited records.

    Interactions referencing item keys absent from the item stream are dropped
    and counted. Per-user sequences are sorted by timestamp, ties broken by
    input order (stable sort), so ingestion is deterministic.
    """
    items: list[ItemRecord] = []
    item_idx: dict[str, int] = {}
    for rec in parse_items(item_lines, fmt):
        if rec.item_key in item_idx:
            continue  # keep the first occurrence
        item_idx[rec.item_key] = len(items)
        items.append(rec)

    per_user: dict[str, list[tuple[int, int]]] = {}
    user_order: list[str] = []
    dropped = 0
    for inter in parse_interactions(interaction_lines, fmt):
        idx = item_idx.get(inter.item_key)
        if idx is None:
            dropped += 1
            continue
        if inter.user_key not in per_user:
            per_user[inter.user_key] = []
            user_order.append(inter.user_key)
        per_user[inter.user_key].append((inter.timestamp, idx))

    users: list[str] = []
    sequences: list[list[int]] = []
    for uk in user_order:
        recs = per_user[uk]
        recs.sort(key=lambda t: t[0])  # stable: input order breaks ts ties
        users.append(uk)
        sequences.append([idx for _, idx in recs])
    return Corpus(users=users, items=items, sequences=sequences, dropped_unknown_items=dropped)


def apply_k_core(corpus: Corpus, k: int) -> Corpus:
    """Iteratively drop users and items with fewer than k interactions (fixpoint),
    then re-densify indices. Items with no surviving interactions are dropped too.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seqs = {u: list(s) for u, s in enumerate(corpus.sequences)}
    while True:
        item_count: dict[int, int] = {}
        for s in seqs.values():
            for it in s:
                item_count[it] = item_count.get(it, 0) + 1
        bad_items = {it for it, c in item_count.items() if c < k}
        changed = False
        if bad_items:
            for u in list(seqs):
                ns = [it for it in seqs[u] if it not in bad_items]
                if len(ns) != len(seqs[u]):
                    seqs[u] = ns
                    changed = True
        bad_users = [u for u, s in seqs.items() if len(s) < k]
        if bad_users:
            for u in bad_users:
                del seqs[u]
            changed = True
        if not changed:
            break

    kept_users = sorted(seqs)
    kept_items = sorted({it for u in kept_users for it in seqs[u]})
    item_remap = {old: new for new, old in enumerate(kept_items)}
    return Corpus(
        users=[corpus.users[u] for u in kept_users],
        items=[corpus.items[i] for i in kept_items],
        sequences=[[item_remap[it] for it in seqs[u]] for u in kept_users],
        dropped_unknown_items=corpus.dropped_unknown_items,
    )


def split_leave_one_out(corpus: Corpus) -> SplitCorpus:
    """Per user: test = last item, valid = second-to-last, train = the rest.

    Users with fewer than 3 interactions cannot be split; they are counted and
    kept train-only.
    """
    train: list[list[int]] = []
    valid: list[int | None] = []
    test: list[int | None] = []
    excluded = 0
    for seq in corpus.sequences:
        if len(seq) < 3:
            train.append(list(seq))
            valid.append(None)
            test.append(None)
            excluded += 1
        else:
            train.append(seq[:-2])
            valid.append(seq[-2])
            test.append(seq[-1])
    return SplitCorpus(corpus=corpus, train=train, valid=valid, test=test, n_excluded=excluded)
