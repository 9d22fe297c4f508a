"""Hierarchical lexical item identifiers.

Items are embedded (TF-IDF random projection by default, or imported vectors),
clustered by recursive k-means, and each cluster is named with the highest
scoring token of its mean TF-IDF vector. An item's identifier is its
root-to-leaf token path, padded with the item's own top tokens to exactly
`id_len` components, with digit-token suffixes breaking exact duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import SPECIAL_TOKENS, SparseVector, Vocabulary


@dataclass
class ClusterNode:
    depth: int
    members: np.ndarray  # item indices, ascending
    children: list["ClusterNode"] = field(default_factory=list)
    token: str | None = None  # set during assignment; root keeps None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> list["ClusterNode"]:
        if self.is_leaf:
            return [self]
        out = []
        for ch in self.children:
            out.extend(ch.leaves())
        return out

    def render(self, indent: int = 0) -> str:
        label = self.token if self.token is not None else "(root)"
        lines = [f"{'  ' * indent}{label} [{len(self.members)} items]"]
        for ch in self.children:
            lines.append(ch.render(indent + 1))
        return "\n".join(lines)


def kmeans(
    points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns the label array.

    Deterministic for a fixed generator state. Converges when assignments
    stop changing; empty clusters are re-seeded from the point farthest from
    its current centroid.
    """
    n = len(points)
    assert k >= 2 and n >= k

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all points coincide
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centroids[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[c]) ** 2, axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dist = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_labels = np.argmin(dist, axis=1)
        for c in range(k):
            mask = new_labels == c
            if not mask.any():
                # farthest point from its own centroid becomes the new seed
                far = int(np.argmax(dist[np.arange(n), new_labels]))
                new_labels[far] = c
                mask = new_labels == c
            centroids[c] = points[mask].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def hierarchical_cluster(
    embeddings: np.ndarray, k: int, c: int, max_depth: int, seed: int
) -> ClusterNode:
    """Recursive k-means: a node splits while it holds more than `c` items and
    its depth is below `max_depth`; nodes with fewer than k members stay leaves.

    Each node's k-means draws from a generator keyed by its path, so disjoint
    subtrees could be clustered in parallel with identical results.
    """
    if k < 2 or c < 1 or max_depth < 1:
        raise ValueError("require k >= 2, c >= 1, max_depth >= 1")

    def build(members: np.ndarray, depth: int, path: tuple[int, ...]) -> ClusterNode:
        node = ClusterNode(depth=depth, members=members)
        if len(members) > c and depth < max_depth and len(members) >= k:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=path)
            )
            labels = kmeans(embeddings[members], k, rng)
            for ci in range(k):
                sub = members[labels == ci]
                if len(sub) == 0:
                    continue
                node.children.append(build(sub, depth + 1, path + (ci,)))
        return node

    return build(np.arange(len(embeddings), dtype=np.int64), 0, ())


def project_tfidf(
    vectors: list[SparseVector], vocab_size: int, dims: int, seed: int
) -> np.ndarray:
    """Seeded Gaussian random projection of TF-IDF vectors, L2-normalized.

    Approximately preserves cosine structure; items with identical text map to
    identical embeddings. Zero vectors stay zero.
    """
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((vocab_size, dims)) / np.sqrt(dims)
    out = np.zeros((len(vectors), dims), dtype=np.float64)
    for i, sv in enumerate(vectors):
        if sv.nnz == 0:
            continue
        z = sv.values @ proj[sv.indices]
        norm = np.linalg.norm(z)
        out[i] = z / norm if norm > 0 else z
    return out


@dataclass
class LexicalIdMap:
    """Bijection between items and identifier component tuples.

    The first `id_len` components come from the cluster path plus per-item
    padding; any further components are digit tokens appended for uniqueness.
    Display form joins components with '-'.
    """

    components: list[tuple[str, ...]]
    id_len: int
    cluster_path_len: list[int]  # per item, components owned by the tree path
    report: dict = field(default_factory=dict)
    _reverse: dict[tuple[str, ...], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._reverse:
            self._reverse = {c: i for i, c in enumerate(self.components)}
        if len(self._reverse) != len(self.components):
            raise ValueError("identifier map is not a bijection")

    @property
    def n_items(self) -> int:
        return len(self.components)

    def display(self, item: int) -> str:
        return "-".join(self.components[item])

    def item_of(self, components: tuple[str, ...]) -> int | None:
        return self._reverse.get(components)

    def token_ids(self, item: int, vocab: Vocabulary) -> list[int]:
        return [vocab.token_to_id[t] for t in self.components[item]]

    def export_tsv(self, item_keys: list[str]) -> str:
        lines = [f"{item_keys[i]}\t{self.display(i)}" for i in range(self.n_items)]
        return "\n".join(lines) + "\n"

    def serialize(self) -> str:
        import json

        return json.dumps(
            {
                "version": 1,
                "id_len": self.id_len,
                "components": [list(c) for c in self.components],
                "cluster_path_len": self.cluster_path_len,
                "report": self.report,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def deserialize(cls, text: str) -> "LexicalIdMap":
        import json

        doc = json.loads(text)
        return cls(
            components=[tuple(c) for c in doc["components"]],
            id_len=doc["id_len"],
            cluster_path_len=list(doc["cluster_path_len"]),
            report=doc.get("report", {}),
        )


_STRUCTURAL_SPECIALS = frozenset(SPECIAL_TOKENS[:4])  # pad/bos/eos/unk never name clusters


def _mean_member_vector(members: np.ndarray, vectors: list[SparseVector], size: int) -> np.ndarray:
    acc = np.zeros(size, dtype=np.float64)
    for i in members:
        sv = vectors[i]
        if sv.nnz:
            acc[sv.indices] += sv.values
    return acc / len(members)


def _pick_token(
    mean_vec: np.ndarray, vocab: Vocabulary, excluded: set[str], report: dict
) -> str:
    order = np.argsort(-mean_vec, kind="stable")  # score desc, index asc on ties
    for tid in order:
        if mean_vec[tid] <= 0:
            break
        tok = vocab.tokens[tid]
        if tok in excluded or tok in _STRUCTURAL_SPECIALS:
            continue
        return tok
    # Degenerate: every scored token is taken. Fall back to vocabulary order.
    for tok in vocab.tokens:
        if tok not in excluded and tok not in _STRUCTURAL_SPECIALS:
            report["token_fallbacks"] = report.get("token_fallbacks", 0) + 1
            return tok
    raise ValueError("vocabulary exhausted while naming clusters")


def assign_ids(
    tree: ClusterNode,
    vectors: list[SparseVector],
    vocab: Vocabulary,
    id_len: int,
) -> LexicalIdMap:
    """Name every cluster, pad item paths to `id_len`, dedup with digit suffixes.

    Cluster naming walks children in descending size (ties by child order) and
    skips tokens already used on the ancestor path or claimed by an earlier
    sibling, so sibling clusters always carry distinct tokens and shared
    prefixes mirror shared ancestry.
    """
    n_items = len(vectors)
    report: dict = {}

    def name_children(node: ClusterNode, path_tokens: tuple[str, ...]) -> None:
        order = sorted(
            range(len(node.children)),
            key=lambda ci: (-len(node.children[ci].members), ci),
        )
        taken: set[str] = set(path_tokens)
        for ci in order:
            child = node.children[ci]
            mean_vec = _mean_member_vector(child.members, vectors, len(vocab))
            tok = _pick_token(mean_vec, vocab, taken, report)
            child.token = tok
            taken.add(tok)
        for child in node.children:
            name_children(child, path_tokens + (child.token,))

    name_children(tree, ())

    # Root-to-leaf paths
    paths: list[tuple[str, ...]] = [()] * n_items

    def collect(node: ClusterNode, prefix: tuple[str, ...]) -> None:
        here = prefix + ((node.token,) if node.token is not None else ())
        if node.is_leaf:
            for i in node.members:
                paths[int(i)] = here
            return
        for ch in node.children:
            collect(ch, here)

    collect(tree, ())
    cluster_path_len = [len(p) for p in paths]

    # Pad with the item's own top TF-IDF tokens, never repeating within a path
    padded: list[tuple[str, ...]] = []
    pad_fallbacks = 0
    for i in range(n_items):
        comp = list(paths[i])
        if len(comp) < id_len:
            sv = vectors[i]
            order = np.argsort(-sv.values, kind="stable") if sv.nnz else []
            used = set(comp)
            for j in order:
                tok = vocab.tokens[int(sv.indices[j])]
                if tok in used or tok in _STRUCTURAL_SPECIALS:
                    continue
                comp.append(tok)
                used.add(tok)
                if len(comp) == id_len:
                    break
        if len(comp) < id_len:
            pad_fallbacks += 1
            for digit in str(i).zfill(id_len - len(comp)):
                comp.append(digit)
                if len(comp) == id_len:
                    break
        padded.append(tuple(comp))
    if pad_fallbacks:
        report["padding_fallbacks"] = pad_fallbacks

    # Dedup: identical IDs get trailing digit components "2", "3", ... in
    # item-index order; the first occurrence stays unchanged. Ordinals >= 10
    # expand to one component per decimal digit.
    groups: dict[tuple[str, ...], list[int]] = {}
    for i, comp in enumerate(padded):
        groups.setdefault(comp, []).append(i)
    final = list(padded)
    n_dedup = 0
    for comp, members in groups.items():
        for ordinal, item in enumerate(members[1:], start=2):
            final[item] = comp + tuple(str(ordinal))
            n_dedup += 1
    if n_dedup:
        report["deduplicated"] = n_dedup

    return LexicalIdMap(
        components=final,
        id_len=id_len,
        cluster_path_len=cluster_path_len,
        report=report,
    )


def build_id_map(
    vectors: list[SparseVector],
    vocab: Vocabulary,
    embeddings: np.ndarray,
    k: int,
    c: int,
    id_len: int,
    seed: int,
) -> tuple[LexicalIdMap, ClusterNode]:
    tree = hierarchical_cluster(embeddings, k=k, c=c, max_depth=id_len, seed=seed)
    return assign_ids(tree, vectors, vocab, id_len), tree
