"""Full-ranking evaluation, popularity groups and complexity accounting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import SplitCorpus
from .decoding import Inferencer


def recall_at_k(ranked_items: list[int], target: int, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if target in ranked_items[:k] else 0.0


def ndcg_at_k(ranked_items: list[int], target: int, k: int) -> float:
    """Single-target binary relevance: 1/log2(rank+1) inside the cutoff, else 0.
    The ideal DCG is 1, so this is already normalized."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for rank, item in enumerate(ranked_items[:k], start=1):
        if item == target:
            return 1.0 / math.log2(rank + 1)
    return 0.0


def item_popularity(split: SplitCorpus) -> np.ndarray:
    """Interaction counts over training sequences only (no eval leakage)."""
    pop = np.zeros(split.corpus.n_items, dtype=np.int64)
    for seq in split.train:
        for it in seq:
            pop[it] += 1
    return pop


def head_tail_split(split: SplitCorpus) -> tuple[np.ndarray, dict[int, str]]:
    """Head = top 20% of items by training popularity (ties broken by index);
    a test user is Head iff its target item is a head item."""
    pop = item_popularity(split)
    n = len(pop)
    order = np.lexsort((np.arange(n), -pop))
    n_head = math.ceil(0.2 * n)
    head_items = np.zeros(n, dtype=bool)
    head_items[order[:n_head]] = True
    groups: dict[int, str] = {}
    for u in split.eval_users():
        groups[u] = "head" if head_items[split.test[u]] else "tail"
    return head_items, groups


@dataclass
class ComplexityAccount:
    user_tokens: int
    item_tokens: int
    seq_len: int
    early_online: int
    late_online: int
    late_offline: int
    ratio: float


def complexity_account(user_tokens: int, item_tokens: int, seq_len: int) -> ComplexityAccount:
    """Online-encoding token counts: early fusion pays for user and item
    prompts per request; late fusion pays for the user prompt only and shifts
    the item prompts offline."""
    if min(user_tokens, item_tokens, seq_len) < 0:
        raise ValueError("token counts must be >= 0")
    early = user_tokens + seq_len * item_tokens
    late_online = user_tokens
    late_offline = seq_len * item_tokens
    ratio = early / late_online if late_online else float("inf")
    return ComplexityAccount(
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        seq_len=seq_len,
        early_online=early,
        late_online=late_online,
        late_offline=late_offline,
        ratio=ratio,
    )


@dataclass
class EvalReport:
    cutoffs: list[int]
    recall: dict[str, dict[int, float]]  # group -> cutoff -> value
    ndcg: dict[str, dict[int, float]]
    group_users: dict[str, int]
    n_users: int
    n_skipped: int = 0
    config_fingerprint: str = ""

    def to_json(self) -> str:
        doc = {
            "cutoffs": self.cutoffs,
            "recall": {g: {str(k): v for k, v in d.items()} for g, d in self.recall.items()},
            "ndcg": {g: {str(k): v for k, v in d.items()} for g, d in self.ndcg.items()},
            "group_users": self.group_users,
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "config_fingerprint": self.config_fingerprint,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def to_csv(self) -> str:
        lines = ["metric,cutoff,group,value,n_users"]
        for group in sorted(self.recall):
            n = self.group_users[group]
            for k in self.cutoffs:
                lines.append(f"recall,{k},{group},{self.recall[group][k]!r},{n}")
                lines.append(f"ndcg,{k},{group},{self.ndcg[group][k]!r},{n}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        cols = [f"R@{k}" for k in self.cutoffs] + [f"N@{k}" for k in self.cutoffs]
        widths = [max(8, len(c) + 2) for c in cols]
        head = "group".ljust(12) + "".join(c.rjust(w) for c, w in zip(cols, widths))
        lines = [head]
        for group in sorted(self.recall):
            vals = [self.recall[group][k] for k in self.cutoffs]
            vals += [self.ndcg[group][k] for k in self.cutoffs]
            row = group.ljust(12) + "".join(f"{v:.4f}".rjust(w) for v, w in zip(vals, widths))
            lines.append(row)
        return "\n".join(lines)


@dataclass
class EvalOutcome:
    report: EvalReport
    per_user_hits: dict[int, dict[int, float]] = field(default_factory=dict)
    rankings: dict[int, list[int]] = field(default_factory=dict)


def evaluate(
    inferencer: Inferencer,
    split: SplitCorpus,
    cutoffs: tuple[int, ...] = (5, 10, 20),
    beam_size: int = 50,
    mode: str = "test",
    users: list[int] | None = None,
    config_fingerprint: str = "",
) -> EvalOutcome:
    """Full-ranking evaluation: every eval user gets a beam inference against
    the whole catalog trie; metrics average over evaluated users, with
    head/tail and history-length breakdowns."""
    cutoffs = tuple(sorted(cutoffs))
    top_n = min(max(cutoffs), beam_size)
    _, ht_groups = head_tail_split(split)
    eval_users = split.eval_users() if users is None else users

    sums: dict[str, dict[str, dict[int, float]]] = {}
    counts: dict[str, int] = {}

    def bump(group: str, rec: dict[int, float], ndc: dict[int, float]):
        g = sums.setdefault(group, {"recall": {k: 0.0 for k in cutoffs},
                                    "ndcg": {k: 0.0 for k in cutoffs}})
        for k in cutoffs:
            g["recall"][k] += rec[k]
            g["ndcg"][k] += ndc[k]
        counts[group] = counts.get(group, 0) + 1

    per_user_hits: dict[int, dict[int, float]] = {}
    rankings: dict[int, list[int]] = {}
    n_skipped = 0
    for u in eval_users:
        target = split.target(u, mode)
        if target is None:
            n_skipped += 1
            continue
        history = split.history(u, mode)
        result = inferencer.infer(history, beam_size=beam_size, top_n=top_n)
        ranked = [item for item, _ in result.ranked]
        rec = {k: recall_at_k(ranked, target, k) for k in cutoffs}
        ndc = {k: ndcg_at_k(ranked, target, k) for k in cutoffs}
        bump("all", rec, ndc)
        bump(ht_groups.get(u, "tail"), rec, ndc)
        bump("short" if len(history) <= 10 else "long", rec, ndc)
        per_user_hits[u] = rec
        rankings[u] = ranked

    report = EvalReport(
        cutoffs=list(cutoffs),
        recall={g: {k: v["recall"][k] / counts[g] for k in cutoffs} for g, v in sums.items()},
        ndcg={g: {k: v["ndcg"][k] / counts[g] for k in cutoffs} for g, v in sums.items()},
        group_users=dict(counts),
        n_users=counts.get("all", 0),
        n_skipped=n_skipped,
        config_fingerprint=config_fingerprint,
    )
    return EvalOutcome(report=report, per_user_hits=per_user_hits, rankings=rankings)


def popularity_ranking(split: SplitCorpus) -> list[int]:
    """Items by descending training popularity (index tie-break); the trivial
    baseline recommender."""
    pop = item_popularity(split)
    order = np.lexsort((np.arange(len(pop)), -pop))
    return [int(i) for i in order]


def bootstrap_mean_gt_zero(
    diffs: np.ndarray, n_resamples: int = 2000, seed: int = 0, alpha: float = 0.05
) -> tuple[bool, float]:
    """One-sided bootstrap: is the mean of paired differences > 0 at the given
    confidence? Returns (decision, lower percentile bound)."""
    rng = np.random.default_rng(seed)
    n = len(diffs)
    means = np.empty(n_resamples)
    for b in range(n_resamples):
        means[b] = diffs[rng.integers(0, n, size=n)].mean()
    lower = float(np.quantile(means, alpha))
    return lower > 0.0, lower
