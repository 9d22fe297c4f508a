"""Synthetic planted-structure dataset generator.

Items live in blocks sharing a noun pool; sequences are Markov chains that
mostly stay inside a block, with an extra bias toward a small per-item
successor ring so that co-occurrence models can learn structure finer than
block membership. Attributes mix shared block nouns with item-unique
modifiers, which keeps TF-IDF identifiers distinct and clusterable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_BLOCK_NOUNS = [
    ["soap", "lotion", "cream", "balm", "cleanser", "serum", "shampoo", "conditioner",
     "scrub", "mask", "toner", "oil"],
    ["puzzle", "doll", "blocks", "train", "robot", "kite", "marbles", "yoyo",
     "crayons", "playset", "figurine", "boardgame"],
    ["racket", "helmet", "jersey", "cleats", "gloves", "paddle", "goggles", "whistle",
     "dumbbell", "mat", "frisbee", "skates"],
    ["kettle", "skillet", "whisk", "spatula", "grater", "ladle", "colander", "peeler",
     "masher", "tongs", "sieve", "griddle"],
]

_ADJECTIVES = [
    "gentle", "bright", "sturdy", "compact", "classic", "deluxe", "mini", "grand",
    "smooth", "rustic", "vivid", "quiet", "swift", "cozy", "crisp", "bold",
]

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, syllables: int = 3) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


@dataclass
class SynthConfig:
    n_blocks: int = 2
    items_per_block: int = 25
    n_users: int = 500
    seq_len_min: int = 8
    seq_len_max: int = 16
    within_block_prob: float = 0.9  # successor-ring + same-block mass combined
    successor_prob: float = 0.6  # portion of transitions that hit the ring
    successor_ring: int = 5
    seed: int = 7

    def validate(self) -> None:
        if self.n_blocks < 1 or self.items_per_block < 2 or self.n_users < 1:
            raise ValueError("need at least 1 block, 2 items per block, 1 user")
        if not 0.0 <= self.successor_prob <= self.within_block_prob <= 1.0:
            raise ValueError("require 0 <= successor_prob <= within_block_prob <= 1")
        if self.seq_len_min < 3 or self.seq_len_max < self.seq_len_min:
            raise ValueError("sequence lengths must satisfy 3 <= min <= max")


@dataclass
class SynthDataset:
    interactions_jsonl: str
    items_jsonl: str
    n_items: int
    n_users: int


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_items = config.n_blocks * config.items_per_block

    # item vocabulary: block nouns (recycled pools + pseudo-nouns past 4 blocks)
    block_nouns: list[list[str]] = []
    for b in range(config.n_blocks):
        if b < len(_BLOCK_NOUNS):
            block_nouns.append(_BLOCK_NOUNS[b])
        else:
            block_nouns.append([_pseudo_word(rng) for _ in range(12)])

    item_lines = []
    for i in range(n_items):
        block = i // config.items_per_block
        nouns = block_nouns[block]
        noun = nouns[i % len(nouns)]
        adj = _ADJECTIVES[int(rng.integers(len(_ADJECTIVES)))]
        unique = _pseudo_word(rng)
        unique2 = _pseudo_word(rng)
        title = f"{adj} {noun} {unique}"
        extra = " ".join(nouns[int(rng.integers(len(nouns)))] for _ in range(3))
        desc = f"{unique} {unique2} {noun} {extra}"
        item_lines.append(
            json.dumps(
                {
                    "item": f"it{i:05d}",
                    "attrs": [
                        {"key": "title", "value": title},
                        {"key": "category", "value": f"block {noun}"},
                        {"key": "description", "value": desc},
                    ],
                },
                sort_keys=True,
            )
        )

    def next_item(cur: int) -> int:
        block = cur // config.items_per_block
        base = block * config.items_per_block
        r = rng.random()
        if r < config.successor_prob:
            step = 1 + int(rng.integers(config.successor_ring))
            return base + (cur - base + step) % config.items_per_block
        if r < config.within_block_prob:
            return base + int(rng.integers(config.items_per_block))
        return int(rng.integers(n_items))

    inter_lines = []
    ts = 0
    for u in range(config.n_users):
        length = int(rng.integers(config.seq_len_min, config.seq_len_max + 1))
        cur = int(rng.integers(n_items))
        for _ in range(length):
            inter_lines.append(json.dumps({"user": f"u{u:05d}", "item": f"it{cur:05d}", "ts": ts}))
            ts += 1
            cur = next_item(cur)

    return SynthDataset(
        interactions_jsonl="\n".join(inter_lines) + "\n",
        items_jsonl="\n".join(item_lines) + "\n",
        n_items=n_items,
        n_users=config.n_users,
    )
