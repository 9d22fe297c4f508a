"""Coarse user prompts and fine-grained item prompts.

The user prompt carries the identifier sequence of the interaction history,
newest first so truncation never costs recent items. Item prompts lead with
the identifier and the verbalized similar-item list, then the item's metadata
attributes in their original order. Identifier components enter the token
stream as plain vocabulary tokens; the hyphen in the display form is only a
rendering convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import Corpus
from .lexindex import LexicalIdMap
from .vocab import EOS_ID, Vocabulary

USER_TEMPLATE = "What would the user purchase after {history}?"
SIMILAR_KEY = "similar items"


@dataclass(frozen=True)
class CfAttribute:
    key: str
    value: str


@dataclass
class PromptBundle:
    """Tokenized prompt list: user prompt first, then item prompts newest-first."""

    user_tokens: list[int]
    item_tokens: list[list[int]]  # index 0 = most recent item
    item_indices: list[int]
    truncated_user: bool = False
    truncated_items: list[bool] = field(default_factory=list)

    @property
    def n_prompts(self) -> int:
        return 1 + len(self.item_tokens)


def verbalize_cf(similar: list[tuple[int, float]], id_map: LexicalIdMap) -> CfAttribute:
    value = ", ".join(id_map.display(idx) for idx, _ in similar)
    return CfAttribute(key=SIMILAR_KEY, value=value)


def render_user_prompt(history: list[int], id_map: LexicalIdMap, max_items: int) -> str:
    """History identifiers newest-first, capped at max_items, in the template."""
    if not history:
        raise ValueError("cannot build a user prompt from an empty history")
    recent = history[-max_items:]
    joined = " ; ".join(id_map.display(it) for it in reversed(recent))
    return USER_TEMPLATE.format(history=joined)


def render_item_prompt(
    item: int, corpus: Corpus, id_map: LexicalIdMap, cf_attr: CfAttribute
) -> str:
    parts = [f"item: {id_map.display(item)}", f"{cf_attr.key}: {cf_attr.value}"]
    for key, value in corpus.items[item].attributes:
        parts.append(f"{key}: {value}")
    return "; ".join(parts)


def tokenize_prompt(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], bool]:
    """Encode and cap at max_len tokens, keeping the head; EOS always last."""
    ids = vocab.encode(text)
    truncated = len(ids) > max_len - 1
    ids = ids[: max_len - 1]
    ids.append(EOS_ID)
    return ids, truncated


@dataclass
class PromptBuilder:
    corpus: Corpus
    id_map: LexicalIdMap
    vocab: Vocabulary
    similar_lists: list[list[tuple[int, float]]]
    max_len: int  # per-prompt token cap
    max_items: int  # history cap
    include_items: bool = True  # False = user prompt only (ablation switch)

    def item_prompt_text(self, item: int) -> str:
        cf_attr = verbalize_cf(self.similar_lists[item], self.id_map)
        return render_item_prompt(item, self.corpus, self.id_map, cf_attr)

    def build(self, history: list[int]) -> PromptBundle:
        recent = history[-self.max_items:] if self.include_items else []
        user_text = render_user_prompt(history, self.id_map, self.max_items)
        user_tokens, trunc_u = tokenize_prompt(user_text, self.vocab, self.max_len)
        item_tokens: list[list[int]] = []
        trunc_items: list[bool] = []
        indices: list[int] = []
        for item in reversed(recent):  # newest first
            toks, tr = tokenize_prompt(self.item_prompt_text(item), self.vocab, self.max_len)
            item_tokens.append(toks)
            trunc_items.append(tr)
            indices.append(item)
        return PromptBundle(
            user_tokens=user_tokens,
            item_tokens=item_tokens,
            item_indices=indices,
            truncated_user=trunc_u,
            truncated_items=trunc_items,
        )

    def render_bundle(self, history: list[int]) -> str:
        """Human-readable dump of one bundle, for eyeball debugging."""
        lines = [render_user_prompt(history, self.id_map, self.max_items), ""]
        for item in reversed(history[-self.max_items:]):
            lines.append(self.item_prompt_text(item))
            lines.append("")
        return "\n".join(lines)
