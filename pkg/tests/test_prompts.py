import numpy as np
import pytest

from lexrec import corpus as C, prompts as P, vocab as V
from lexrec.lexindex import LexicalIdMap


def _id_map(components):
    comps = [tuple(c.split("-")) for c in components]
    return LexicalIdMap(
        components=comps,
        id_len=len(comps[0]),
        cluster_path_len=[len(c) for c in comps],
    )


@pytest.fixture()
def small_world():
    items = [
        C.ItemRecord("k0", (("title", "gentle soap bar"), ("brand", "acme"))),
        C.ItemRecord("k1", (("title", "bright lotion"),)),
        C.ItemRecord("k2", ()),
    ]
    corp = C.Corpus(users=["u0"], items=items, sequences=[[0, 1, 2]])
    id_map = _id_map(["soap-mild-mango", "lotion-calm-kiwi", "cream-cool-lime"])
    texts = [r.text() for r in items] + [" ".join(sum((list(c) for c in id_map.components), []))]
    voc = V.build_vocab(texts)
    sim = [
        [(1, 0.9), (2, 0.5)],
        [(0, 0.8), (2, 0.4)],
        [(1, 0.7), (0, 0.2)],
    ]
    builder = P.PromptBuilder(
        corpus=corp, id_map=id_map, vocab=voc, similar_lists=sim, max_len=32, max_items=20
    )
    return corp, id_map, voc, sim, builder


class TestVerbalize:
    def test_empty_similar_list(self, small_world):
        _, id_map, *_ = small_world
        attr = P.verbalize_cf([], id_map)
        assert attr.key == "similar items"
        assert attr.value == ""

    def test_order_matches_similarity_ranking(self, small_world):
        _, id_map, _, sim, _ = small_world
        ranked = sorted(sim[2], key=lambda t: -t[1])  # similarity-sort oracle
        attr = P.verbalize_cf(sim[2], id_map)
        assert attr.value == ", ".join(id_map.display(i) for i, _ in ranked)

    def test_display_shape(self, small_world):
        _, id_map, _, sim, _ = small_world
        attr = P.verbalize_cf(sim[0], id_map)
        assert attr.value == "lotion-calm-kiwi, cream-cool-lime"


class TestUserPrompt:
    def test_single_item_history(self, small_world):
        _, id_map, *_ = small_world
        text = P.render_user_prompt([0], id_map, max_items=20)
        assert text == "What would the user purchase after soap-mild-mango?"

    def test_reversal_law(self, small_world):
        _, id_map, *_ = small_world
        text = P.render_user_prompt([0, 1, 2], id_map, max_items=20)
        assert text == (
            "What would the user purchase after "
            "cream-cool-lime ; lotion-calm-kiwi ; soap-mild-mango?"
        )

    def test_history_cap_keeps_most_recent(self):
        id_map = _id_map([f"tok{i:02d}-x-y" for i in range(40)])
        text = P.render_user_prompt(list(range(40)), id_map, max_items=20)
        assert "tok20" in text and "tok39" in text
        assert "tok19" not in text

    def test_empty_history_errors(self, small_world):
        _, id_map, *_ = small_world
        with pytest.raises(ValueError):
            P.render_user_prompt([], id_map, max_items=5)


class TestItemPrompt:
    def test_field_order(self, small_world):
        corp, id_map, _, sim, builder = small_world
        text = builder.item_prompt_text(0)
        assert text == (
            "item: soap-mild-mango; "
            "similar items: lotion-calm-kiwi, cream-cool-lime; "
            "title: gentle soap bar; brand: acme"
        )

    def test_no_metadata_attributes(self, small_world):
        _, _, _, _, builder = small_world
        text = builder.item_prompt_text(2)
        assert text == "item: cream-cool-lime; similar items: lotion-calm-kiwi, soap-mild-mango"

    def test_long_prompt_truncated_to_exact_cap_with_eos_last(self):
        words = " ".join(f"w{i}" for i in range(600))
        items = [C.ItemRecord("k0", (("description", words),))]
        corp = C.Corpus(users=["u"], items=items, sequences=[[0]])
        id_map = _id_map(["a-b-c"])
        voc = V.build_vocab([words + " a b c"])
        builder = P.PromptBuilder(
            corpus=corp, id_map=id_map, vocab=voc, similar_lists=[[]],
            max_len=128, max_items=20,
        )
        bundle = builder.build([0])
        toks = bundle.item_tokens[0]
        assert len(toks) == 128
        assert toks[-1] == V.EOS_ID
        assert bundle.truncated_items[0] is True


class TestBundle:
    def test_single_item_bundle_has_two_prompts(self, small_world):
        *_, builder = small_world
        assert builder.build([0]).n_prompts == 2

    def test_cap_yields_max_items_plus_one(self):
        id_map = _id_map([f"tok{i:02d}-x-y" for i in range(30)])
        items = [C.ItemRecord(f"k{i}", (("title", f"thing {i}"),)) for i in range(30)]
        corp = C.Corpus(users=["u"], items=items, sequences=[list(range(30))])
        voc = V.build_vocab([r.text() for r in items])
        builder = P.PromptBuilder(
            corpus=corp, id_map=id_map, vocab=voc,
            similar_lists=[[] for _ in range(30)], max_len=16, max_items=20,
        )
        bundle = builder.build(list(range(25)))
        assert bundle.n_prompts == 21

    def test_bundle_size_law(self, small_world):
        *_, builder = small_world
        for hist in ([0], [0, 1], [0, 1, 2]):
            assert builder.build(hist).n_prompts == min(len(hist), 20) + 1

    def test_index_mapping_newest_first(self, small_world):
        *_, builder = small_world
        bundle = builder.build([0, 1, 2])
        # prompt j corresponds to the (|s| - j + 1)-th chronological item
        assert bundle.item_indices == [2, 1, 0]

    def test_information_linking(self, small_world):
        _, id_map, voc, _, builder = small_world
        bundle = builder.build([0, 1])
        user_text = P.render_user_prompt([0, 1], id_map, 20)
        for j, item in enumerate(bundle.item_indices):
            comps = id_map.components[item]
            assert "-".join(comps) in user_text
            item_text = builder.item_prompt_text(item)
            assert item_text.startswith("item: " + "-".join(comps))
            # the same component tokens open the tokenized item prompt
            assert bundle.item_tokens[j][1 : 1 + len(comps)] == [
                voc.token_to_id[c] for c in comps
            ]

    def test_round_trip_detokenize_retokenize(self, small_world):
        _, _, voc, _, builder = small_world
        bundle = builder.build([0, 1, 2])
        for toks in [bundle.user_tokens] + bundle.item_tokens:
            assert voc.encode(voc.decode(toks)) == toks

    def test_round_trip_with_unk(self, small_world):
        # template words are out-of-vocabulary here; they become UNK but the
        # round trip must still be the identity on ids
        _, _, voc, _, builder = small_world
        bundle = builder.build([0])
        assert V.UNK_ID in bundle.user_tokens
        assert voc.encode(voc.decode(bundle.user_tokens)) == bundle.user_tokens

    def test_user_prompt_head_survives_truncation(self):
        id_map = _id_map([f"tok{i:02d}-x{i}-y{i}" for i in range(40)])
        comp_words = " ".join(" ".join(c) for c in id_map.components)
        items = [C.ItemRecord(f"k{i}", ()) for i in range(40)]
        corp = C.Corpus(users=["u"], items=items, sequences=[list(range(40))])
        voc = V.build_vocab([comp_words + " what would the user purchase after"])
        builder = P.PromptBuilder(
            corpus=corp, id_map=id_map, vocab=voc,
            similar_lists=[[] for _ in range(40)], max_len=24, max_items=20,
        )
        bundle = builder.build(list(range(40)))
        assert bundle.truncated_user
        assert len(bundle.user_tokens) == 24
        # template head and the most recent item's components survive
        head = [voc.token_to_id[w] for w in "what would the user purchase after".split()]
        newest = [voc.token_to_id[c] for c in id_map.components[39]]
        assert bundle.user_tokens[: len(head)] == head
        assert bundle.user_tokens[len(head) : len(head) + 3] == newest

    def test_render_bundle_dump(self, small_world):
        *_, builder = small_world
        dump = builder.render_bundle([0, 1])
        assert dump.splitlines()[0].startswith("What would the user purchase after")
        assert "item: lotion-calm-kiwi" in dump
