import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexrec import corpus as C
from tests.conftest import make_native_lines


def _items(n, prefix="it"):
    return [(f"{prefix}{i}", [("title", f"thing {i}")]) for i in range(n)]


class TestIngest:
    def test_empty_streams(self):
        corp = C.ingest([], [])
        assert corp.n_users == 0 and corp.n_items == 0

    def test_sorts_chronologically_per_user(self):
        rng = random.Random(3)
        inter = []
        expected = {}
        for u in range(3):
            ts_order = [(t * 10 + u, f"it{t}") for t in range(4)]
            expected[f"u{u}"] = [i for _, i in ts_order]
            shuffled = ts_order[:]
            rng.shuffle(shuffled)
            inter += [(f"u{u}", item, ts) for ts, item in shuffled]
        ilines, tlines = make_native_lines(inter, _items(4))
        corp = C.ingest(ilines, tlines)
        # sort oracle: stable sort of the raw records per user
        for u in range(corp.n_users):
            keys = [corp.items[i].item_key for i in corp.sequences[u]]
            assert keys == expected[corp.users[u]]

    def test_timestamp_ties_keep_input_order(self):
        inter = [("u", "a", 5), ("u", "b", 5), ("u", "c", 5)]
        ilines, tlines = make_native_lines(inter, [(k, []) for k in "abc"])
        corp = C.ingest(ilines, tlines)
        assert [corp.items[i].item_key for i in corp.sequences[0]] == ["a", "b", "c"]

    def test_unknown_items_dropped_with_count(self):
        inter = [("u", "known", 1), ("u", "ghost", 2), ("u", "known", 3)]
        ilines, tlines = make_native_lines(inter, [("known", [])])
        corp = C.ingest(ilines, tlines)
        assert corp.dropped_unknown_items == 1
        assert corp.n_interactions == 2

    def test_malformed_record_has_line_number(self):
        with pytest.raises(C.ParseError, match="line 2"):
            list(C.parse_interactions(['{"user":"u","item":"i","ts":1}', "{oops"]))

    def test_amazon_field_mapping(self):
        inter = [json.dumps({"reviewerID": "r1", "asin": "a1", "unixReviewTime": 99})]
        meta = [json.dumps({
            "asin": "a1", "title": "Soap Bar", "price": 3.5,
            "categories": [["Beauty", "Bath"]], "salesRank": {"Beauty": 12},
        })]
        corp = C.ingest(inter, meta, fmt="amazon")
        assert corp.n_users == 1 and corp.n_items == 1
        attrs = dict(corp.items[0].attributes)
        assert attrs["title"] == "Soap Bar"
        assert attrs["categories"] == "Beauty, Bath"
        assert attrs["salesrank"] == "Beauty: 12"

    def test_ingestion_deterministic(self):
        inter = [("u1", "a", 3), ("u2", "b", 1), ("u1", "b", 2)]
        ilines, tlines = make_native_lines(inter, [(k, [("t", "x")]) for k in "ab"])
        s1 = C.ingest(ilines, tlines).to_snapshot()
        s2 = C.ingest(list(ilines), list(tlines)).to_snapshot()
        assert s1 == s2

    def test_snapshot_round_trip(self, tiny_dataset):
        corp = tiny_dataset.corpus
        again = C.Corpus.from_snapshot(corp.to_snapshot())
        assert again.to_snapshot() == corp.to_snapshot()


def _naive_k_core(interactions, k):
    """Brute-force oracle: repeatedly delete any one offending user or item."""
    recs = list(interactions)
    while True:
        users = {}
        items = {}
        for u, i, _ in recs:
            users[u] = users.get(u, 0) + 1
            items[i] = items.get(i, 0) + 1
        bad_u = [u for u, c in users.items() if c < k]
        bad_i = [i for i, c in items.items() if c < k]
        if not bad_u and not bad_i:
            return {(u, i) for u, i, _ in recs}
        if bad_u:
            recs = [r for r in recs if r[0] != bad_u[0]]
        else:
            recs = [r for r in recs if r[1] != bad_i[0]]


def _surviving_pairs(corp):
    out = set()
    for u in range(corp.n_users):
        for it in corp.sequences[u]:
            out.add((corp.users[u], corp.items[it].item_key))
    return out


class TestKCore:
    def test_already_dense_is_fixpoint(self):
        # 6 users x 6 items, everyone interacts with everything: all counts >= 5
        inter = [(f"u{u}", f"it{i}", u * 10 + i) for u in range(6) for i in range(6)]
        ilines, tlines = make_native_lines(inter, _items(6))
        corp = C.ingest(ilines, tlines)
        filtered = C.apply_k_core(corp, 5)
        assert _surviving_pairs(filtered) == _surviving_pairs(corp)

    def test_cascade_matches_naive_oracle(self):
        # chain: removing the weakest item starves its users, cascading
        inter = []
        ts = 0
        for u in range(10):
            for i in range(u % 4 + 1):
                inter.append((f"u{u}", f"it{(u + i) % 6}", ts))
                ts += 1
        ilines, tlines = make_native_lines(inter, _items(6))
        corp = C.ingest(ilines, tlines)
        for k in (2, 3):
            assert _surviving_pairs(C.apply_k_core(corp, k)) == _naive_k_core(inter, k)

    def test_k1_drops_only_zero_interaction_entities(self):
        inter = [("u1", "a", 1), ("u1", "b", 2)]
        ilines, tlines = make_native_lines(inter, [(k, []) for k in ("a", "b", "orphan")])
        corp = C.ingest(ilines, tlines)
        assert corp.n_items == 3
        filtered = C.apply_k_core(corp, 1)
        assert {r.item_key for r in filtered.items} == {"a", "b"}
        assert filtered.n_users == 1

    def test_rerun_is_identity(self, tiny_dataset):
        corp = tiny_dataset.corpus  # already 3-core filtered
        again = C.apply_k_core(corp, 3)
        assert again.to_snapshot() == corp.to_snapshot()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(
        st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 50)),
        min_size=1, max_size=40,
    ), st.integers(1, 3), st.randoms())
    def test_order_independent(self, triples, k, rnd):
        inter = [(f"u{u}", f"it{i}", ts) for u, i, ts in triples]
        shuffled = inter[:]
        rnd.shuffle(shuffled)
        il1, tl1 = make_native_lines(inter, _items(6))
        il2, tl2 = make_native_lines(shuffled, _items(6))
        a = C.apply_k_core(C.ingest(il1, tl1), k)
        b = C.apply_k_core(C.ingest(il2, tl2), k)
        assert _surviving_pairs(a) == _surviving_pairs(b)


class TestSplit:
    def test_minimal_length(self):
        inter = [("u", "a", 1), ("u", "b", 2), ("u", "c", 3)]
        ilines, tlines = make_native_lines(inter, [(k, []) for k in "abc"])
        split = C.split_leave_one_out(C.ingest(ilines, tlines))
        corp = split.corpus
        names = lambda xs: [corp.items[i].item_key for i in xs]
        assert names(split.train[0]) == ["a"]
        assert corp.items[split.valid[0]].item_key == "b"
        assert corp.items[split.test[0]].item_key == "c"

    def test_short_user_excluded(self):
        inter = [("u", "a", 1), ("u", "b", 2)]
        ilines, tlines = make_native_lines(inter, [(k, []) for k in "ab"])
        split = C.split_leave_one_out(C.ingest(ilines, tlines))
        assert split.n_excluded == 1
        assert split.valid[0] is None and split.test[0] is None
        assert split.train[0] == split.corpus.sequences[0]  # still feeds CF training

    def test_reconstruction_oracle(self):
        rng = random.Random(11)
        inter = []
        ts = 0
        for u in range(50):
            for _ in range(rng.randint(1, 12)):
                inter.append((f"u{u}", f"it{rng.randint(0, 19)}", ts))
                ts += 1
        ilines, tlines = make_native_lines(inter, _items(20))
        corp = C.ingest(ilines, tlines)
        split = C.split_leave_one_out(corp)
        for u in range(corp.n_users):
            rebuilt = list(split.train[u])
            if split.valid[u] is not None:
                rebuilt += [split.valid[u], split.test[u]]
            assert rebuilt == corp.sequences[u]

    def test_history_modes(self, tiny_dataset):
        u = tiny_dataset.eval_users()[0]
        test_hist = tiny_dataset.history(u, "test")
        valid_hist = tiny_dataset.history(u, "valid")
        assert test_hist == valid_hist + [tiny_dataset.valid[u]]
