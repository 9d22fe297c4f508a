import numpy as np
import pytest

from lexrec import _sgns_np, cfembed
from lexrec import corpus as C
from tests.conftest import make_native_lines


def _split_from_sequences(sequences, n_items):
    """Build a SplitCorpus directly from item-index sequences."""
    items = [C.ItemRecord(f"it{i}", (("title", f"t{i}"),)) for i in range(n_items)]
    corp = C.Corpus(
        users=[f"u{u}" for u in range(len(sequences))],
        items=items,
        sequences=[list(s) for s in sequences],
    )
    return C.split_leave_one_out(corp)


def _planted_block_split(n_users=80, seq_len=14, seed=5):
    """Two blocks of 25 items; within-block transition probability 0.9."""
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n_users):
        cur = int(rng.integers(50))
        seq = [cur]
        for _ in range(seq_len - 1):
            block = cur // 25
            if rng.random() < 0.9:
                cur = block * 25 + int(rng.integers(25))
            else:
                cur = (1 - block) * 25 + int(rng.integers(25))
            seq.append(cur)
        seqs.append(seq)
    return _split_from_sequences(seqs, 50)


class TestTrainCf:
    def test_degenerate_single_repeated_item(self):
        split = _split_from_sequences([[0, 0, 0, 0]], 1)
        emb = cfembed.train_cf(split, cfembed.CfConfig(dims=8, epochs=2, seed=0))
        assert np.all(np.isfinite(emb.vectors))

    def test_planted_blocks_have_higher_within_similarity(self):
        split = _planted_block_split()
        emb = cfembed.train_cf(
            split, cfembed.CfConfig(dims=32, window=2, negatives=5, epochs=8, seed=0)
        )
        sims = emb.vectors @ emb.vectors.T
        mask_within = np.zeros((50, 50), dtype=bool)
        mask_within[:25, :25] = True
        mask_within[25:, 25:] = True
        np.fill_diagonal(mask_within, False)
        mask_cross = ~mask_within
        np.fill_diagonal(mask_cross, False)
        assert sims[mask_within].mean() > sims[mask_cross].mean()

    def test_same_seed_bitwise_identical(self):
        split = _planted_block_split(n_users=20)
        cfg = cfembed.CfConfig(dims=16, epochs=2, seed=9)
        a = cfembed.train_cf(split, cfg)
        b = cfembed.train_cf(split, cfg)
        assert np.array_equal(a.vectors, b.vectors)

    def test_empty_training_data_errors(self):
        split = _split_from_sequences([], 3)
        with pytest.raises(ValueError, match="no training pairs"):
            cfembed.train_cf(split, cfembed.CfConfig())

    def test_never_touches_eval_only_items(self):
        # items 5 and 6 appear only as valid/test targets; their rows must
        # stay at initialization (never a center, context, or negative).
        seqs = [[0, 1, 2, 0, 1, 5, 6], [1, 2, 0, 2, 1, 5, 6]]
        split = _split_from_sequences(seqs, 7)
        assert all(5 not in t and 6 not in t for t in split.train)
        cfg = cfembed.CfConfig(dims=8, epochs=3, seed=4)
        emb = cfembed.train_cf(split, cfg)
        rng = np.random.default_rng(cfg.seed)
        init = (rng.random((7, 8)) - 0.5) / 8
        assert np.array_equal(emb.vectors[5], init[5])
        assert np.array_equal(emb.vectors[6], init[6])
        assert not np.array_equal(emb.vectors[0], init[0])


class TestTopK:
    def test_orthonormal_tie_break(self):
        emb = cfembed.CfEmbeddings(vectors=np.eye(3))
        for i in range(3):
            top = cfembed.top_k_similar(emb, i, 1)
            expected = min(j for j in range(3) if j != i)
            assert top[0][0] == expected
            assert top[0][1] == 0.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(12)
        emb = cfembed.CfEmbeddings(vectors=rng.standard_normal((50, 16)))
        for i in range(50):
            got = cfembed.top_k_similar(emb, i, 10)
            # independent pairwise dots; scores can differ in the last ulp
            oracle = sorted(
                ((j, float(np.dot(emb.vectors[j], emb.vectors[i]))) for j in range(50) if j != i),
                key=lambda t: (-t[1], t[0]),
            )[:10]
            assert [j for j, _ in got] == [j for j, _ in oracle]
            np.testing.assert_allclose(
                [s for _, s in got], [s for _, s in oracle], rtol=1e-10
            )

    def test_invariants_no_self_no_dups_monotone(self):
        rng = np.random.default_rng(7)
        emb = cfembed.CfEmbeddings(vectors=rng.standard_normal((30, 8)))
        for i in range(30):
            got = cfembed.top_k_similar(emb, i, 12)
            idxs = [j for j, _ in got]
            assert i not in idxs
            assert len(set(idxs)) == len(idxs)
            scores = [s for _, s in got]
            assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_oracle_equivalence_full_sort(self):
        rng = np.random.default_rng(3)
        n = 120
        emb = cfembed.CfEmbeddings(vectors=rng.standard_normal((n, 4)))
        i = 17
        got = cfembed.top_k_similar(emb, i, n - 1)
        oracle = sorted(
            ((j, float(np.dot(emb.vectors[j], emb.vectors[i]))) for j in range(n) if j != i),
            key=lambda t: (-t[1], t[0]),
        )
        assert [j for j, _ in got] == [j for j, _ in oracle]

    def test_k_out_of_range(self):
        emb = cfembed.CfEmbeddings(vectors=np.eye(3))
        with pytest.raises(ValueError):
            cfembed.top_k_similar(emb, 0, 3)
        with pytest.raises(ValueError):
            cfembed.top_k_similar(emb, 0, 0)

    def test_cosine_option(self):
        vecs = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
        emb = cfembed.CfEmbeddings(vectors=vecs)
        top = cfembed.top_k_similar(emb, 0, 2, similarity="cosine")
        assert top[0][0] == 1 and top[0][1] == pytest.approx(1.0)


class TestImportExport:
    def test_text_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = cfembed.CfEmbeddings(vectors=rng.standard_normal((5, 3)))
        path = str(tmp_path / "emb.txt")
        cfembed.export_text(emb, path)
        again = cfembed.import_embeddings(path, expected_count=5, expected_dims=3)
        assert np.array_equal(again.vectors, emb.vectors)

    def test_binary_round_trip_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = cfembed.CfEmbeddings(vectors=rng.standard_normal((4, 6)))
        path = str(tmp_path / "emb.bin")
        cfembed.export_binary(emb, path)
        again = cfembed.import_embeddings(path)
        assert np.array_equal(again.vectors, emb.vectors.astype(np.float32).astype(np.float64))

    def test_count_mismatch_reports_expected_vs_actual(self, tmp_path):
        emb = cfembed.CfEmbeddings(vectors=np.eye(4))
        path = str(tmp_path / "emb.txt")
        cfembed.export_text(emb, path)
        with pytest.raises(ValueError, match="expected 9, got 4"):
            cfembed.import_embeddings(path, expected_count=9)
        with pytest.raises(ValueError, match="expected 2, got 4"):
            cfembed.import_embeddings(path, expected_dims=2)


@pytest.mark.skipif(cfembed._sgns_fast is None, reason="compiled kernel not built")
class TestKernelParity:
    def _data(self):
        rng = np.random.default_rng(42)
        n, d, pairs, neg = 20, 16, 300, 5
        w_in = (rng.random((n, d)) - 0.5) / d
        w_out = np.zeros((n, d))
        centers = rng.integers(0, n, size=pairs).astype(np.int64)
        contexts = rng.integers(0, n, size=pairs).astype(np.int64)
        negs = rng.integers(0, n, size=(pairs, neg)).astype(np.int64)
        return w_in, w_out, centers, contexts, negs

    def test_fast_and_fallback_agree(self):
        w_in_a, w_out_a, c, o, negs = self._data()
        w_in_b, w_out_b = w_in_a.copy(), w_out_a.copy()
        loss_a = cfembed._sgns_fast.train_pairs(w_in_a, w_out_a, c, o, negs, 0.05, 0.001, 0, len(c))
        loss_b = _sgns_np.train_pairs(w_in_b, w_out_b, c, o, negs, 0.05, 0.001, 0, len(c))
        np.testing.assert_allclose(w_in_a, w_in_b, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(w_out_a, w_out_b, rtol=1e-9, atol=1e-12)
        assert loss_a == pytest.approx(loss_b, rel=1e-9)

    def test_env_var_forces_fallback(self, monkeypatch):
        monkeypatch.setenv("LEXREC_PURE_PYTHON", "1")
        assert cfembed.active_kernel() == "numpy"
        monkeypatch.delenv("LEXREC_PURE_PYTHON")
        assert cfembed.active_kernel() == "cython"

    def test_full_training_rankings_agree(self, monkeypatch):
        split = _planted_block_split(n_users=30, seq_len=10)
        cfg = cfembed.CfConfig(dims=16, epochs=3, seed=1)
        fast = cfembed.train_cf(split, cfg)
        monkeypatch.setenv("LEXREC_PURE_PYTHON", "1")
        slow = cfembed.train_cf(split, cfg)
        np.testing.assert_allclose(fast.vectors, slow.vectors, rtol=1e-6, atol=1e-9)
        for i in range(0, 50, 7):
            assert [j for j, _ in cfembed.top_k_similar(fast, i, 5)] == [
                j for j, _ in cfembed.top_k_similar(slow, i, 5)
            ]
