"""Codebook, binary aggregation, kernel scoring, and inverted-file search."""

import numpy as np
import pytest
import torch

from superfeat.asmk import (aggregate_binarize, assign_words, BinarySignature,
                            build_signature_index, Codebook, hamming_distance,
                            kernel_score, load_index, memory_footprint, pack_bits,
                            save_index, search_signatures, select_top_features,
                            train_codebook)
from superfeat.errors import IndexEmpty, NoFeatures

from conftest import make_feature_set, random_unit_rows


def brute_force_ranking(index, q_sigs):
    """Naive per-image scoring: shared words ascending, selective sum,
    normalized by sqrt of the integer count product."""
    q_by_word = {s.word: s.bits for s in q_sigs}
    b = index.bits
    scores = []
    for i, name in enumerate(index.image_names):
        total = np.float64(0.0)
        for word in sorted(q_by_word):
            ids = index.posting_ids.get(word)
            if ids is None:
                continue
            pos = np.flatnonzero(ids == i)
            if pos.size == 0:
                continue
            bits = index.posting_bits[word][pos[0]]
            u = np.float64(b - 2 * hamming_distance(q_by_word[word], bits)) / b
            if u > index.tau:
                total += u ** np.float64(index.alpha)
        norm = np.sqrt(np.float64(len(q_sigs) * index.cluster_counts[i]))
        scores.append(float(total / norm))
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return [(index.image_names[i], scores[i]) for i in order]


class TestSelectTopFeatures:
    def make_sets(self, rng, scales, n=6):
        sets = []
        for scale in scales:
            s = make_feature_set(random_unit_rows(rng, n, 8), scale=scale)
            s.strengths = torch.from_numpy(rng.random(n) * 10)
            sets.append(s)
        return sets

    def test_under_budget_returns_all(self):
        rng = np.random.default_rng(0)
        sets = self.make_sets(rng, [1.0, 0.5])
        assert len(select_top_features(sets, budget=100)) == 12

    def test_strongest_wins(self):
        rng = np.random.default_rng(1)
        sets = self.make_sets(rng, [1.0])
        sets[0].strengths = torch.ones(6, dtype=torch.float64)
        sets[0].strengths[3] = 10.0
        top = select_top_features(sets, budget=1)
        assert top[0].feature_id == 3 and top[0].strength == 10.0

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(2)
        sets = self.make_sets(rng, [2.0, 1.0, 0.5], n=10)
        got = select_top_features(sets, budget=12)
        candidates = []
        for s in sets:
            for fid in range(10):
                candidates.append((float(s.strengths[fid]), float(s.scale), fid))
        candidates.sort(key=lambda c: (-c[0], -c[1], c[2]))
        expected = candidates[:12]
        assert [(c.strength, c.scale, c.feature_id) for c in got] == expected

    def test_unusable_excluded(self):
        rng = np.random.default_rng(3)
        sets = self.make_sets(rng, [1.0])
        sets[0].usable = torch.tensor([True, False, True, False, True, True])
        got = select_top_features(sets, budget=10)
        assert len(got) == 4
        assert all(c.feature_id not in (1, 3) for c in got)


class TestCodebook:
    def test_two_blobs(self):
        rng = np.random.default_rng(0)
        blob_a = rng.normal(size=(200, 4)) * 0.05 + np.array([1, 0, 0, 0])
        blob_b = rng.normal(size=(200, 4)) * 0.05 + np.array([0, 1, 0, 0])
        cb = train_codebook(np.vstack([blob_a, blob_b]), k=2, seed=0)
        means = sorted([blob_a.mean(0), blob_b.mean(0)], key=lambda v: v[0])
        got = sorted(cb.centroids, key=lambda v: v[0])
        for centroid, mean in zip(got, means):
            assert np.linalg.norm(centroid - mean) < 0.05

    def test_k_equals_m_zero_cost(self):
        rng = np.random.default_rng(1)
        points = random_unit_rows(rng, 12, 6)
        cb = train_codebook(points, k=12, seed=0)
        words = assign_words(points, cb)
        cost = ((points - cb.centroids[words]) ** 2).sum()
        assert cost == pytest.approx(0.0, abs=1e-20)

    def test_same_seed_identical(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(100, 8))
        a = train_codebook(points, k=5, seed=3)
        b = train_codebook(points, k=5, seed=3)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_empty_cluster_reseeded(self, caplog):
        """A duplicated point forces an empty cluster at k = m (only 5
        distinct values for 6 centroids): the reseed is logged and the
        centroids stay finite with every distinct point covered."""
        rng = np.random.default_rng(4)
        points = rng.normal(size=(6, 4))
        points[5] = points[0]
        with caplog.at_level("INFO", logger="superfeat.asmk"):
            cb = train_codebook(points, k=6, seed=0)
        assert np.isfinite(cb.centroids).all()
        words = assign_words(points, cb)
        assert len(set(words.tolist())) == 5
        cost = ((points - cb.centroids[words]) ** 2).sum()
        assert cost == pytest.approx(0.0, abs=1e-20)
        assert any("EmptyClusterResolved" in r.message for r in caplog.records)

    def test_m_below_k_rejected(self):
        with pytest.raises(ValueError):
            train_codebook(np.zeros((3, 4)), k=5, seed=0)


class TestAggregateBinarize:
    def test_single_feature_sign(self):
        cb = Codebook(centroids=np.zeros((1, 8)))
        feat = np.array([[0.5, -0.5, 0.25, -0.25, 1, -1, 0.0, 2.0]])
        sigs, gamma = aggregate_binarize(feat, cb)
        assert len(sigs) == 1 and gamma == 1.0
        expected = pack_bits(feat[0] >= 0)
        np.testing.assert_array_equal(sigs[0].bits, expected)

    def test_canceling_residuals_tie_to_one(self):
        cb = Codebook(centroids=np.zeros((1, 8)))
        row = np.array([0.5, -0.5, 0.25, -0.25, 1, -1, 0.5, -2.0])
        sigs, _ = aggregate_binarize(np.stack([row, -row]), cb)
        np.testing.assert_array_equal(sigs[0].bits, pack_bits(np.ones(8, dtype=bool)))

    def test_gamma_equals_inverse_sqrt_word_count(self):
        rng = np.random.default_rng(0)
        feats = random_unit_rows(rng, 50, 8)
        cb = train_codebook(random_unit_rows(rng, 200, 8), k=12, seed=0)
        sigs, gamma = aggregate_binarize(feats, cb)
        distinct = len(set(assign_words(feats, cb).tolist()))
        assert len(sigs) == distinct
        assert gamma == pytest.approx(1.0 / np.sqrt(distinct), abs=1e-15)

    def test_no_features(self):
        cb = Codebook(centroids=np.zeros((1, 8)))
        with pytest.raises(NoFeatures):
            aggregate_binarize(np.zeros((0, 8)), cb)


class TestKernelScore:
    def test_no_shared_words_zero(self):
        a = [BinarySignature(0, np.zeros(2, dtype=np.uint8))]
        b = [BinarySignature(1, np.zeros(2, dtype=np.uint8))]
        assert kernel_score(a, b, 1.0, 1.0) == 0.0

    def test_identical_sets_self_normalized(self):
        rng = np.random.default_rng(0)
        sigs = [BinarySignature(w, rng.integers(0, 256, 2).astype(np.uint8))
                for w in range(3)]
        gamma = 1.0 / np.sqrt(3)
        assert kernel_score(sigs, sigs, gamma, gamma) == pytest.approx(1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = [BinarySignature(w, rng.integers(0, 256, 2).astype(np.uint8))
             for w in (0, 2, 5)]
        b = [BinarySignature(w, rng.integers(0, 256, 2).astype(np.uint8))
             for w in (2, 3, 5)]
        assert kernel_score(a, b, 0.5, 0.7) == kernel_score(b, a, 0.7, 0.5)

    def test_planted_overlap_hand_formula(self):
        """Three shared words with known Hamming distances 0, 2, 5 over
        16 bits, alpha=3, tau=0."""
        bits = 16
        base = [np.unpackbits(np.frombuffer(bytes([i * 37 % 256, i * 91 % 256]),
                                            dtype=np.uint8), bitorder="little")
                for i in range(3)]
        flips = [0, 2, 5]
        a_sigs, b_sigs = [], []
        for w, (pattern, flip) in enumerate(zip(base, flips)):
            other = pattern.copy()
            other[:flip] ^= 1
            a_sigs.append(BinarySignature(w, np.packbits(pattern, bitorder="little")))
            b_sigs.append(BinarySignature(w, np.packbits(other, bitorder="little")))
        expected = sum(((bits - 2 * f) / bits) ** 3 for f in flips)
        got = kernel_score(a_sigs, b_sigs, 1.0, 1.0, alpha=3.0, tau=0.0)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_threshold_cuts_weak_matches(self):
        bits = np.zeros(2, dtype=np.uint8)
        noisy = np.array([0xFF, 0x00], dtype=np.uint8)  # hamming 8 of 16 -> u = 0
        a = [BinarySignature(0, bits)]
        b = [BinarySignature(0, noisy)]
        assert kernel_score(a, b, 1.0, 1.0, alpha=3.0, tau=0.0) == 0.0


class TestIndex:
    def build_corpus(self, seed=0, images=10, dim=16, k=8):
        rng = np.random.default_rng(seed)
        cb = train_codebook(random_unit_rows(rng, 300, dim), k=k, seed=seed)
        items = []
        for i in range(images):
            feats = random_unit_rows(rng, int(rng.integers(5, 30)), dim)
            sigs, _ = aggregate_binarize(feats, cb)
            items.append((f"img{i:03d}", sigs))
        return build_signature_index(cb, dim, items), items

    def test_empty_index_rejected(self):
        cb = Codebook(centroids=np.zeros((2, 8)))
        with pytest.raises(IndexEmpty):
            build_signature_index(cb, 8, [])

    def test_self_retrieval_exactly_one(self):
        index, items = self.build_corpus()
        for name, sigs in items:
            top = search_signatures(index, sigs, top_m=1)[0]
            assert top[0] == name
            assert top[1] == 1.0

    def test_search_equals_brute_force(self):
        index, items = self.build_corpus(seed=1)
        for name, sigs in items:
            assert search_signatures(index, sigs) == brute_force_ranking(index, sigs)

    def test_top_m_prefix(self):
        index, items = self.build_corpus(seed=2)
        full = search_signatures(index, items[0][1])
        assert search_signatures(index, items[0][1], top_m=3) == full[:3]

    def test_no_shared_words_scores_zero_and_rank_last(self):
        index, items = self.build_corpus(seed=3, k=4)
        alien = [BinarySignature(w + 100, items[0][1][0].bits) for w in range(2)]
        results = search_signatures(index, alien)
        assert all(score == 0.0 for _, score in results)

    def test_cluster_counts_bounded(self):
        index, items = self.build_corpus(seed=4)
        per_image, average = memory_footprint(index)
        for (name, sigs), count in zip(items, index.cluster_counts):
            assert per_image[name] == len(sigs)
            assert count <= index.codebook.k
        assert average == pytest.approx(np.mean(index.cluster_counts))

    def test_serialization_roundtrip_byte_identical(self, tmp_path):
        index, items = self.build_corpus(seed=5)
        path_a = tmp_path / "a.bin"
        path_b = tmp_path / "b.bin"
        save_index(index, path_a)
        save_index(load_index(path_a), path_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        reloaded = load_index(path_a)
        for name, sigs in items:
            assert search_signatures(reloaded, sigs) == \
                search_signatures(index, sigs)

    def test_rebuild_deterministic(self, tmp_path):
        index_a, _ = self.build_corpus(seed=6)
        index_b, _ = self.build_corpus(seed=6)
        save_index(index_a, tmp_path / "a.bin")
        save_index(index_b, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
