import numpy as np
import pytest

from mcr_stitch.aggregation import (
    AggregationConfig,
    Centricity,
    QuadrupleSet,
    add_gaussian_noise,
    build_training_set,
    generate_nonoverlap_centric,
    generate_overlap_centric,
    load_quadruples,
    save_quadruples,
    softmax_weighted_aggregate,
    transfer_weights_aggregate,
)
from mcr_stitch.store import EmbeddingMatrix, unit_rows

from conftest import random_unit_matrix


def cfg(**kw):
    defaults = dict(tau1=0.01, noise_variance=0.0, seed=0)
    defaults.update(kw)
    return AggregationConfig(**defaults)


class TestSoftmaxAggregate:
    def test_single_row_gallery(self, rng):
        g = random_unit_matrix(rng, 1, 5)
        out, w = softmax_weighted_aggregate(g.data[0].astype(np.float64), g, tau1=0.3)
        assert np.allclose(w, [1.0])
        assert np.allclose(out, g.data[0], atol=1e-7)

    def test_low_temperature_selects_nearest_neighbor(self, rng):
        for _ in range(20):
            g = random_unit_matrix(rng, 15, 8)
            q = unit_rows(rng.standard_normal((1, 8)))[0]
            out, _ = softmax_weighted_aggregate(q, g, tau1=1e-6)
            nearest = g.data[np.argmax(g.data.astype(np.float64) @ q)]
            assert np.abs(out - nearest).max() < 1e-5

    def test_high_temperature_approaches_mean(self, rng):
        g = random_unit_matrix(rng, 12, 6)
        q = unit_rows(rng.standard_normal((1, 6)))[0]
        out, _ = softmax_weighted_aggregate(q, g, tau1=1e6)
        assert np.abs(out - g.data.astype(np.float64).mean(axis=0)).max() < 1e-4

    def test_hand_computed_two_row_case(self):
        gallery = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]), normalized=True)
        out, w = softmax_weighted_aggregate(np.array([1.0, 0.0]), gallery, tau1=1.0)
        e = np.exp(1.0)
        expected = np.array([e, 1.0]) / (e + 1.0)
        assert np.allclose(w, expected, atol=1e-12)
        assert np.allclose(out, expected, atol=1e-12)
        assert w[0] == pytest.approx(0.7311, abs=1e-4)

    def test_weights_form_simplex(self, rng):
        for _ in range(50):
            g = random_unit_matrix(rng, int(rng.integers(1, 30)), 7)
            q = unit_rows(rng.standard_normal((1, 7)))[0]
            tau = float(rng.uniform(1e-3, 10.0))
            _, w = softmax_weighted_aggregate(q, g, tau)
            assert w.min() >= 0.0
            assert abs(w.sum() - 1.0) < 1e-6

    def test_convex_hull_bounds(self, rng):
        for _ in range(50):
            g = random_unit_matrix(rng, 10, 5)
            q = unit_rows(rng.standard_normal((1, 5)))[0]
            out, _ = softmax_weighted_aggregate(q, g, float(rng.uniform(0.005, 2.0)))
            gal = g.data.astype(np.float64)
            assert np.all(out >= gal.min(axis=0) - 1e-12)
            assert np.all(out <= gal.max(axis=0) + 1e-12)

    def test_dim_mismatch_and_bad_tau(self, rng):
        g = random_unit_matrix(rng, 3, 4)
        with pytest.raises(ValueError, match="dimension mismatch"):
            softmax_weighted_aggregate(np.ones(5), g, 0.1)
        with pytest.raises(ValueError, match="tau1"):
            softmax_weighted_aggregate(np.ones(4), g, 0.0)

    def test_top_k_truncation_renormalizes(self, rng):
        g = random_unit_matrix(rng, 20, 6)
        q = unit_rows(rng.standard_normal((1, 6)))[0]
        _, w = softmax_weighted_aggregate(q, g, 0.5, top_k=5)
        assert (w > 0).sum() == 5
        assert abs(w.sum() - 1.0) < 1e-9


class TestTransferWeights:
    def test_one_hot_selects_row(self, rng):
        g = random_unit_matrix(rng, 6, 4)
        w = np.zeros(6)
        w[3] = 1.0
        assert np.array_equal(transfer_weights_aggregate(w, g), g.data[3].astype(np.float64))

    def test_uniform_weights_give_mean(self):
        g = EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]), normalized=True)
        out = transfer_weights_aggregate(np.array([0.5, 0.5]), g)
        assert np.allclose(out, [0.5, 0.5])

    def test_matches_explicit_weighted_sum(self, rng):
        g = random_unit_matrix(rng, 4, 9)
        raw = rng.uniform(0.1, 1.0, 4)
        w = raw / raw.sum()
        out = transfer_weights_aggregate(w, g)
        explicit = sum(w[j] * g.data[j].astype(np.float64) for j in range(4))
        assert np.abs(out - explicit).max() < 1e-6

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="length mismatch"):
            transfer_weights_aggregate(np.ones(3) / 3, random_unit_matrix(rng, 4, 5))

    def test_simplex_violations(self, rng):
        g = random_unit_matrix(rng, 3, 5)
        with pytest.raises(ValueError, match="simplex"):
            transfer_weights_aggregate(np.array([0.9, 0.9, -0.8]), g)
        with pytest.raises(ValueError, match="simplex"):
            transfer_weights_aggregate(np.array([0.5, 0.5, 0.5]), g)


def matched_world(rng, n=10, dim=8):
    """Two spaces over the same items: per-space random rotations of shared latents."""
    latents = unit_rows(rng.standard_normal((n, dim)))

    def rotate(seed):
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, dim)))
        return latents @ (q * np.sign(np.diag(r))).T

    leaf_over = EmbeddingMatrix(unit_rows(rotate(1)), normalized=True)
    leaf_non = EmbeddingMatrix(unit_rows(rotate(1) @ np.diag([1] * dim)), normalized=True)
    base_over = EmbeddingMatrix(unit_rows(rotate(2)), normalized=True)
    base_non = EmbeddingMatrix(unit_rows(rotate(2)), normalized=True)
    return leaf_over, base_over, leaf_non, base_non


class TestOverlapCentric:
    def test_single_row_galleries(self, rng):
        leaf_over = random_unit_matrix(rng, 3, 6)
        base_over = random_unit_matrix(rng, 3, 6)
        leaf_gal = random_unit_matrix(rng, 1, 6)
        base_gal = random_unit_matrix(rng, 1, 6)
        quads = generate_overlap_centric(leaf_over, base_over, leaf_gal, base_gal, cfg())
        assert len(quads) == 3
        for q in quads:
            assert np.abs(q.leaf_nonoverlap - leaf_gal.data[0]).max() < 1e-6
            assert np.abs(q.base_nonoverlap - base_gal.data[0]).max() < 1e-6
            assert q.centricity == Centricity.OVERLAP

    def test_low_temperature_recovers_true_partners(self, rng):
        leaf_over, base_over, leaf_non, base_non = matched_world(rng)
        quads = generate_overlap_centric(leaf_over, base_over, leaf_non, base_non, cfg(tau1=1e-6))
        assert np.abs(quads.leaf_nonoverlap - leaf_non.data.astype(np.float64)).max() < 1e-5
        assert np.abs(quads.base_nonoverlap - base_non.data.astype(np.float64)).max() < 1e-5

    def test_one_quadruple_per_query(self, rng):
        leaf_over, base_over, leaf_non, base_non = matched_world(rng, n=17)
        quads = generate_overlap_centric(leaf_over, base_over, leaf_non, base_non, cfg())
        assert len(quads) == 17

    def test_row_count_mismatch(self, rng):
        leaf_over, base_over, leaf_non, base_non = matched_world(rng)
        short = EmbeddingMatrix(base_over.data[:5], normalized=True)
        with pytest.raises(ValueError, match="one-to-one"):
            generate_overlap_centric(leaf_over, short, leaf_non, base_non, cfg())


class TestNonoverlapCentric:
    def test_low_temperature_chain_selects_same_item(self, rng):
        leaf_over, base_over, _, _ = matched_world(rng, n=12)
        base_gal = base_over  # second stage retrieves within the matched set
        queries = EmbeddingMatrix(leaf_over.data[4:5], normalized=True)
        quads = generate_nonoverlap_centric(queries, leaf_over, base_over, base_gal, cfg(tau1=1e-6))
        q = quads[0]
        assert np.abs(q.leaf_overlap - leaf_over.data[4]).max() < 1e-5
        assert np.abs(q.base_overlap - base_over.data[4]).max() < 1e-5
        assert np.abs(q.base_nonoverlap - base_over.data[4]).max() < 1e-5
        assert q.centricity == Centricity.LEAF_NONOVERLAP

    def test_matches_straight_line_reimplementation(self, rng):
        dim = 8
        leaf_over = random_unit_matrix(rng, 3, dim)
        base_over = random_unit_matrix(rng, 3, dim)
        base_gal = random_unit_matrix(rng, 5, dim)
        queries = random_unit_matrix(rng, 3, dim)
        tau = 0.5
        quads = generate_nonoverlap_centric(queries, leaf_over, base_over, base_gal, cfg(tau1=tau))

        for i in range(3):
            q = queries.data[i].astype(np.float64)
            to = leaf_over.data.astype(np.float64)
            ti = base_over.data.astype(np.float64)
            vg = base_gal.data.astype(np.float64)
            logits = to @ q / tau
            w = np.exp(logits - logits.max())
            w /= w.sum()
            same_over = w @ to
            other_over = w @ ti
            second_query = other_over / np.linalg.norm(other_over)
            logits2 = vg @ second_query / tau
            w2 = np.exp(logits2 - logits2.max())
            w2 /= w2.sum()
            other_non = w2 @ vg

            got = quads[i]
            assert np.abs(got.leaf_nonoverlap - q).max() < 1e-6
            assert np.abs(got.leaf_overlap - same_over / np.linalg.norm(same_over)).max() < 1e-6
            assert np.abs(got.base_overlap - second_query).max() < 1e-6
            assert np.abs(got.base_nonoverlap - other_non / np.linalg.norm(other_non)).max() < 1e-6

    def test_symmetric_call_tags_base_centricity(self, rng):
        leaf_over, base_over, leaf_non, _ = matched_world(rng)
        queries = EmbeddingMatrix(base_over.data[:4], normalized=True)
        quads = generate_nonoverlap_centric(
            queries, base_over, leaf_over, leaf_non, cfg(), centricity=Centricity.BASE_NONOVERLAP
        )
        assert all(q.centricity == Centricity.BASE_NONOVERLAP for q in quads)
        assert np.abs(quads.base_nonoverlap - queries.data.astype(np.float64)).max() == 0.0

    def test_chain_consistency_at_low_temperature(self, rng):
        # All four members resolve to the same ground-truth index.
        leaf_over, base_over, leaf_non_m, base_non_m = matched_world(rng, n=15)
        queries = EmbeddingMatrix(leaf_non_m.data, normalized=True)
        quads = generate_nonoverlap_centric(
            queries, leaf_non_m, base_non_m, base_over, cfg(tau1=1e-6)
        )
        for i in [0, 7, 14]:
            q = quads[i]
            assert np.abs(q.leaf_overlap - leaf_non_m.data[i]).max() < 1e-5
            assert np.abs(q.base_overlap - base_non_m.data[i]).max() < 1e-5
            assert np.abs(q.base_nonoverlap - base_over.data[i]).max() < 1e-5

    def test_rejects_overlap_centricity(self, rng):
        leaf_over, base_over, leaf_non, base_non = matched_world(rng)
        with pytest.raises(ValueError, match="overlap-centric"):
            generate_nonoverlap_centric(
                leaf_non, leaf_over, base_over, base_non, cfg(), centricity=Centricity.OVERLAP
            )


class TestNoise:
    def quads(self, rng, n=40, dim=10):
        cols = [unit_rows(rng.standard_normal((n, dim))) for _ in range(4)]
        return QuadrupleSet(*cols, np.zeros(n, dtype=np.uint8))

    def test_zero_variance_is_identity(self, rng):
        q = self.quads(rng)
        out = add_gaussian_noise(q, 0.0, seed=5)
        assert out is q

    def test_noise_standard_deviation(self, rng):
        n, dim = 2500, 100  # 4 fields x 2500 x 100 = 1e6 draws
        q = self.quads(rng, n=n, dim=dim)
        out = add_gaussian_noise(q, 0.004, seed=1, renormalize=False)
        deltas = np.concatenate(
            [getattr(out, f) - getattr(q, f) for f in QuadrupleSet.FIELDS]
        ).ravel()
        target = np.sqrt(0.004)
        assert abs(deltas.std() - target) / target < 0.02

    def test_deterministic_given_seed(self, rng):
        q = self.quads(rng)
        a = add_gaussian_noise(q, 0.004, seed=9)
        b = add_gaussian_noise(q, 0.004, seed=9)
        for f in QuadrupleSet.FIELDS:
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_renormalize_keeps_unit_rows(self, rng):
        out = add_gaussian_noise(self.quads(rng), 0.05, seed=2, renormalize=True)
        for f in QuadrupleSet.FIELDS:
            norms = np.linalg.norm(getattr(out, f), axis=1)
            assert np.abs(norms - 1.0).max() < 1e-12


class TestTrainingSet:
    def lists(self, rng, sizes=(2, 3, 5)):
        out = []
        for tag, size in enumerate(sizes):
            cols = [unit_rows(rng.standard_normal((size, 4))) for _ in range(4)]
            out.append(QuadrupleSet(*cols, np.full(size, tag % 3, dtype=np.uint8)))
        return out

    def test_concatenation_size(self, rng):
        combined = build_training_set(self.lists(rng), cfg(seed=3))
        assert len(combined) == 10

    def test_same_seed_same_order(self, rng):
        lists = self.lists(rng, sizes=(6, 7, 8))
        a = build_training_set(lists, cfg(seed=3))
        b = build_training_set(lists, cfg(seed=3))
        assert np.array_equal(a.leaf_overlap, b.leaf_overlap)

    def test_different_seeds_differ(self, rng):
        lists = self.lists(rng, sizes=(10, 10, 10))
        a = build_training_set(lists, cfg(seed=3))
        b = build_training_set(lists, cfg(seed=4))
        assert not np.array_equal(a.leaf_overlap, b.leaf_overlap)

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_training_set([], cfg())


class TestQuadrupleCache:
    def test_round_trip(self, rng, tmp_path):
        cols = [unit_rows(rng.standard_normal((9, 5))).astype(np.float32) for _ in range(4)]
        q = QuadrupleSet(*cols, np.array([0, 1, 2, 0, 1, 2, 0, 1, 2], dtype=np.uint8))
        path = tmp_path / "quads.pqd1"
        save_quadruples(q, path)
        assert path.read_bytes()[:4] == b"PQD1"
        loaded = load_quadruples(path)
        assert len(loaded) == 9 and loaded.dim == 5
        for f in QuadrupleSet.FIELDS:
            assert np.array_equal(
                getattr(loaded, f).astype(np.float32), getattr(q, f).astype(np.float32)
            )
        assert np.array_equal(loaded.centricity, q.centricity)
        assert loaded.counts_by_centricity()[Centricity.OVERLAP] == 3

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.pqd1"
        path.write_bytes(b"GARBAGEGARBAGE")
        with pytest.raises(Exception, match="PQD1"):
            load_quadruples(path)
