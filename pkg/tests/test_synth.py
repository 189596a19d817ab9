import numpy as np
import pytest

from mcr_stitch.evaluation import simulate_random_ranking, retrieval_eval
from mcr_stitch.store import load_embeddings
from mcr_stitch.synth import (
    FOUR_MODALITY_SPACES,
    SpaceSpec,
    SynthWorldConfig,
    generate_world,
    load_ground_truth,
    make_fourmodality_scenario,
    oracle_retrieval,
    write_world,
)


def small_config(**kw):
    defaults = dict(
        latent_dim=6, embed_dim=12, n_items=80, n_holdout=20,
        modality_gap_magnitude=0.5, observation_noise_sigma=0.02, seed=1,
    )
    defaults.update(kw)
    return SynthWorldConfig(**defaults)


class TestGenerateWorld:
    def test_deterministic_given_seed(self):
        a = generate_world(small_config())
        b = generate_world(small_config())
        for key in a.keys():
            assert np.array_equal(a.matrix(*key).data, b.matrix(*key).data)

    def test_different_seed_differs(self):
        a = generate_world(small_config(seed=1))
        b = generate_world(small_config(seed=2))
        key = a.keys()[0]
        assert not np.array_equal(a.matrix(*key).data, b.matrix(*key).data)

    def test_zero_gap_zero_noise_modalities_identical(self):
        cfg = small_config(
            modality_gap_magnitude=0.0, observation_noise_sigma=0.0,
            spaces=(SpaceSpec("solo", ("m1", "m2")),),
        )
        world = generate_world(cfg)
        assert np.array_equal(world.matrix("solo", "m1").data, world.matrix("solo", "m2").data)

    def test_gap_offset_gives_constant_cross_modal_cosine(self):
        world = generate_world(small_config(observation_noise_sigma=0.0))
        m1 = world.matrix("base", "alpha").data.astype(np.float64)
        m2 = world.matrix("base", "beta").data.astype(np.float64)
        cosines = (m1 * m2).sum(axis=1)
        assert cosines.max() - cosines.min() < 1e-6

    def test_increasing_gap_decreases_cross_modal_cosine(self):
        means = []
        for gap in (0.0, 0.25, 0.5, 1.0, 2.0):
            world = generate_world(small_config(modality_gap_magnitude=gap,
                                                observation_noise_sigma=0.0))
            m1 = world.matrix("base", "alpha").data.astype(np.float64)
            m2 = world.matrix("base", "beta").data.astype(np.float64)
            means.append(float((m1 * m2).sum(axis=1).mean()))
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_gap_needs_complement_room(self):
        with pytest.raises(ValueError, match="orthogonal complement"):
            SynthWorldConfig(latent_dim=8, embed_dim=8, modality_gap_magnitude=0.5)

    def test_unit_rows_everywhere(self):
        world = generate_world(small_config())
        for key in world.keys():
            norms = np.linalg.norm(world.matrix(*key).data.astype(np.float64), axis=1)
            assert np.abs(norms - 1.0).max() < 1e-5


class TestOracleRetrieval:
    def test_perfect_within_space_without_noise(self):
        world = generate_world(small_config(observation_noise_sigma=0.0))
        report = oracle_retrieval(world, ("base", "alpha"), ("base", "beta"), split="all")
        assert report.map == 1.0

    def test_cross_space_overlap_without_noise(self):
        world = generate_world(small_config(observation_noise_sigma=0.0))
        report = oracle_retrieval(world, ("base", "alpha"), ("leaf1", "alpha"), split="all")
        assert report.map == 1.0

    def test_default_scale_world_is_near_perfect(self):
        world = generate_world(SynthWorldConfig(seed=3))
        report = oracle_retrieval(world, ("base", "alpha"), ("base", "beta"), split="train")
        assert report.r_at[1] >= 0.99

    def test_large_noise_degrades_toward_random(self):
        world = generate_world(small_config(observation_noise_sigma=2.0, n_items=150))
        report = oracle_retrieval(world, ("base", "alpha"), ("base", "beta"), split="train")
        sim = simulate_random_ranking(150, 150, trials=300, seed=5)
        mean, std = sim["mAP"]
        assert report.map < 0.5
        assert report.map < mean + 10 * std  # way below clean-world performance

    def test_unknown_modality(self):
        world = generate_world(small_config())
        with pytest.raises(KeyError, match="unknown"):
            oracle_retrieval(world, ("base", "nope"), ("base", "beta"))

    def test_raw_cross_space_is_random(self):
        # Different frames: no alignment without a trained projector.
        world = generate_world(small_config(n_items=300, n_holdout=0))
        q = world.train_rows("leaf1", "gamma")
        g = world.train_rows("base", "beta")
        report = retrieval_eval(q, g, np.arange(300), ks=(1, 5))
        sim = simulate_random_ranking(300, 300, trials=500, seed=11)
        mean, std = sim["mAP"]
        assert abs(report.map - mean) <= 3 * std


class TestFourModality:
    def test_six_sets_with_shared_items(self):
        world = make_fourmodality_scenario(small_config(spaces=FOUR_MODALITY_SPACES))
        assert sorted(world.keys()) == sorted(
            [("base", "alpha"), ("base", "beta"), ("leaf1", "alpha"),
             ("leaf1", "gamma"), ("leaf2", "beta"), ("leaf2", "delta")]
        )

    def test_all_cross_set_oracles_perfect_without_noise(self):
        world = make_fourmodality_scenario(
            small_config(spaces=FOUR_MODALITY_SPACES, observation_noise_sigma=0.0)
        )
        keys = world.keys()
        for qk in keys:
            for gk in keys:
                if qk == gk:
                    continue
                assert oracle_retrieval(world, qk, gk, split="all").map == 1.0


class TestWorldFiles:
    def test_write_and_reload(self, tmp_path):
        world = generate_world(small_config())
        inventory = write_world(world, tmp_path)
        assert set(inventory["sets"]) == {f"{s}.{m}" for s, m in world.keys()}
        matrix, manifest = load_embeddings(inventory["sets"]["base.alpha"]["train"])
        assert matrix.rows == 80 and manifest.space_id == "base"
        assert manifest.normalized
        holdout, _ = load_embeddings(inventory["sets"]["base.alpha"]["holdout"])
        assert holdout.rows == 20
        gt = load_ground_truth(inventory["ground_truth"])
        assert gt.n_items == 100

    def test_written_files_deterministic(self, tmp_path):
        inv1 = write_world(generate_world(small_config()), tmp_path / "a")
        inv2 = write_world(generate_world(small_config()), tmp_path / "b")
        from pathlib import Path
        a = Path(inv1["sets"]["leaf1.gamma"]["train"]).read_bytes()
        b = Path(inv2["sets"]["leaf1.gamma"]["train"]).read_bytes()
        assert a == b
