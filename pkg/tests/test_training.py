"""Trainer contracts: mining, tuple construction, determinism, divergence."""

import json

import numpy as np
import pytest
import torch

from superfeat.config import RunConfig, apply_overrides
from superfeat.errors import DivergenceDetected, PoolTooSmall
from superfeat.synthetic import generate_synthetic_dataset
from superfeat.training import (build_epoch_tuples, match_ratio,
                                measure_match_stats, mine_hard_negatives,
                                per_id_match_histogram, train)


def tiny_config(**overrides) -> RunConfig:
    """A seconds-scale configuration for trainer unit tests."""
    base = [
        "data.train_classes=4", "data.train_images_per_class=2",
        "data.val_classes=2", "data.val_images_per_class=2",
        "data.eval_classes=2", "data.eval_images_per_class=2",
        "data.image_size=32",
        "encoder.dim=16", "encoder.base_channels=4",
        "templates.count=4", "templates.dim=16", "templates.iterations=2",
        "whitening.out_dim=8",
        "train.epochs=2", "train.batches_per_epoch=2", "train.tuples_per_batch=2",
        "train.negatives=2", "train.val_every=2", "train.val_codebook_size=4",
        "retrieval.scales=[1.0,0.5]", "retrieval.budget=8",
        "retrieval.codebook_size=8",
    ]
    base += [f"{k}={v}" for k, v in overrides.items()]
    return apply_overrides(RunConfig(), base)


class TestMining:
    def test_near_duplicate_selected_first(self):
        descs = np.eye(5)
        descs[4] = descs[0] + 1e-3  # near-duplicate of the anchor
        labels = [0, 1, 2, 3, 4]
        picks = mine_hard_negatives(descs, labels, per_tuple=2)
        assert picks[0][0] == 4

    def test_pool_too_small(self):
        with pytest.raises(PoolTooSmall):
            mine_hard_negatives(np.eye(3), [0, 0, 1], per_tuple=2)

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(0)
        descs = rng.normal(size=(20, 8))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        labels = rng.integers(0, 4, size=20).tolist()
        picks = mine_hard_negatives(descs, labels, per_tuple=3)
        for i in range(20):
            candidates = [(np.linalg.norm(descs[j] - descs[i]), j)
                          for j in range(20) if labels[j] != labels[i]]
            expected = [j for _, j in sorted(candidates, key=lambda c: (c[0], c[1]))[:3]]
            assert picks[i] == expected

    def test_negatives_never_share_label(self):
        rng = np.random.default_rng(1)
        descs = rng.normal(size=(12, 4))
        labels = rng.integers(0, 3, size=12).tolist()
        picks = mine_hard_negatives(descs, labels, per_tuple=2)
        for i, row in enumerate(picks):
            assert all(labels[j] != labels[i] for j in row)


class TestMatchRatioAndHistogram:
    def test_no_negative_matches_is_one(self):
        assert match_ratio([(3, 0), (2, 0)]) == 1.0

    def test_equal_counts_half(self):
        assert match_ratio([(2, 1), (1, 2)]) == 0.5

    def test_no_matches_undefined(self):
        assert match_ratio([(0, 0)]) is None

    def test_histogram_all_matched(self):
        percent, summary = per_id_match_histogram([10, 10, 10], num_tuples=10)
        np.testing.assert_array_equal(percent, [100.0, 100.0, 100.0])
        assert summary["min"] == 100.0 and summary["std"] == 0.0

    def test_histogram_never_matched_id(self):
        percent, summary = per_id_match_histogram([5, 0], num_tuples=10)
        np.testing.assert_array_equal(percent, [50.0, 0.0])
        assert summary["min"] == 0.0


class TestTupleConstruction:
    def test_tuples_seeded_and_positive_same_class(self):
        cfg = tiny_config()
        ds = generate_synthetic_dataset(4, 2, seed=0, image_size=32)
        assignments = [[(i + 2) % 8, (i + 3) % 8] for i in range(8)]
        a = build_epoch_tuples(ds, assignments, cfg, epoch=1)
        b = build_epoch_tuples(ds, assignments, cfg, epoch=1)
        assert a == b
        c = build_epoch_tuples(ds, assignments, cfg, epoch=2)
        assert a != c
        for item in a:
            assert ds.label(item.anchor) == ds.label(item.positive)
            assert item.anchor != item.positive


class TestTrain:
    def test_zero_learning_rate_keeps_weights(self, tmp_path):
        cfg = tiny_config(**{"train.learning_rate": 0.0, "train.epochs": 1})
        result = train(cfg, tmp_path)
        from superfeat.encoder import ConvEncoder
        fresh = ConvEncoder(dim=16, base_channels=4, seed=cfg.seed,
                            dtype=torch.float32)
        for got, init in zip(result.model.encoder.parameters(),
                             fresh.parameters()):
            assert torch.equal(got, init)

    def test_metrics_log_deterministic_in_float64(self, tmp_path):
        cfg = tiny_config(**{"train.dtype": "float64"})
        a = train(cfg, tmp_path / "a")
        b = train(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "train_log.jsonl").read_text() == \
            (tmp_path / "b" / "train_log.jsonl").read_text()

    def test_metrics_content(self, tmp_path):
        cfg = tiny_config()
        result = train(cfg, tmp_path)
        assert len(result.metrics) == 2
        lines = result.metrics_path.read_text().splitlines()
        assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
        record = result.metrics[-1]
        assert record["val_map"] is not None
        assert len(record["matches_per_id"]) == cfg.templates.count
        assert record["tuples"] == 4
        recombined = (record["loss_global"] + record["loss_super"]
                      + record["loss_attn"])
        assert abs(recombined - record["loss_total"]) <= 1e-9
        assert result.checkpoint_path.exists()
        assert result.checkpoint_path.with_name(
            result.checkpoint_path.name + ".json").exists()

    def test_divergence_aborts_with_last_checkpoint(self, tmp_path, monkeypatch):
        cfg = tiny_config()
        import superfeat.training as training_mod

        calls = {"n": 0}
        real = training_mod.total_loss

        def poisoned(batch, loss_cfg, match_cfg):
            calls["n"] += 1
            total, comps, ms = real(batch, loss_cfg, match_cfg)
            if calls["n"] > 3:  # diverge in the second epoch
                total = total * float("nan")
            return total, comps, ms

        monkeypatch.setattr(training_mod, "total_loss", poisoned)
        with pytest.raises(DivergenceDetected):
            train(cfg, tmp_path)
        assert (tmp_path / "checkpoint.pt").exists()
        sidecar = json.loads((tmp_path / "checkpoint.pt.json").read_text())
        assert sidecar["last_good_epoch"] == 0


class TestMeasureMatchStats:
    def test_stats_shapes_and_determinism(self, tmp_path):
        cfg = tiny_config()
        result = train(cfg, tmp_path)
        ds = generate_synthetic_dataset(4, 2, seed=0, image_size=32)
        a = measure_match_stats(result.model, ds, cfg, num_tuples=10)
        b = measure_match_stats(result.model, ds, cfg, num_tuples=10)
        assert a["match_ratio"] == b["match_ratio"]
        assert a["per_id_counts"].shape == (4,)
        assert a["tuples"] == 10
