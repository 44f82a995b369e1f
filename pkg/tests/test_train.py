"""Tests for the training objective, optimizer updates and the trainer."""

import math

import numpy as np
import pandas as pd
import pytest
import torch

from edge_rec.checkpoint import load_checkpoint
from edge_rec.diffusion import NoiseSchedule, forward_sample, make_linear_schedule
from edge_rec.errors import ConfigMismatchError, TrainingDivergedError
from edge_rec.gdit import GDiTConfig
from edge_rec.ingest import time_split
from edge_rec.train import (
    PatchBatch,
    TrainConfig,
    Trainer,
    diffusion_loss,
    make_optimizer,
    resolve_dtype,
    run_training,
    sample_bpr_pairs,
    train_step,
)
from tests.helpers import short_schedule, small_config, small_model, small_setup

BPR_AT_ONE = math.log1p(math.exp(-1.0))  # -log(sigmoid(1)) = 0.313262


def _tiny_config(**overrides):
    params = dict(
        iterations=5, batch_size=2, patch_n=4, patch_m=4, learning_rate=1e-3,
        seed=0, precision="double", checkpoint_every=1000,
    )
    params.update(overrides)
    return TrainConfig(**params)


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert config.iterations == 10000
        assert config.bpr_weight == 0.1
        assert config.dtype == torch.float32

    def test_invalid_values(self):
        with pytest.raises(ValueError, match="iterations must be at least 1"):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError, match="bpr_weight must be non-negative"):
            TrainConfig(bpr_weight=-0.5)
        with pytest.raises(ValueError, match="Unknown precision"):
            TrainConfig(precision="half")

    def test_dict_round_trip(self):
        config = _tiny_config(subgraph_density=0.5)
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_resolve_dtype(self):
        assert resolve_dtype("double") == torch.float64
        assert resolve_dtype(torch.float32) == torch.float32


class TestBprPairs:
    def test_pairs_are_known_and_ordered(self):
        values = np.array([[0.5, -0.5, 0.5, 0.0]])
        known = np.array([[True, True, True, False]])
        pairs = sample_bpr_pairs(values, known, 4, np.random.default_rng(0))
        assert sorted(map(tuple, pairs.tolist())) == [(0, 0, 1), (0, 2, 1)]

    def test_random_pairs_satisfy_ordering(self):
        rng = np.random.default_rng(1)
        values = np.round(rng.uniform(-1, 1, size=(10, 12)), 1)
        known = rng.random((10, 12)) < 0.6
        values[~known] = 0.0
        pairs = sample_bpr_pairs(values, known, 3, rng)
        assert len(pairs) > 0
        for row, pos, neg in pairs:
            assert known[row, pos] and known[row, neg]
            assert values[row, pos] > values[row, neg]
        assert max(np.bincount(pairs[:, 0])) <= 3

    def test_no_pairs(self):
        pairs = sample_bpr_pairs(np.zeros((2, 3)), np.zeros((2, 3), dtype=bool), 4, np.random.default_rng(0))
        assert pairs.shape == (0, 3)


class TestDiffusionLoss:
    def setup_method(self):
        self.schedule = make_linear_schedule(T=10)
        self.rng = np.random.default_rng(0)

    def _pair_inputs(self):
        # x0 estimate of 0.5 and -0.5 on one ranked pair, zero noise error
        scale = math.sqrt(self.schedule.alpha_bar[3])
        x_t = torch.tensor([[0.5, -0.5]], dtype=torch.float64) * scale
        values = torch.tensor([[1.0, -1.0]], dtype=torch.float64)
        known = torch.ones(1, 2, dtype=torch.bool)
        zeros = torch.zeros(1, 2, dtype=torch.float64)
        return zeros, zeros.clone(), x_t, values, known

    def test_bpr_value(self):
        eps, eps_hat, x_t, values, known = self._pair_inputs()
        terms = diffusion_loss(eps, eps_hat, x_t, 3, values, known, self.schedule, 0.1, self.rng)
        assert terms.mse.item() == 0.0
        assert terms.bpr.item() == pytest.approx(BPR_AT_ONE, rel=1e-9)
        assert terms.bpr.item() == pytest.approx(0.313262, abs=1e-6)
        assert terms.total.item() == pytest.approx(0.1 * BPR_AT_ONE, rel=1e-9)

    def test_zero_weight_is_plain_mse(self):
        eps = torch.randn(5, 6, dtype=torch.float64)
        eps_hat = torch.randn(5, 6, dtype=torch.float64)
        values = torch.rand(5, 6, dtype=torch.float64) * 2 - 1
        x_t = forward_sample(values, 4, eps, self.schedule)
        known = torch.ones(5, 6, dtype=torch.bool)
        terms = diffusion_loss(eps, eps_hat, x_t, 4, values, known, self.schedule, 0.0, self.rng)
        assert torch.equal(terms.total, terms.mse)
        assert terms.mse.item() == pytest.approx(((eps - eps_hat) ** 2).mean().item())

    def test_perfect_prediction(self):
        eps = torch.randn(3, 3, dtype=torch.float64)
        values = torch.zeros(3, 3, dtype=torch.float64)
        x_t = forward_sample(values, 2, eps, self.schedule)
        terms = diffusion_loss(eps, eps.clone(), x_t, 2, values, torch.zeros(3, 3, dtype=torch.bool), self.schedule, 0.1, self.rng)
        assert terms.mse.item() == 0.0
        assert terms.bpr.item() == 0.0

    def test_mask_unknown_ignores_unknown_cells(self):
        known = torch.tensor([[True, False], [False, True]])
        eps = torch.zeros(2, 2, dtype=torch.float64)
        eps_hat = torch.where(known, 0.0, 3.0).to(torch.float64)
        values = torch.zeros(2, 2, dtype=torch.float64)
        masked = diffusion_loss(eps, eps_hat, eps, 1, values, known, self.schedule, 0.0, self.rng, mask_unknown=True)
        full = diffusion_loss(eps, eps_hat, eps, 1, values, known, self.schedule, 0.0, self.rng)
        assert masked.mse.item() == 0.0
        assert full.mse.item() == pytest.approx(4.5)

    def test_batched_steps(self):
        eps = torch.randn(2, 3, 3, dtype=torch.float64)
        values = torch.rand(2, 3, 3, dtype=torch.float64)
        t = torch.tensor([1, 9])
        x_t = forward_sample(values, t, eps, self.schedule)
        known = torch.ones(2, 3, 3, dtype=torch.bool)
        terms = diffusion_loss(eps, torch.zeros_like(eps), x_t, t, values, known, self.schedule, 0.1, self.rng)
        assert terms.mse.item() == pytest.approx((eps ** 2).mean().item())
        assert terms.bpr.item() > 0

    def test_shape_mismatch(self):
        a = torch.zeros(2, 2)
        with pytest.raises(ValueError, match="Shape mismatch"):
            diffusion_loss(a, torch.zeros(2, 3), a, 1, a, a.bool(), self.schedule, 0.1, self.rng)

    def test_negative_weight(self):
        a = torch.zeros(2, 2)
        with pytest.raises(ValueError, match="non-negative"):
            diffusion_loss(a, a, a, 1, a, a.bool(), self.schedule, -1.0, self.rng)


class TestTrainStep:
    def setup_method(self):
        _, self.matrix, self.features, self.scaler = small_setup(6, 6)
        self.schedule = short_schedule(20)

    def _batch(self, trainer):
        return trainer.sample_batch()

    def test_zero_learning_rate_leaves_parameters(self):
        config = _tiny_config(learning_rate=0.0)
        trainer = Trainer(self.matrix, self.features, config, self.scaler, small_config(self.features), self.schedule)
        before = [p.detach().clone() for p in trainer.model.parameters()]
        trainer.step()
        for b, p in zip(before, trainer.model.parameters()):
            assert torch.equal(b, p)

    def test_same_seed_same_parameters(self):
        runs = []
        for _ in range(2):
            trainer = Trainer(self.matrix, self.features, _tiny_config(), self.scaler, small_config(self.features), self.schedule)
            for _ in range(10):
                trainer.step()
            runs.append([p.detach().clone() for p in trainer.model.parameters()])
        for a, b in zip(*runs):
            assert torch.equal(a, b)

    def test_update_changes_parameters_and_version(self):
        trainer = Trainer(self.matrix, self.features, _tiny_config(), self.scaler, small_config(self.features), self.schedule)
        before = trainer.model.in_proj.weight.detach().clone()
        row = trainer.step()
        assert row["iteration"] == 1
        assert set(row) == {"iteration", "total", "mse", "bpr"}
        assert trainer.guard.version == 1
        assert not torch.equal(before, trainer.model.in_proj.weight)

    def test_non_finite_loss(self):
        model = small_model(self.features)
        config = _tiny_config()
        with torch.no_grad():
            model.out_proj.bias.fill_(float("nan"))
        optimizer = make_optimizer(model, config)
        trainer = Trainer(self.matrix, self.features, config, self.scaler, small_config(self.features), self.schedule)
        batch = trainer.sample_batch()
        weight = model.in_proj.weight.detach().clone()
        with pytest.raises(TrainingDivergedError, match="Non-finite loss at iteration 7") as exc_info:
            train_step(
                model, optimizer, batch, self.schedule, config,
                torch.Generator().manual_seed(0), np.random.default_rng(0), iteration=7,
            )
        assert len(exc_info.value.t_values) == 2
        assert torch.equal(weight, model.in_proj.weight)

    def test_patch_batch(self):
        trainer = Trainer(self.matrix, self.features, _tiny_config(), self.scaler, small_config(self.features), self.schedule)
        batch = trainer.sample_batch()
        assert len(batch) == 2
        assert batch.values.shape == (2, 4, 4)
        assert batch.user_features.shape == (2, 4, 1)
        assert batch.values.dtype == torch.float64
        with pytest.raises(ValueError, match="at least one patch"):
            PatchBatch.from_patches([], self.matrix, self.features)

    def test_loss_decreases_on_a_fixed_patch(self):
        _, matrix, features, scaler = small_setup(8, 8, seed=4)
        schedule = make_linear_schedule(T=1000)
        config = _tiny_config(
            iterations=100, batch_size=4, patch_n=8, patch_m=8,
            learning_rate=1e-3, bpr_weight=0.0,
        )
        trainer = Trainer(matrix, features, config, scaler, small_config(features), schedule)
        values = torch.as_tensor(matrix.values)
        users = torch.as_tensor(features.user_features)
        items = torch.as_tensor(features.item_features)
        steps = [10, 50, 100, 200, 400, 600, 800, 1000]
        g = torch.Generator().manual_seed(123)
        noise = [torch.randn(8, 8, generator=g, dtype=torch.float64) for _ in steps]

        def fixed_loss():
            with torch.no_grad():
                losses = [
                    ((trainer.model(forward_sample(values, t, eps, schedule), t, users, items) - eps) ** 2).mean()
                    for t, eps in zip(steps, noise)
                ]
            return float(torch.stack(losses).mean())

        initial = fixed_loss()
        for _ in range(config.iterations):
            trainer.step()
        assert fixed_loss() < initial


class TestTrainer:
    def setup_method(self):
        self.dataset, self.matrix, self.features, self.scaler = small_setup(10, 10)
        self.schedule = short_schedule(20)

    def test_feature_width_mismatch(self):
        config = GDiTConfig(d_model=16, n_heads=2, d_user_in=24, d_item_in=20)
        with pytest.raises(ConfigMismatchError, match="feature widths"):
            Trainer(self.matrix, self.features, _tiny_config(), self.scaler, config, self.schedule)

    def test_default_model_sized_to_features(self):
        trainer = Trainer(self.matrix, self.features, _tiny_config(), self.scaler, schedule=self.schedule)
        assert trainer.model_config.d_user_in == 1
        assert trainer.model_config.d_model == 64
        assert trainer.schedule is self.schedule

    def test_subgraph_region(self):
        trainer = Trainer(
            self.matrix, self.features, _tiny_config(subgraph_density=0.9),
            self.scaler, small_config(self.features), self.schedule,
        )
        assert trainer.region == (10, 10)
        batch = trainer.sample_batch()
        assert len(batch) == 2

    def test_coverage(self):
        trainer = Trainer(self.matrix, self.features, _tiny_config(), self.scaler, small_config(self.features), self.schedule)
        assert trainer.coverage() == (0.0, 0.0)
        for _ in range(3):
            trainer.step()
        users, items = trainer.coverage()
        assert 0.0 < users <= 1.0
        assert 0.0 < items <= 1.0

    def test_run_writes_checkpoints_and_loss(self, tmp_path):
        config = _tiny_config(iterations=4, checkpoint_every=2)
        trainer = Trainer(
            self.matrix, self.features, config, self.scaler, small_config(self.features),
            self.schedule, run_info={"dataset": "synthetic"},
        )
        final = trainer.run(out_dir=tmp_path)
        assert final.iteration == 4
        assert (tmp_path / "iter_2.ckpt").exists()
        assert (tmp_path / "iter_4.ckpt").exists()
        assert (tmp_path / "final.ckpt").exists()
        loss = pd.read_csv(tmp_path / "loss.csv")
        assert list(loss.columns) == ["iteration", "total", "mse", "bpr"]
        assert loss["iteration"].tolist() == [1, 2, 3, 4]

        restored = load_checkpoint(tmp_path / "iter_2")
        assert restored.iteration == 2
        assert restored.train_config["dataset"] == "synthetic"
        assert restored.train_config["checkpoint_every"] == 2


class TestRunTraining:
    def test_end_to_end(self, tmp_path):
        dataset, _, features, _ = small_setup(8, 8)
        train, _ = time_split(dataset, 0.25)
        ckpt = run_training(
            train, _tiny_config(iterations=2), model_config=small_config(features),
            schedule=short_schedule(10), out_dir=tmp_path,
        )
        assert ckpt.iteration == 2
        assert ckpt.scaler.r_min == 1.0
        assert isinstance(ckpt.schedule, NoiseSchedule)
        assert (tmp_path / "final.ckpt").exists()
        model = ckpt.build_model()
        assert model.num_parameters == sum(v.size for v in ckpt.parameters.values())
