"""Tests for triplet sampling, epochs and early stopping."""

import math
from dataclasses import replace

import numpy as np
import pytest

from tokrec.backbones import build_recommender
from tokrec.config import TrainConfig
from tokrec.dataset import build_dataset
from tokrec.errors import EmptyValidationError, SamplingError, TrainingDivergedError
from tokrec.evaluation import EvalResult, Evaluator
from tokrec.optim import Adam, AdamState
from tokrec.trainer import NegativeSampler, fit, sample_triplets, train_epoch


def _model(dataset, seed: int = 0):
    return build_recommender("bpr_mf", dataset.num_users, dataset.num_items, 8, seed=seed)


class ScriptedEvaluator:
    """Returns a fixed sequence of validation Recall@20 values."""

    def __init__(self, values: list[float]):
        self.values = list(values)
        self.calls = 0

    def evaluate(self, h_user, h_item, split="val") -> EvalResult:
        value = self.values[self.calls]
        self.calls += 1
        return EvalResult(split, {"recall@20": value, "ndcg@20": value}, num_evaluated_users=1)


class TestNegativeSampling:
    def test_negatives_exclude_train_positives(self):
        ds = build_dataset([("a", "x"), ("b", "x"), ("b", "y"), ("b", "z")], seed=0)
        sampler = NegativeSampler(ds)
        rng = np.random.default_rng(0)

        negatives = sampler.sample(np.zeros(1000, dtype=np.int64), rng)
        assert set(negatives.tolist()) == {1, 2}

    def test_uniform_over_negatives(self):
        ds = build_dataset([("a", "i0")] + [("b", f"i{j}") for j in range(4)], seed=0)
        draws = 100_000
        rng = np.random.default_rng(1)

        negatives = NegativeSampler(ds).sample(np.zeros(draws, dtype=np.int64), rng)
        counts = np.bincount(negatives, minlength=4)
        sigma = math.sqrt(draws * (1 / 3) * (2 / 3))
        assert counts[0] == 0
        assert all(abs(c - draws / 3) <= 4 * sigma for c in counts[1:])

    def test_user_with_every_item(self):
        ds = build_dataset([("a", "x"), ("b", "x"), ("b", "y"), ("b", "z")], seed=0)

        with pytest.raises(SamplingError) as exc_info:
            NegativeSampler(ds).sample(np.array([1]), np.random.default_rng(0))
        assert exc_info.value.user == 1

    def test_empty_train(self, toy_dataset):
        ds = replace(toy_dataset, train_edges=np.zeros((0, 2), dtype=np.int64))

        with pytest.raises(SamplingError):
            sample_triplets(ds, 4, np.random.default_rng(0))

    def test_triplets_are_valid(self, toy_dataset):
        batch = sample_triplets(toy_dataset, 256, np.random.default_rng(0))
        positives = {tuple(e) for e in toy_dataset.train_edges.tolist()}

        assert len(batch) == 256
        for u, i, j in zip(batch.users, batch.pos, batch.neg):
            assert (u, i) in positives
            assert (u, j) not in positives


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_parameters(self, toy_dataset):
        model = _model(toy_dataset)
        before = model.snapshot()
        config = TrainConfig(learning_rate=0.0, batch_size=16)

        loss = train_epoch(
            model, toy_dataset, config, AdamState.create(model.params()), np.random.default_rng(0)
        )
        assert math.isfinite(loss)
        for name, param in model.params().items():
            assert np.array_equal(param, before[name])

    def test_same_seed_same_losses(self, toy_dataset):
        config = TrainConfig(learning_rate=0.01, batch_size=16)
        runs = []
        for _ in range(2):
            model = _model(toy_dataset)
            adam = AdamState.create(model.params())
            rng = np.random.default_rng(5)
            runs.append([train_epoch(model, toy_dataset, config, adam, rng) for _ in range(3)])

        assert runs[0] == runs[1]

    def test_single_triplet_overfits(self):
        ds = build_dataset([("a", "x"), ("b", "y")], seed=0)
        model = _model(ds)
        params = model.params()
        adam = AdamState.create(params)
        optimizer = Adam(learning_rate=0.05)
        users, pos, neg = np.array([0]), np.array([0]), np.array([1])

        losses = []
        for _ in range(200):
            step = model.forward_backward(users, pos, neg)
            losses.append(step.loss)
            optimizer.step(params, step.grads, adam)

        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.1

    def test_non_finite_loss(self, toy_dataset):
        model = _model(toy_dataset)
        model.user_embeddings[...] = np.nan
        config = TrainConfig(batch_size=16)

        with pytest.raises(TrainingDivergedError) as exc_info:
            train_epoch(
                model, toy_dataset, config, AdamState.create(model.params()),
                np.random.default_rng(0), epoch=3,
            )
        err = exc_info.value
        assert err.epoch == 3
        assert err.batch_index == 0
        assert len(err.batch["users"]) == 16
        assert err.exit_code == 3


class TestFit:
    def test_stops_after_patience(self, toy_dataset):
        model = _model(toy_dataset)
        config = TrainConfig(learning_rate=0.01, batch_size=16, patience=1, max_epochs=10)
        evaluator = ScriptedEvaluator([0.1, 0.2, 0.15, 0.1])
        captured = {}

        def on_epoch(record):
            if record.epoch == 1:
                captured.update(model.snapshot())

        result = fit(model, toy_dataset, config, evaluator, on_epoch=on_epoch)
        assert result.best_epoch == 1
        assert result.best_metric == 0.2
        assert result.stopped_early
        assert [r.epoch for r in result.log] == [1, 2]
        for name, param in model.params().items():
            assert np.array_equal(param, captured[name])

    def test_ties_do_not_replace_best(self, toy_dataset):
        model = _model(toy_dataset)
        config = TrainConfig(learning_rate=0.01, batch_size=16, patience=2, max_epochs=5)

        result = fit(model, toy_dataset, config, ScriptedEvaluator([0.3, 0.3, 0.3]))
        assert result.best_epoch == 0
        assert len(result.log) == 2

    def test_zero_epochs_evaluates_once(self, toy_dataset):
        model = _model(toy_dataset)
        before = model.snapshot()
        evaluator = ScriptedEvaluator([0.4])

        result = fit(model, toy_dataset, TrainConfig(max_epochs=0), evaluator)
        assert evaluator.calls == 1
        assert result.best_epoch == 0
        assert result.initial.metric("recall@20") == 0.4
        assert result.log == []
        for name, param in model.params().items():
            assert np.array_equal(param, before[name])

    def test_empty_validation(self):
        ds = build_dataset([("a", "x"), ("a", "y"), ("b", "y")], seed=0)

        with pytest.raises(EmptyValidationError):
            fit(_model(ds), ds, TrainConfig(max_epochs=1))

    def test_deterministic_log(self, toy_dataset):
        config = TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=3, seed=4)
        logs = []
        for _ in range(2):
            result = fit(_model(toy_dataset), toy_dataset, config, Evaluator(toy_dataset, threads=2))
            logs.append([(r.loss, r.val_recall, r.val_ndcg) for r in result.log])

        assert logs[0] == logs[1]
        assert len(logs[0]) <= 3

    def test_log_record_keys(self, toy_dataset):
        config = TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=1)
        result = fit(_model(toy_dataset), toy_dataset, config)

        assert set(result.log[0].to_dict()) == {
            "epoch", "loss", "val_recall@20", "val_ndcg@20", "wall_time"
        }
        assert {k for k in result.best_adam if k.startswith("adam/m/")}
