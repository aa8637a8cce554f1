"""BPR training loop: triplet sampling, Adam steps and early stopping."""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .backbones import Recommender
from .config import TrainConfig
from .dataset import InteractionDataset
from .errors import EmptyValidationError, SamplingError, TrainingDivergedError
from .evaluation import EvalResult, Evaluator
from .optim import Adam, AdamState

logger = logging.getLogger(__name__)

# Rejection rounds before falling back to an explicit complement draw.
MAX_REJECTION_ROUNDS = 200
EARLY_STOP_METRIC = "recall@20"


@dataclass
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def to_dict(self) -> dict[str, Any]:
        return {
            "users": self.users.tolist(),
            "pos": self.pos.tolist(),
            "neg": self.neg.tolist(),
        }


class NegativeSampler:
    """Uniform negative items for users, excluding their train positives."""

    def __init__(self, dataset: InteractionDataset):
        self.num_items = dataset.num_items
        self.keys = dataset.train_keys()
        self.adjacency = dataset.user_adjacency

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        found = np.zeros(len(keys), dtype=bool)
        inside = pos < len(self.keys)
        found[inside] = self.keys[pos[inside]] == keys[inside]
        return found

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        neg = rng.integers(0, self.num_items, size=len(users))
        pending = np.flatnonzero(self.is_positive(users, neg))
        rounds = 1
        while len(pending) and rounds < MAX_REJECTION_ROUNDS:
            neg[pending] = rng.integers(0, self.num_items, size=len(pending))
            pending = pending[self.is_positive(users[pending], neg[pending])]
            rounds += 1
        for idx in pending:
            user = int(users[idx])
            positives = self.adjacency[user]
            if len(positives) >= self.num_items:
                raise SamplingError(user)
            complement = np.setdiff1d(
                np.arange(self.num_items), positives, assume_unique=True
            )
            neg[idx] = complement[rng.integers(len(complement))]
        return neg


def sample_triplets(
    dataset: InteractionDataset,
    batch_size: int,
    rng: np.random.Generator,
    sampler: NegativeSampler | None = None,
) -> TripletBatch:
    """
    Draw (u, i) uniformly from train edges and a negative i' with r_{u,i'} = 0.

    Raises:
        SamplingError: If the train split is empty or a user has no negatives.
    """
    edges = dataset.train_edges
    if len(edges) == 0:
        raise SamplingError(reason="train split is empty")
    sampler = sampler or NegativeSampler(dataset)
    picks = rng.integers(0, len(edges), size=batch_size)
    users = edges[picks, 0]
    pos = edges[picks, 1]
    return TripletBatch(users=users, pos=pos, neg=sampler.sample(users, rng))


def train_epoch(
    model: Recommender,
    dataset: InteractionDataset,
    config: TrainConfig,
    adam: AdamState,
    rng: np.random.Generator,
    epoch: int = 1,
    sampler: NegativeSampler | None = None,
) -> float:
    """
    One pass of ceil(|train| / batch_size) batches; returns the mean loss.

    The last batch holds the remainder, so an epoch draws |train| triplets.

    Raises:
        TrainingDivergedError: On a non-finite batch loss.
    """
    sampler = sampler or NegativeSampler(dataset)
    optimizer = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    num_edges = len(dataset.train_edges)
    num_batches = math.ceil(num_edges / config.batch_size)
    params = model.params()
    total = 0.0
    for b in range(num_batches):
        size = min(config.batch_size, num_edges - b * config.batch_size)
        batch = sample_triplets(dataset, size, rng, sampler)
        step = model.forward_backward(batch.users, batch.pos, batch.neg, config.l2_coeff)
        if not math.isfinite(step.loss):
            dump = {**batch.to_dict(), "loss": repr(step.loss), "epoch": epoch, "batch": b}
            raise TrainingDivergedError(epoch, b, dump)
        optimizer.step(params, step.grads, adam)
        total += step.loss * size
    return total / num_edges


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_recall: float
    val_ndcg: float
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "val_recall@20": self.val_recall,
            "val_ndcg@20": self.val_ndcg,
            "wall_time": self.wall_time,
        }


@dataclass
class FitResult:
    """Outcome of fit(); the model already holds best_params."""

    best_epoch: int
    best_metric: float
    initial: EvalResult
    best_params: dict[str, np.ndarray]
    best_adam: dict[str, np.ndarray]
    log: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


def fit(
    model: Recommender,
    dataset: InteractionDataset,
    config: TrainConfig,
    evaluator: Evaluator | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """
    Train with early stopping on validation Recall@20.

    The model is evaluated once before training (epoch 0). A later epoch
    becomes the best only if it strictly beats the current best; training
    stops after `patience` epochs without improvement or at max_epochs, and
    the best parameters are loaded back into the model.

    Raises:
        EmptyValidationError: If the dataset has no validation edges.
    """
    config.validate()
    if len(dataset.val_edges) == 0:
        raise EmptyValidationError()
    evaluator = evaluator or Evaluator(dataset)
    rng = np.random.default_rng((config.seed, 1))
    sampler = NegativeSampler(dataset)
    adam = AdamState.create(model.params())

    initial = evaluator.evaluate(*model.representations(), split="val")
    best_metric = initial.metric(EARLY_STOP_METRIC)
    best_epoch = 0
    best_params = model.snapshot()
    best_adam = {k: v.copy() for k, v in adam.to_arrays().items()}
    logger.info("epoch 0: val %s %.5f", EARLY_STOP_METRIC, best_metric)

    log: list[EpochRecord] = []
    stale = 0
    stopped_early = False
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        loss = train_epoch(model, dataset, config, adam, rng, epoch, sampler)
        result = evaluator.evaluate(*model.representations(), split="val")
        record = EpochRecord(
            epoch=epoch,
            loss=loss,
            val_recall=result.metric("recall@20"),
            val_ndcg=result.metric("ndcg@20"),
            wall_time=time.perf_counter() - start,
        )
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info(
            "epoch %d: loss %.5f val recall@20 %.5f ndcg@20 %.5f (%.2fs)",
            epoch, loss, record.val_recall, record.val_ndcg, record.wall_time,
        )

        if record.val_recall > best_metric:
            best_metric = record.val_recall
            best_epoch = epoch
            best_params = model.snapshot()
            best_adam = {k: v.copy() for k, v in adam.to_arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d; best epoch %d", epoch, best_epoch)
                stopped_early = True
                break

    model.load_params(best_params)
    return FitResult(
        best_epoch=best_epoch,
        best_metric=best_metric,
        initial=initial,
        best_params=best_params,
        best_adam=best_adam,
        log=log,
        stopped_early=stopped_early,
    )
