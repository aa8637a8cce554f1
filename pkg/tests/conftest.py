"""Pytest fixtures for tokrec tests."""

import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from tokrec.dataset import InteractionDataset, build_dataset
from tokrec.synthetic import PlantedSpec, generate_planted, write_planted

# Small enough to train in well under a second per epoch.
TINY_PLANTED = PlantedSpec(
    num_users=60,
    num_items=40,
    num_clusters=4,
    vision_dim=8,
    text_dim=4,
    min_interactions=10,
    max_interactions=15,
    seed=0,
)

TINY_RUN: dict[str, Any] = {
    "quantizer": {"num_slots": 2, "codebook_size": 4, "outer_iters": 2, "kmeans_iters": 5},
    "model": {"dim": 8},
    "train": {"batch_size": 64, "max_epochs": 2, "patience": 2, "learning_rate": 0.01},
}


@pytest.fixture
def temp_dir():
    """Create a temporary directory."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


def toy_edges(num_users: int = 8, num_items: int = 20, per_user: int = 10) -> list[tuple[str, str]]:
    """Each user interacts with a sliding window of items."""
    return [
        (f"u{u}", f"i{(u * 3 + j) % num_items}")
        for u in range(num_users)
        for j in range(per_user)
    ]


@pytest.fixture
def toy_dataset() -> InteractionDataset:
    return build_dataset(toy_edges(), seed=0)


def random_features(rows: int, dim: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(rows, dim)).astype(np.float32)


def write_tiny_planted(out_dir: Path, overrides: dict[str, Any] | None = None) -> Path:
    """Write the tiny planted dataset plus a config; returns the config path."""
    config = {key: dict(value) for key, value in TINY_RUN.items()}
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            config[key] = {**config.get(key, {}), **value}
        else:
            config[key] = value
    return write_planted(out_dir, generate_planted(TINY_PLANTED), config)


@pytest.fixture
def planted_config(temp_dir) -> Path:
    """Config path of a freshly written tiny planted dataset."""
    return write_tiny_planted(temp_dir / "data")


def numeric_grad(f, array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar f() with respect to array (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        plus = f()
        array[idx] = old - h
        minus = f()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad
