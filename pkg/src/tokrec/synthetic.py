"""Planted-cluster interaction data with two feature modalities.

Items belong to latent clusters; both feature modalities are the cluster
centroid plus Gaussian noise, users mostly interact inside one preferred
cluster, and item popularity is heavy-tailed so some items stay cold.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .artifacts import atomic_write_text, write_feature_file
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

INTERACTIONS_FILE = "interactions.tsv"
FEATURE_FILES = {"vision": "vision.mfea", "text": "text.mfea"}
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class PlantedSpec:
    num_users: int = 2000
    num_items: int = 500
    num_clusters: int = 20
    vision_dim: int = 64
    text_dim: int = 32
    min_interactions: int = 10
    max_interactions: int = 20
    affinity: float = 0.9
    popularity_exponent: float = 1.0
    # Share of items that only ever receive cold_interactions edges.
    cold_fraction: float = 0.3
    cold_interactions: int = 3
    noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_users, self.num_items, self.num_clusters) < 1:
            raise ConfigurationError("planted data needs users, items and clusters >= 1")
        if self.num_clusters > self.num_items:
            raise ConfigurationError("more clusters than items")
        if not 1 <= self.min_interactions <= self.max_interactions:
            raise ConfigurationError("interaction counts must satisfy 1 <= min <= max")
        if not 0.0 <= self.affinity <= 1.0:
            raise ConfigurationError("affinity must be in [0, 1]")
        if not 0.0 <= self.cold_fraction < 1.0 or self.cold_interactions < 1:
            raise ConfigurationError("cold_fraction must be in [0, 1) and cold_interactions >= 1")
        if self.num_items - int(self.cold_fraction * self.num_items) < self.num_clusters:
            raise ConfigurationError("every cluster needs at least one warm item")


@dataclass
class PlantedData:
    """Edges with string IDs; feature rows follow first appearance of items in edges."""

    edges: list[tuple[str, str]]
    features: dict[str, np.ndarray]
    item_cluster: np.ndarray
    item_is_cold: np.ndarray


def _pick(rng: np.random.Generator, pool: np.ndarray, weights: np.ndarray, count: int) -> np.ndarray:
    count = min(count, len(pool))
    if count == 0:
        return pool[:0]
    p = weights[pool] / weights[pool].sum()
    return rng.choice(pool, size=count, replace=False, p=p)


def _cold_items(
    rng: np.random.Generator, item_cluster: np.ndarray, spec: PlantedSpec
) -> np.ndarray:
    """Cold mask with every cluster keeping at least one warm item."""
    n, c = len(item_cluster), spec.num_clusters
    warm_anchor = np.array([rng.choice(np.flatnonzero(item_cluster == k)) for k in range(c)])
    candidates = np.setdiff1d(np.arange(n), warm_anchor)
    cold = np.zeros(n, dtype=bool)
    cold[rng.choice(candidates, size=int(spec.cold_fraction * n), replace=False)] = True
    return cold


def generate_planted(spec: PlantedSpec = PlantedSpec()) -> PlantedData:
    """
    Sample planted-cluster interactions and features.

    Warm items are drawn by users of their own cluster with Zipf-like
    weights; off-cluster draws are uniform over warm items. Each cold item
    is given exactly cold_interactions edges from users of its cluster, so
    it stays in the lowest train-degree range however the split falls.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, c = spec.num_items, spec.num_clusters

    item_cluster = rng.permutation(np.arange(n) % c)
    features = {}
    for modality, dim in (("vision", spec.vision_dim), ("text", spec.text_dim)):
        centroids = rng.normal(size=(c, dim))
        features[modality] = centroids[item_cluster] + spec.noise * rng.normal(size=(n, dim))

    is_cold = _cold_items(rng, item_cluster, spec)
    ranks = rng.permutation(n)
    popularity = (ranks + 1.0) ** -spec.popularity_exponent
    uniform = np.ones(n)

    warm = ~is_cold
    members = [np.flatnonzero(warm & (item_cluster == k)) for k in range(c)]
    homes = rng.integers(c, size=spec.num_users)
    per_user: list[list[int]] = []
    for user in range(spec.num_users):
        home = int(homes[user])
        count = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
        inside = int(rng.binomial(count, spec.affinity))
        chosen = _pick(rng, members[home], popularity, inside)
        outside = np.flatnonzero(warm & (item_cluster != home))
        chosen = np.concatenate([chosen, _pick(rng, outside, uniform, count - len(chosen))])
        per_user.append([int(i) for i in chosen])

    for item in np.flatnonzero(is_cold):
        fans = np.flatnonzero(homes == item_cluster[item])
        if len(fans) == 0:
            fans = np.arange(spec.num_users)
        size = min(spec.cold_interactions, len(fans))
        for user in rng.choice(fans, size=size, replace=False):
            per_user[int(user)].append(int(item))

    edges = [(u, i) for u, items in enumerate(per_user) for i in items]

    # Relabel items by first appearance; items nobody touched are dropped.
    order: dict[int, int] = {}
    for _, item in edges:
        order.setdefault(item, len(order))
    raw_items = np.array(list(order), dtype=np.int64)
    logger.info(
        "planted data: %d users, %d of %d items used (%d cold), %d edges",
        spec.num_users, len(raw_items), n, int(is_cold[raw_items].sum()), len(edges),
    )
    return PlantedData(
        edges=[(f"u{u}", f"i{order[i]}") for u, i in edges],
        features={m: f[raw_items].astype(np.float32) for m, f in features.items()},
        item_cluster=item_cluster[raw_items],
        item_is_cold=is_cold[raw_items],
    )


def write_planted(
    out_dir: str | Path, data: PlantedData, config: dict[str, Any] | None = None
) -> Path:
    """Write interactions, both feature files and a config pointing at them; returns the config path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / INTERACTIONS_FILE, "".join(f"{u}\t{i}\n" for u, i in data.edges))
    for modality, name in FEATURE_FILES.items():
        write_feature_file(out_dir / name, data.features[modality])
    run_config: dict[str, Any] = {
        "paths": {
            "interactions": INTERACTIONS_FILE,
            "features": dict(FEATURE_FILES),
            "output_dir": "out",
        },
    }
    for key, value in (config or {}).items():
        if isinstance(value, dict) and isinstance(run_config.get(key), dict):
            run_config[key] = {**run_config[key], **value}
        else:
            run_config[key] = value
    path = out_dir / CONFIG_FILE
    atomic_write_text(path, json.dumps(run_config, indent=2, sort_keys=True) + "\n")
    return path
