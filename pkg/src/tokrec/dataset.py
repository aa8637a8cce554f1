"""Interaction ingestion, dense ID remapping and deterministic 8:1:1 splits."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FeatureDataError, FeatureShapeError, InteractionParseError

logger = logging.getLogger(__name__)

# Users with fewer edges than this keep everything in train.
MIN_SPLIT_SIZE = 3
# val and test each receive floor(n / HOLDOUT_DIVISOR) edges.
HOLDOUT_DIVISOR = 10

SPLITS = ("train", "val", "test")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class InteractionDataset:
    """Users, items and binary interactions split into train/val/test.

    Attributes:
        num_users: Number of users M after filtering.
        num_items: Number of items N after filtering.
        user_ids: Original string ID per dense user index.
        item_ids: Original string ID per dense item index.
        item_raw_index: Position of each dense item in the first-appearance
            order of the raw interactions (feature files are indexed this way).
        num_raw_items: Number of distinct items before filtering.
        train_edges, val_edges, test_edges: (E, 2) int64 arrays of (user, item).
        user_adjacency: Per-user sorted array of train item indices.
        item_train_degree: Per-item count of train interactions.
        dropped_edges: val/test edges removed because their user or item
            had no train interaction.
    """

    num_users: int
    num_items: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    item_raw_index: np.ndarray
    num_raw_items: int
    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    user_adjacency: tuple[np.ndarray, ...]
    item_train_degree: np.ndarray
    dropped_edges: int = 0

    @property
    def num_edges(self) -> int:
        return len(self.train_edges) + len(self.val_edges) + len(self.test_edges)

    def edges(self, split: str) -> np.ndarray:
        """Return the (E, 2) edge array of a split."""
        if split not in SPLITS:
            raise ValueError(f"Unknown split: {split}")
        return getattr(self, f"{split}_edges")

    def user_items(self, split: str) -> list[np.ndarray]:
        """Per-user sorted item arrays of a split."""
        if split == "train":
            return list(self.user_adjacency)
        return _group_by_user(self.edges(split), self.num_users)

    def train_keys(self) -> np.ndarray:
        """Sorted user * N + item keys of all train edges, for membership tests."""
        keys = self.train_edges[:, 0] * self.num_items + self.train_edges[:, 1]
        return np.sort(keys)

    def item_index(self, item_id: str) -> int | None:
        """Dense index of an original item ID, or None if unknown."""
        try:
            return self.item_ids.index(item_id)
        except ValueError:
            return None


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense per-item feature matrix of one modality (row i = item i)."""

    modality: str
    data: np.ndarray  # (rows, dim) float32

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def select_rows(self, index: np.ndarray) -> "FeatureMatrix":
        """Return the matrix restricted to the given rows, in that order."""
        return FeatureMatrix(modality=self.modality, data=_frozen(self.data[index].copy()))


def _group_by_user(edges: np.ndarray, num_users: int) -> list[np.ndarray]:
    groups: list[list[int]] = [[] for _ in range(num_users)]
    for u, i in edges.tolist():
        groups[u].append(i)
    return [np.array(sorted(g), dtype=np.int64) for g in groups]


def load_interactions(path: str | Path) -> list[tuple[str, str]]:
    """
    Read a "user<TAB>item" file into a list of unique edges.

    Duplicates collapse to their first occurrence; order is first appearance.

    Raises:
        InteractionParseError: If a line is not valid UTF-8 or does not have
            exactly two tab-separated fields.
    """
    seen: dict[tuple[str, str], None] = {}
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                raise InteractionParseError(str(path), line_no, "invalid UTF-8") from None
            fields = line.split("\t")
            if len(fields) != 2:
                raise InteractionParseError(
                    str(path), line_no, f"expected 2 tab-separated fields, found {len(fields)}"
                )
            user, item = fields
            if not user or not item:
                raise InteractionParseError(str(path), line_no, "empty user or item ID")
            seen.setdefault((user, item), None)
    return list(seen)


def build_dataset(edges: list[tuple[str, str]], seed: int) -> InteractionDataset:
    """
    Remap string IDs densely and split each user's edges 8:1:1.

    Per user, edges are shuffled with a generator seeded once for the whole
    dataset; val and test get floor(n/10) edges each and the remainder goes to
    train. Users with fewer than 3 edges keep all of them in train. An
    iterative 1-core filter then runs on the train split; val/test edges whose
    user or item lost every train edge are dropped and counted.

    Raises:
        EmptyDatasetError: If there are no edges.
    """
    if not edges:
        raise EmptyDatasetError()

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[int]] = []
    seen: set[tuple[str, str]] = set()
    for user, item in edges:
        if (user, item) in seen:
            continue
        seen.add((user, item))
        u = user_index.setdefault(user, len(user_index))
        i = item_index.setdefault(item, len(item_index))
        if u == len(per_user):
            per_user.append([])
        per_user[u].append(i)

    rng = np.random.default_rng(seed)
    split_parts: dict[str, list[np.ndarray]] = {s: [] for s in SPLITS}
    for u, items in enumerate(per_user):
        arr = np.asarray(items, dtype=np.int64)
        n = len(arr)
        if n < MIN_SPLIT_SIZE:
            parts = {"train": arr, "val": arr[:0], "test": arr[:0]}
        else:
            shuffled = arr[rng.permutation(n)]
            holdout = n // HOLDOUT_DIVISOR
            n_train = n - 2 * holdout
            parts = {
                "train": shuffled[:n_train],
                "val": shuffled[n_train:n_train + holdout],
                "test": shuffled[n_train + holdout:],
            }
        for split, items_arr in parts.items():
            user_col = np.full(len(items_arr), u, dtype=np.int64)
            split_parts[split].append(np.stack([user_col, items_arr], axis=1))

    raw = {
        s: np.concatenate(split_parts[s]) if split_parts[s] else np.zeros((0, 2), np.int64)
        for s in SPLITS
    }
    num_raw_users = len(user_index)
    num_raw_items = len(item_index)

    keep_users, keep_items = _one_core(raw["train"], num_raw_users, num_raw_items)

    user_map = np.full(num_raw_users, -1, dtype=np.int64)
    user_map[keep_users] = np.arange(len(keep_users))
    item_map = np.full(num_raw_items, -1, dtype=np.int64)
    item_map[keep_items] = np.arange(len(keep_items))

    remapped: dict[str, np.ndarray] = {}
    dropped = 0
    for split in SPLITS:
        e = raw[split]
        mask = (user_map[e[:, 0]] >= 0) & (item_map[e[:, 1]] >= 0)
        if split != "train":
            dropped += int((~mask).sum())
        e = e[mask]
        remapped[split] = _frozen(
            np.stack([user_map[e[:, 0]], item_map[e[:, 1]]], axis=1).astype(np.int64)
        )
    if dropped:
        logger.warning("1-core filter dropped %d val/test edges", dropped)

    num_users = len(keep_users)
    num_items = len(keep_items)
    if len(remapped["train"]) == 0:
        raise EmptyDatasetError("no train edges survive filtering")

    raw_user_ids = list(user_index)
    raw_item_ids = list(item_index)
    adjacency = tuple(_frozen(a) for a in _group_by_user(remapped["train"], num_users))
    degree = np.bincount(remapped["train"][:, 1], minlength=num_items).astype(np.int64)

    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        user_ids=tuple(raw_user_ids[u] for u in keep_users),
        item_ids=tuple(raw_item_ids[i] for i in keep_items),
        item_raw_index=_frozen(keep_items.astype(np.int64)),
        num_raw_items=num_raw_items,
        train_edges=remapped["train"],
        val_edges=remapped["val"],
        test_edges=remapped["test"],
        user_adjacency=adjacency,
        item_train_degree=_frozen(degree),
        dropped_edges=dropped,
    )


def _one_core(train: np.ndarray, num_users: int, num_items: int) -> tuple[np.ndarray, np.ndarray]:
    """Iteratively drop users and items without train interactions."""
    user_alive = np.ones(num_users, dtype=bool)
    item_alive = np.ones(num_items, dtype=bool)
    edges = train
    while True:
        user_deg = np.bincount(edges[:, 0], minlength=num_users)
        item_deg = np.bincount(edges[:, 1], minlength=num_items)
        new_users = user_alive & (user_deg > 0)
        new_items = item_alive & (item_deg > 0)
        if np.array_equal(new_users, user_alive) and np.array_equal(new_items, item_alive):
            break
        user_alive, item_alive = new_users, new_items
        edges = edges[user_alive[edges[:, 0]] & item_alive[edges[:, 1]]]
    return np.flatnonzero(user_alive), np.flatnonzero(item_alive)


def load_feature_matrix(
    path: str | Path, expected_rows: int, modality: str = "vision"
) -> FeatureMatrix:
    """
    Load a feature matrix (MFEA binary, or CSV fallback) and validate it.

    Raises:
        FeatureFormatError: Bad magic, version, truncated payload or ragged CSV.
        FeatureShapeError: Row count differs from expected_rows.
        FeatureDataError: A value is NaN or infinite.
    """
    from .artifacts import read_feature_file

    data = read_feature_file(path)
    if data.shape[0] != expected_rows:
        raise FeatureShapeError(str(path), expected_rows, int(data.shape[0]))
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        row, col = (int(v) for v in bad[0])
        raise FeatureDataError(str(path), row, col)
    return FeatureMatrix(modality=modality, data=_frozen(data))
