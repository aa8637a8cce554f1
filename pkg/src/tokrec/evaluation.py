"""Full-ranking evaluation, popularity buckets, parameter audits and token analytics."""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Sequence

import numpy as np

from .dataset import InteractionDataset
from .errors import ConfigurationError
from .quantizer import TokenAssignment, token_histogram

logger = logging.getLogger(__name__)

TOP_KS = (10, 20)
BUCKET_K = 20
# Inclusive train-degree ranges; None means unbounded.
DEFAULT_BUCKETS: tuple[tuple[int, int | None], ...] = (
    (0, 5),
    (6, 10),
    (11, 20),
    (21, 50),
    (51, None),
)
USER_CHUNK = 256


def _utc_now() -> str:
    """Return current UTC time as ISO 8601 string."""
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def bucket_label(bounds: tuple[int, int | None]) -> str:
    low, high = bounds
    return f"{low}+" if high is None else f"{low}-{high}"


def bucket_of(degree: int, buckets: Sequence[tuple[int, int | None]] = DEFAULT_BUCKETS) -> int:
    """Index of the bucket containing a train degree, or -1."""
    for idx, (low, high) in enumerate(buckets):
        if degree >= low and (high is None or degree <= high):
            return idx
    return -1


# --- Ranking and metrics ---


def rank_items_for_user(
    user: int,
    h_user: np.ndarray,
    h_item: np.ndarray,
    exclusions: np.ndarray | Sequence[int] = (),
) -> np.ndarray:
    """All non-excluded items by descending score; equal scores by ascending index."""
    scores = h_item @ h_user[user]
    order = np.argsort(-scores, kind="stable")
    excluded = np.asarray(exclusions, dtype=np.int64)
    if len(excluded):
        order = order[~np.isin(order, excluded)]
    return order


def recall_at_k(ranked: Sequence[int], relevant: Sequence[int], k: int) -> float | None:
    """|top-k ∩ relevant| / |relevant|; None when there is nothing to recall."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        return None
    hits = sum(1 for i in list(ranked)[:k] if int(i) in relevant)
    return hits / len(relevant)


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))


def ndcg_at_k(ranked: Sequence[int], relevant: Sequence[int], k: int) -> float | None:
    """
    Binary-relevance NDCG with the ideal DCG truncated at min(k, |relevant|).

    Returns None for an empty relevant set; such users are skipped, not scored 0.
    """
    relevant = set(int(i) for i in relevant)
    if not relevant:
        return None
    top = list(ranked)[:k]
    gains = np.array([1.0 if int(i) in relevant else 0.0 for i in top])
    discounts = _discounts(k)
    dcg = float(np.sum(gains * discounts[: len(gains)]))
    idcg = float(np.sum(discounts[: min(k, len(relevant))]))
    return dcg / idcg


def _metrics_from_hits(hits: np.ndarray, num_relevant: int, k: int) -> tuple[float, float]:
    top = hits[:k]
    discounts = _discounts(k)
    recall = float(top.sum()) / num_relevant
    dcg = float(np.sum(top * discounts[: len(top)]))
    idcg = float(np.sum(discounts[: min(k, num_relevant)]))
    return recall, dcg / idcg


# --- Evaluator ---


@dataclass
class UserMetrics:
    user: int
    num_relevant: int
    values: dict[str, float]


@dataclass
class BucketMetrics:
    label: str
    num_items: int
    num_users: int
    recall: float
    ndcg: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_items": self.num_items,
            "num_users": self.num_users,
            f"recall@{BUCKET_K}": self.recall,
            f"ndcg@{BUCKET_K}": self.ndcg,
        }


@dataclass
class EvalResult:
    """Mean metrics over evaluated users, plus bucket and per-user detail."""

    split: str
    metrics: dict[str, float]
    num_evaluated_users: int
    buckets: list[BucketMetrics] = field(default_factory=list)
    per_user: list[UserMetrics] = field(default_factory=list)

    def metric(self, name: str) -> float:
        return self.metrics[name]


class Evaluator:
    """
    Scores every user against every item and ranks exactly.

    Users whose relevant set is empty are skipped. Work is split into user
    chunks evaluated on a thread pool; chunk results are merged in user
    order so means do not depend on the thread count.
    """

    def __init__(
        self,
        dataset: InteractionDataset,
        ks: Sequence[int] = TOP_KS,
        buckets: Sequence[tuple[int, int | None]] = DEFAULT_BUCKETS,
        threads: int | None = None,
        chunk_size: int = USER_CHUNK,
    ):
        self.dataset = dataset
        self.ks = tuple(sorted(ks))
        self.buckets = tuple(buckets)
        self.threads = threads
        self.chunk_size = chunk_size
        self._train = dataset.user_items("train")
        self._val = dataset.user_items("val")
        self._test = dataset.user_items("test")
        degree = dataset.item_train_degree
        self.item_bucket = np.array([bucket_of(int(d), self.buckets) for d in degree], dtype=np.int64)

    def _exclusions(self, split: str, user: int) -> np.ndarray:
        if split == "val":
            return self._train[user]
        return np.concatenate([self._train[user], self._val[user]])

    def _relevant(self, split: str) -> list[np.ndarray]:
        if split == "val":
            return self._val
        if split == "test":
            return self._test
        raise ConfigurationError(f"cannot evaluate split '{split}'")

    def _eval_chunk(
        self, users: np.ndarray, split: str, h_user: np.ndarray, h_item: np.ndarray
    ) -> list[tuple[UserMetrics, list[tuple[float, float] | None]]]:
        relevant_sets = self._relevant(split)
        max_k = self.ks[-1]
        scores = h_user[users].astype(np.float64) @ h_item.astype(np.float64).T
        out = []
        for row, user in enumerate(users):
            relevant = relevant_sets[user]
            if len(relevant) == 0:
                continue
            user_scores = scores[row]
            user_scores[self._exclusions(split, user)] = -np.inf
            top = np.argsort(-user_scores, kind="stable")[:max_k]
            is_hit = np.isin(top, relevant)
            values: dict[str, float] = {}
            for k in self.ks:
                values[f"recall@{k}"], values[f"ndcg@{k}"] = _metrics_from_hits(
                    is_hit, len(relevant), k
                )
            per_bucket: list[tuple[float, float] | None] = []
            rel_buckets = self.item_bucket[relevant]
            for b in range(len(self.buckets)):
                bucket_rel = relevant[rel_buckets == b]
                if len(bucket_rel) == 0:
                    per_bucket.append(None)
                    continue
                per_bucket.append(
                    _metrics_from_hits(np.isin(top, bucket_rel), len(bucket_rel), BUCKET_K)
                )
            out.append((UserMetrics(int(user), len(relevant), values), per_bucket))
        return out

    def evaluate(self, h_user: np.ndarray, h_item: np.ndarray, split: str = "test") -> EvalResult:
        relevant_sets = self._relevant(split)
        users = np.arange(self.dataset.num_users, dtype=np.int64)
        chunks = [users[i:i + self.chunk_size] for i in range(0, len(users), self.chunk_size)]
        if self.threads == 1 or len(chunks) <= 1:
            results = [self._eval_chunk(c, split, h_user, h_item) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda c: self._eval_chunk(c, split, h_user, h_item), chunks))

        per_user: list[UserMetrics] = []
        bucket_values: list[list[tuple[float, float]]] = [[] for _ in self.buckets]
        for chunk in results:
            for user_metrics, per_bucket in chunk:
                per_user.append(user_metrics)
                for b, value in enumerate(per_bucket):
                    if value is not None:
                        bucket_values[b].append(value)

        names = [f"{m}@{k}" for k in self.ks for m in ("recall", "ndcg")]
        metrics = {
            name: float(np.mean([u.values[name] for u in per_user])) if per_user else 0.0
            for name in names
        }

        split_items = np.unique(np.concatenate(relevant_sets)) if relevant_sets else np.zeros(0, np.int64)
        buckets = []
        for b, bounds in enumerate(self.buckets):
            values = bucket_values[b]
            buckets.append(
                BucketMetrics(
                    label=bucket_label(bounds),
                    num_items=int(np.sum(self.item_bucket[split_items] == b)),
                    num_users=len(values),
                    recall=float(np.mean([v[0] for v in values])) if values else 0.0,
                    ndcg=float(np.mean([v[1] for v in values])) if values else 0.0,
                )
            )
        logger.debug("evaluated %d users on %s", len(per_user), split)
        return EvalResult(
            split=split,
            metrics=metrics,
            num_evaluated_users=len(per_user),
            buckets=buckets,
            per_user=per_user,
        )


def bucket_analysis(
    h_user: np.ndarray,
    h_item: np.ndarray,
    dataset: InteractionDataset,
    buckets: Sequence[tuple[int, int | None]] = DEFAULT_BUCKETS,
    threads: int | None = None,
) -> list[BucketMetrics]:
    """Test recall/ndcg@20 with each user's relevant set restricted to one bucket."""
    evaluator = Evaluator(dataset, buckets=buckets, threads=threads)
    return evaluator.evaluate(h_user, h_item, split="test").buckets


# --- Parameter audit ---


@dataclass
class ParameterAudit:
    user_params: int
    item_side_params: int
    tcn_params: int
    backbone_extra_params: int
    id_based_equivalent: int

    @property
    def ratio(self) -> float:
        return self.item_side_params / self.id_based_equivalent

    @property
    def total_params(self) -> int:
        return (
            self.user_params + self.item_side_params + self.tcn_params + self.backbone_extra_params
        )

    def counts(self) -> dict[str, int]:
        return {
            "user_params": self.user_params,
            "item_side_params": self.item_side_params,
            "tcn_params": self.tcn_params,
            "backbone_extra_params": self.backbone_extra_params,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.counts(),
            "id_based_equivalent": self.id_based_equivalent,
            "ratio": self.ratio,
            "total_params": self.total_params,
        }


def tcn_parameter_count(
    group_sizes: Sequence[int], dim: int, aggregator: str = "cross"
) -> int:
    """Slot weights plus the two MLP layers of each group; or the ablation replacement."""
    if aggregator == "mean":
        return 0
    if aggregator == "linear":
        total_slots = sum(group_sizes)
        return total_slots * dim * dim + dim
    return sum(n + (n * dim * dim + dim) + (dim * dim + dim) for n in group_sizes)


def parameter_audit(
    num_users: int,
    num_items: int,
    dim: int,
    mode: str = "id_free",
    slots: dict[str, int] | None = None,
    codebook_size: int = 256,
    tcn_variant: str = "modal_specific",
    aggregator: str = "cross",
    vbpr_feature_dim: int | None = None,
) -> ParameterAudit:
    """
    Parameter counts from shape formulas alone.

    Args:
        slots: Token slot count D per active modality (ID-free mode).
        vbpr_feature_dim: Concatenated feature width when the backbone is VBPR.
    """
    id_equivalent = num_items * dim
    if mode == "id_based":
        item_side = id_equivalent
        tcn = 0
    else:
        if not slots:
            raise ConfigurationError("ID-free audit needs the slot count per modality")
        item_side = sum(d * codebook_size * dim for d in slots.values())
        if tcn_variant == "modal_specific":
            groups = list(slots.values())
        else:
            groups = [sum(slots.values())]
        tcn = tcn_parameter_count(groups, dim, aggregator)
    extra = vbpr_feature_dim * dim if vbpr_feature_dim else 0
    return ParameterAudit(
        user_params=num_users * dim,
        item_side_params=item_side,
        tcn_params=tcn,
        backbone_extra_params=extra,
        id_based_equivalent=id_equivalent,
    )


# --- Token analytics ---


def retrieve_similar_by_tokens(
    token_rows: np.ndarray, query: int, top_n: int
) -> list[tuple[int, int]]:
    """
    Items ranked by how many (modality, slot) positions share the query's token.

    Returns:
        (item, overlap) pairs; overlap descending, ties by ascending index,
        the query itself excluded.
    """
    if not 0 <= query < len(token_rows):
        raise ConfigurationError(f"query item {query} outside [0, {len(token_rows)})")
    if top_n <= 0:
        return []
    overlap = (token_rows == token_rows[query]).sum(axis=1)
    order = np.lexsort((np.arange(len(token_rows)), -overlap))
    order = order[order != query][:top_n]
    return [(int(i), int(overlap[i])) for i in order]


def token_distinguishability(token_rows: np.ndarray) -> dict[str, Any]:
    """How many items share their full token signature with another item."""
    if len(token_rows) == 0:
        return {"num_items": 0, "distinct_signatures": 0, "collision_rate": 0.0}
    _, inverse, counts = np.unique(token_rows, axis=0, return_inverse=True, return_counts=True)
    shared = counts[inverse.reshape(-1)] > 1
    return {
        "num_items": int(len(token_rows)),
        "distinct_signatures": int(len(counts)),
        "collision_rate": float(shared.mean()),
    }


def token_load_stats(assignment: TokenAssignment) -> dict[str, Any]:
    """Per-slot normalized entropy and extreme loads relative to the uniform load N/K."""
    counts = token_histogram(assignment).astype(np.float64)
    k = assignment.codebook_size
    n = assignment.num_items
    mean_load = n / k
    entropies = []
    for row in counts:
        p = row[row > 0] / n
        entropy = float(-(p * np.log(p)).sum())
        entropies.append(entropy / np.log(k) if k > 1 else 1.0)
    return {
        "modality": assignment.modality,
        "mean_load": mean_load,
        "normalized_entropy": entropies,
        "max_load_ratio": float(counts.max() / mean_load) if n else 0.0,
        "min_load_ratio": float(counts.min() / mean_load) if n else 0.0,
    }


# --- Report ---


def run_id(config: dict[str, Any], checkpoint_bytes: bytes) -> str:
    """Short content hash of the config echo and checkpoint."""
    digest = hashlib.sha1()
    digest.update(json.dumps(config, sort_keys=True).encode("utf-8"))
    digest.update(checkpoint_bytes)
    return digest.hexdigest()[:12]


@dataclass
class MetricsReport:
    """Everything emitted by an evaluation run."""

    run_id: str
    config: dict[str, Any]
    result: EvalResult
    audit: ParameterAudit
    runtime_audit: dict[str, int]
    ablation: dict[str, Any]
    token_analytics: dict[str, Any] = field(default_factory=dict)
    generated_at: str = field(default_factory=_utc_now)

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "generated_at": self.generated_at,
            "config": self.config,
            "split": self.result.split,
            "metrics": self.result.metrics,
            "num_evaluated_users": self.result.num_evaluated_users,
            "buckets": {b.label: b.to_dict() for b in self.result.buckets},
            "parameter_audit": self.audit.to_dict(),
            "runtime_audit": self.runtime_audit,
            "ablation": self.ablation,
            "token_analytics": self.token_analytics,
        }


def per_user_lines(result: EvalResult) -> list[str]:
    """TSV lines: header, then one row per evaluated user."""
    names = list(result.metrics)
    lines = ["\t".join(["user", "num_relevant", *names])]
    for u in result.per_user:
        lines.append(
            "\t".join([str(u.user), str(u.num_relevant), *(f"{u.values[n]:.6f}" for n in names)])
        )
    return lines
