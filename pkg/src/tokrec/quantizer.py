"""Product quantization of modality features into discrete item tokens.

Each modality's features are split column-wise into D contiguous subvectors,
every subvector slot gets its own K-centroid k-means codebook, and an item's
token in slot x is the index of its nearest centroid. OPQ additionally learns
an orthogonal rotation applied before the split.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import FeatureMatrix
from .errors import ConfigurationError, DivisibilityError

logger = logging.getLogger(__name__)

MAX_CODEBOOK_SIZE = 2**16
DEFAULT_OUTER_ITERS = 10
DEFAULT_KMEANS_ITERS = 25

# Upper bound on the (points x centroids x width) block held in memory at once.
_DISTANCE_BLOCK = 1 << 22

Seed = int | tuple[int, ...]


@dataclass(frozen=True)
class ModalCodebook:
    """Rotation plus D sub-codebooks of K centroids for one modality."""

    modality: str
    rotation: np.ndarray  # (d_m, d_m) float32, orthonormal
    sub_codebooks: tuple[np.ndarray, ...]  # D arrays of shape (K, d_m / D), float32

    @property
    def num_slots(self) -> int:
        return len(self.sub_codebooks)

    @property
    def codebook_size(self) -> int:
        return int(self.sub_codebooks[0].shape[0])

    @property
    def dim(self) -> int:
        return int(self.rotation.shape[0])

    @property
    def sub_dim(self) -> int:
        return int(self.sub_codebooks[0].shape[1])

    def rotate(self, data: np.ndarray) -> np.ndarray:
        """Return data (N, d_m) rotated into codebook space, as float64."""
        data = np.asarray(data, dtype=np.float64)
        rotation = self.rotation.astype(np.float64)
        if np.array_equal(rotation, np.eye(self.dim)):
            return data
        return data @ rotation

    def orthonormality_residual(self) -> float:
        """Max-abs entry of R^T R - I."""
        r = self.rotation.astype(np.float64)
        return float(np.abs(r.T @ r - np.eye(self.dim)).max())


@dataclass(frozen=True)
class TokenAssignment:
    """Per-item token IDs of one modality; entry (i, x) is item i's token in slot x."""

    modality: str
    tokens: np.ndarray  # (N, D) int64
    codebook_size: int

    @property
    def num_items(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def num_slots(self) -> int:
        return int(self.tokens.shape[1])


@dataclass
class KMeansResult:
    """Centroids, final assignments and the WCSS after every assignment step."""

    centroids: np.ndarray  # (K, q) float64
    assignments: np.ndarray  # (P,) int64
    wcss_history: list[float] = field(default_factory=list)

    @property
    def wcss(self) -> float:
        return self.wcss_history[-1]


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest centroid; ties go to the lowest index."""
    num_points, width = points.shape
    k = centroids.shape[0]
    chunk = max(1, _DISTANCE_BLOCK // max(1, k * width))
    labels = np.empty(num_points, dtype=np.int64)
    dists = np.empty(num_points, dtype=np.float64)
    for start in range(0, num_points, chunk):
        block = points[start:start + chunk]
        diff = block[:, None, :] - centroids[None, :, :]
        d = np.einsum("pkq,pkq->pk", diff, diff)
        idx = np.argmin(d, axis=1)
        labels[start:start + chunk] = idx
        dists[start:start + chunk] = d[np.arange(len(block)), idx]
    return labels, dists


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    num_points = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(num_points))
    centroids[0] = points[first]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(closest.sum())
        if total <= 0.0:
            idx = int(rng.integers(num_points))
        else:
            cumulative = np.cumsum(closest)
            idx = int(np.searchsorted(cumulative, rng.random() * total, side="right"))
            idx = min(idx, num_points - 1)
        centroids[c] = points[idx]
        closest = np.minimum(closest, np.sum((points - centroids[c]) ** 2, axis=1))
    return centroids


def _update_centroids(
    points: np.ndarray, labels: np.ndarray, centroids: np.ndarray
) -> np.ndarray:
    """Lloyd mean step; empty clusters move to the points farthest from their centroid."""
    k = centroids.shape[0]
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k)
    updated = centroids.copy()
    used = counts > 0
    updated[used] = sums[used] / counts[used, None]

    empty = np.flatnonzero(~used)
    if len(empty):
        residual = np.sum((points - updated[labels]) ** 2, axis=1)
        farthest = np.argsort(-residual, kind="stable")
        picks = np.resize(farthest, len(empty))
        updated[empty] = points[picks]
    return updated


def kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int,
    seed: Seed,
    init: np.ndarray | None = None,
) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    Stops after max_iters update steps or when assignments stop changing.
    When k exceeds the number of points, every point becomes its own
    centroid and the surplus centroids duplicate the farthest points.

    Args:
        points: (P, q) data.
        k: Number of centroids.
        max_iters: Maximum number of update steps.
        seed: Seed for k-means++ (ignored when init is given).
        init: Optional (k, q) warm-start centroids.
    """
    data = np.asarray(points, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1 or k < 1:
        raise ConfigurationError(f"kmeans needs P>=1, q>=1, K>=1 (got {data.shape}, K={k})")
    num_points = data.shape[0]

    if k > num_points:
        logger.warning("K=%d exceeds the %d points; duplicating farthest points", k, num_points)
        centroids = np.empty((k, data.shape[1]), dtype=np.float64)
        centroids[:num_points] = data
        # Every point sits on its own centroid, so all residuals are 0 and
        # the stable order is ascending index.
        centroids[num_points:] = data[np.resize(np.arange(num_points), k - num_points)]
        labels, dists = _nearest(data, centroids)
        return KMeansResult(centroids, labels, [float(dists.sum())])

    rng = np.random.default_rng(seed)
    if init is not None:
        centroids = np.array(init, dtype=np.float64, copy=True)
    else:
        centroids = _kmeans_plus_plus(data, k, rng)

    labels, dists = _nearest(data, centroids)
    history = [float(dists.sum())]
    for _ in range(max_iters):
        centroids = _update_centroids(data, labels, centroids)
        new_labels, dists = _nearest(data, centroids)
        history.append(float(dists.sum()))
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break
    return KMeansResult(centroids, labels, history)


def _check_partition(features: FeatureMatrix, num_slots: int, codebook_size: int) -> None:
    if num_slots < 1 or features.dim % num_slots:
        raise DivisibilityError(features.dim, num_slots, features.modality)
    if not 1 <= codebook_size <= MAX_CODEBOOK_SIZE:
        raise ConfigurationError(f"K must be in [1, {MAX_CODEBOOK_SIZE}], got {codebook_size}")


def _fit_slots(
    data: np.ndarray,
    num_slots: int,
    codebook_size: int,
    max_iters: int,
    seed: Seed,
    init: list[np.ndarray] | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Run k-means independently on each contiguous column block."""
    width = data.shape[1] // num_slots
    centroids: list[np.ndarray] = []
    labels = np.empty((data.shape[0], num_slots), dtype=np.int64)
    for x in range(num_slots):
        block = data[:, x * width:(x + 1) * width]
        result = kmeans(
            block,
            codebook_size,
            max_iters,
            seed=_slot_seed(seed, x),
            init=None if init is None else init[x],
        )
        logger.debug("slot %d/%d: WCSS %.6g after %d steps", x + 1, num_slots, result.wcss,
                     len(result.wcss_history) - 1)
        centroids.append(result.centroids)
        labels[:, x] = result.assignments
    return centroids, labels


def _slot_seed(seed: Seed, slot: int) -> tuple[int, ...]:
    base = seed if isinstance(seed, tuple) else (seed,)
    return (*base, slot)


def _reconstruct(centroids: list[np.ndarray], labels: np.ndarray) -> np.ndarray:
    return np.concatenate([c[labels[:, x]] for x, c in enumerate(centroids)], axis=1)


def _as_codebook(modality: str, rotation: np.ndarray, centroids: list[np.ndarray]) -> ModalCodebook:
    return ModalCodebook(
        modality=modality,
        rotation=rotation.astype(np.float32),
        sub_codebooks=tuple(c.astype(np.float32) for c in centroids),
    )


def fit_pq(
    features: FeatureMatrix,
    num_slots: int,
    codebook_size: int,
    max_iters: int = DEFAULT_KMEANS_ITERS,
    seed: Seed = 0,
) -> ModalCodebook:
    """
    Fit plain product-quantization codebooks (rotation = identity).

    Raises:
        DivisibilityError: If d_m is not divisible by num_slots.
    """
    _check_partition(features, num_slots, codebook_size)
    logger.info("fitting PQ for %s: D=%d K=%d", features.modality, num_slots, codebook_size)
    data = np.asarray(features.data, dtype=np.float64)
    centroids, _ = _fit_slots(data, num_slots, codebook_size, max_iters, seed)
    return _as_codebook(features.modality, np.eye(features.dim), centroids)


def fit_opq(
    features: FeatureMatrix,
    num_slots: int,
    codebook_size: int,
    outer_iters: int = DEFAULT_OUTER_ITERS,
    kmeans_iters: int = DEFAULT_KMEANS_ITERS,
    seed: Seed = 0,
    trace: list[float] | None = None,
) -> ModalCodebook:
    """
    Fit OPQ by alternating codebook fitting and Procrustes rotation updates.

    The rotation starts at identity. Each outer iteration fits the
    sub-codebooks on the rotated features (warm-started from the previous
    iteration) and then sets R = U V^T from the SVD of X^T Y, where Y is the
    current reconstruction. With outer_iters=0 the result equals fit_pq.

    Args:
        trace: If given, receives the mean squared reconstruction error after
            every codebook fit (outer iterations, then the final fit).

    Raises:
        DivisibilityError: If d_m is not divisible by num_slots.
    """
    _check_partition(features, num_slots, codebook_size)
    data = np.asarray(features.data, dtype=np.float64)
    rotation = np.eye(features.dim)
    rotated = data
    warm: list[np.ndarray] | None = None

    for t in range(outer_iters):
        centroids, labels = _fit_slots(rotated, num_slots, codebook_size, kmeans_iters, seed, warm)
        recon = _reconstruct(centroids, labels)
        error = float(np.mean(np.sum((rotated - recon) ** 2, axis=1)))
        logger.info("OPQ %s iteration %d/%d: error %.6g", features.modality, t + 1, outer_iters, error)
        if trace is not None:
            trace.append(error)
        # Reflections are allowed; only reconstruction error matters.
        u, _, vt = np.linalg.svd(data.T @ recon)
        rotation = u @ vt
        rotated = data @ rotation
        warm = centroids

    centroids, labels = _fit_slots(rotated, num_slots, codebook_size, kmeans_iters, seed, warm)
    if trace is not None:
        recon = _reconstruct(centroids, labels)
        trace.append(float(np.mean(np.sum((rotated - recon) ** 2, axis=1))))
    return _as_codebook(features.modality, rotation, centroids)


def assign_tokens(features: FeatureMatrix, codebook: ModalCodebook) -> TokenAssignment:
    """Map each item's rotated subvectors to their nearest centroids."""
    if features.dim != codebook.dim:
        raise ConfigurationError(
            f"{features.modality} features have dim {features.dim}, codebook expects {codebook.dim}"
        )
    rotated = codebook.rotate(features.data)
    width = codebook.sub_dim
    tokens = np.empty((features.rows, codebook.num_slots), dtype=np.int64)
    for x, centroids in enumerate(codebook.sub_codebooks):
        block = rotated[:, x * width:(x + 1) * width]
        tokens[:, x], _ = _nearest(block, centroids.astype(np.float64))
    return TokenAssignment(
        modality=features.modality, tokens=tokens, codebook_size=codebook.codebook_size
    )


def token_histogram(assignment: TokenAssignment) -> np.ndarray:
    """(D, K) array; entry [x, j] counts items whose slot-x token is j."""
    return np.stack(
        [
            np.bincount(assignment.tokens[:, x], minlength=assignment.codebook_size)
            for x in range(assignment.num_slots)
        ]
    ).astype(np.int64)


def quantization_error(
    features: FeatureMatrix, codebook: ModalCodebook, assignment: TokenAssignment
) -> float:
    """Mean over items of the squared distance between rotated feature and reconstruction."""
    rotated = codebook.rotate(features.data)
    centroids = [c.astype(np.float64) for c in codebook.sub_codebooks]
    recon = _reconstruct(centroids, assignment.tokens)
    return float(np.mean(np.sum((rotated - recon) ** 2, axis=1)))
