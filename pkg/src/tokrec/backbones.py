"""BPR-MF, LightGCN and VBPR backbones in ID-based and ID-free modes.

All three share the same contract: ``representations()`` yields the final
user and item matrices (h_u, h_i), and the score is their inner product.
In ID-free mode the item ID table is replaced by a token encoder (token
tables + Token Cross Network); user ID embeddings are kept in every mode.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConfigurationError
from .optim import Grad, RowSparseGrad, add_row_penalty
from .quantizer import Seed
from .tcn import TcnCache, TokenCrossNetwork
from .token_store import TokenEmbeddingTables, xavier_bound

logger = logging.getLogger(__name__)

BACKBONES = ("bpr_mf", "lightgcn", "vbpr")
MODES = ("id_based", "id_free")

USER_PARAM = "user_embedding"
ITEM_PARAM = "item_embedding"
VBPR_PARAM = "vbpr_projection"


def xavier_table(rng: np.random.Generator, rows: int, dim: int, dtype: type) -> np.ndarray:
    bound = xavier_bound(rows, dim)
    return rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)


def score(h_user: np.ndarray, h_item: np.ndarray) -> float:
    """Inner-product interaction score."""
    return float(np.dot(h_user, h_item))


def bpr_loss(s_pos: np.ndarray | float, s_neg: np.ndarray | float) -> float:
    """Mean of -ln sigmoid(s_pos - s_neg), computed as softplus(s_neg - s_pos)."""
    diff = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, -diff)))


# --- Item encoders ---


class IdItemEncoder:
    """One free embedding row per item."""

    def __init__(self, table: np.ndarray):
        self.table = table

    @classmethod
    def create(cls, num_items: int, dim: int, rng: np.random.Generator, dtype: type = np.float32):
        return cls(xavier_table(rng, num_items, dim, dtype))

    def params(self) -> dict[str, np.ndarray]:
        return {ITEM_PARAM: self.table}

    def forward(self, items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.table[items], items

    def backward(self, grad: np.ndarray, cache: np.ndarray) -> dict[str, Grad]:
        return {ITEM_PARAM: RowSparseGrad.accumulate(cache, grad)}

    def touched_rows(self, items: np.ndarray) -> dict[str, np.ndarray]:
        return {ITEM_PARAM: np.unique(items)}


@dataclass
class _TokenCache:
    rows: np.ndarray
    tcn: TcnCache


class TokenItemEncoder:
    """Token Representations: look up token rows, then cross them with the TCN."""

    def __init__(
        self,
        tables: TokenEmbeddingTables,
        network: TokenCrossNetwork,
        token_rows: np.ndarray,
    ):
        if token_rows.shape[1] != tables.num_tables:
            raise ConfigurationError(
                f"token matrix has {token_rows.shape[1]} slots, {tables.num_tables} tables exist"
            )
        self.tables = tables
        self.network = network
        self.token_rows = token_rows

    def params(self) -> dict[str, np.ndarray]:
        return {**self.tables.params(), **self.network.params()}

    def forward(self, items: np.ndarray) -> tuple[np.ndarray, _TokenCache]:
        rows = self.token_rows[items]
        reps, tcn_cache = self.network.forward(self.tables.gather(rows))
        return reps, _TokenCache(rows=rows, tcn=tcn_cache)

    def backward(self, grad: np.ndarray, cache: _TokenCache) -> dict[str, Grad]:
        tcn_grads, grad_embs = self.network.backward(grad, cache.tcn)
        return {**self.tables.scatter(cache.rows, grad_embs), **tcn_grads}

    def touched_rows(self, items: np.ndarray) -> dict[str, np.ndarray]:
        return self.tables.touched_rows(self.token_rows[items])


# --- LightGCN graph ---


class NormalizedGraph:
    """Symmetric-normalized user-item adjacency D^-1/2 A D^-1/2 over M + N nodes.

    Nodes without train edges get a unit self-loop so they keep their
    layer-0 embedding through every layer.
    """

    def __init__(self, train_edges: np.ndarray, num_users: int, num_items: int):
        self.num_users = num_users
        self.num_items = num_items
        n = num_users + num_items
        users = train_edges[:, 0]
        items = train_edges[:, 1] + num_users
        rows = np.concatenate([users, items])
        cols = np.concatenate([items, users])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

        degree = np.asarray(adj.sum(axis=1)).ravel()
        with np.errstate(divide="ignore"):
            d_inv_sqrt = np.power(degree, -0.5)
        d_inv_sqrt[np.isinf(d_inv_sqrt)] = 0.0
        d_mat = sp.diags(d_inv_sqrt)
        isolated = sp.diags((degree == 0).astype(np.float64))
        self.matrix = (d_mat @ adj @ d_mat + isolated).tocsr()
        self.matrix.sort_indices()
        self.num_isolated = int((degree == 0).sum())

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def propagate(self, embeddings: np.ndarray, num_layers: int) -> np.ndarray:
        """Mean of layers 0..L of repeated normalized-adjacency products."""
        layer = embeddings
        total = embeddings.astype(np.float64)
        for _ in range(num_layers):
            layer = self.matrix @ layer
            total = total + layer
        return (total / (num_layers + 1)).astype(embeddings.dtype)


def lightgcn_propagate(
    user_embs: np.ndarray,
    item_reps: np.ndarray,
    graph: NormalizedGraph,
    num_layers: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Propagate layer-0 user/item embeddings; returns (h_user, h_item)."""
    if num_layers < 0:
        raise ConfigurationError(f"LightGCN needs L >= 0, got {num_layers}")
    out = graph.propagate(np.vstack([user_embs, item_reps]), num_layers)
    return out[: graph.num_users], out[graph.num_users:]


# --- Recommender ---


@dataclass
class StepResult:
    """Loss and gradients of one BPR batch."""

    loss: float
    bpr: float
    grads: dict[str, Grad]


class Recommender:
    """
    A backbone (bpr_mf, lightgcn or vbpr) with an ID or token item encoder.

    Attributes:
        user_embeddings: (M, d) user ID table, used in every mode.
        encoder: IdItemEncoder (ID-based) or TokenItemEncoder (ID-free).
        projection: (F, d) VBPR feature projection, VBPR only.
        item_features: (N, F) concatenated modality features, VBPR only.
        graph: Normalized train graph, LightGCN only.
    """

    def __init__(
        self,
        backbone: str,
        user_embeddings: np.ndarray,
        encoder: IdItemEncoder | TokenItemEncoder,
        num_items: int,
        graph: NormalizedGraph | None = None,
        num_layers: int = 2,
        projection: np.ndarray | None = None,
        item_features: np.ndarray | None = None,
    ):
        if backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone '{backbone}'")
        if backbone == "lightgcn" and graph is None:
            raise ConfigurationError("lightgcn needs the train graph")
        if (backbone == "vbpr") != (projection is not None):
            raise ConfigurationError("a VBPR projection is required for vbpr and only for vbpr")
        if projection is not None and (item_features is None or len(item_features) != num_items):
            raise ConfigurationError("vbpr needs one concatenated feature row per item")
        self.backbone = backbone
        self.user_embeddings = user_embeddings
        self.encoder = encoder
        self.num_items = num_items
        self.graph = graph
        self.num_layers = num_layers
        self.projection = projection
        self.item_features = item_features

    @property
    def mode(self) -> str:
        return "id_free" if isinstance(self.encoder, TokenItemEncoder) else "id_based"

    @property
    def num_users(self) -> int:
        return int(self.user_embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.user_embeddings.shape[1])

    def params(self) -> dict[str, np.ndarray]:
        """All trainable arrays, in a fixed order."""
        named = {USER_PARAM: self.user_embeddings, **self.encoder.params()}
        if self.projection is not None:
            named[VBPR_PARAM] = self.projection
        return named

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into the live parameters, in place."""
        for name, param in self.params().items():
            param[...] = arrays[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.params().items()}

    # --- forward paths ---

    def _item_reps(self, items: np.ndarray) -> tuple[np.ndarray, object]:
        reps, cache = self.encoder.forward(items)
        if self.projection is not None:
            reps = reps + self.item_features[items] @ self.projection
        return reps, cache

    def item_base_representation(self, item: int) -> np.ndarray:
        """ID embedding row (ID-based) or Token Representation r_i (ID-free)."""
        reps, _ = self.encoder.forward(np.array([item], dtype=np.int64))
        return reps[0]

    def vbpr_item_representation(self, item: int) -> np.ndarray:
        """Base representation plus the projected concatenated modality features."""
        if self.projection is None:
            raise ConfigurationError("vbpr_item_representation needs the vbpr backbone")
        return self.item_base_representation(item) + self.item_features[item] @ self.projection

    def representations(self) -> tuple[np.ndarray, np.ndarray]:
        """Final (h_user (M, d), h_item (N, d)) used for scoring."""
        items = np.arange(self.num_items, dtype=np.int64)
        reps, _ = self._item_reps(items)
        if self.backbone == "lightgcn":
            return lightgcn_propagate(self.user_embeddings, reps, self.graph, self.num_layers)
        return self.user_embeddings, reps

    # --- training ---

    def forward_backward(
        self,
        users: np.ndarray,
        pos: np.ndarray,
        neg: np.ndarray,
        l2_coeff: float = 0.0,
    ) -> StepResult:
        """
        BPR loss of a triplet batch and the gradients of every parameter.

        The L2 term is l2_coeff * sum of squared norms of the unique layer-0
        rows the batch touches, divided by the batch size.
        """
        batch = len(users)
        if batch == 0:
            raise ConfigurationError("empty training batch")

        if self.backbone == "lightgcn":
            items = np.arange(self.num_items, dtype=np.int64)
            pos_idx, neg_idx = pos, neg
        else:
            items, inverse = np.unique(np.concatenate([pos, neg]), return_inverse=True)
            inverse = inverse.reshape(-1)
            pos_idx, neg_idx = inverse[:batch], inverse[batch:]

        reps, cache = self._item_reps(items)
        if self.backbone == "lightgcn":
            layer0 = np.vstack([self.user_embeddings, reps])
            final = self.graph.propagate(layer0, self.num_layers)
            h_users = final[: self.num_users][users]
            h_items = final[self.num_users:]
        else:
            h_users = self.user_embeddings[users]
            h_items = reps

        h_pos = h_items[pos_idx]
        h_neg = h_items[neg_idx]
        diff = np.einsum("bd,bd->b", h_users, h_pos - h_neg)
        bpr = float(np.mean(np.logaddexp(0.0, -diff.astype(np.float64))))
        d_diff = (-expit(-diff) / batch).astype(h_users.dtype)

        grad_users = d_diff[:, None] * (h_pos - h_neg)
        grad_items = np.zeros_like(h_items)
        np.add.at(grad_items, pos_idx, d_diff[:, None] * h_users)
        np.add.at(grad_items, neg_idx, -d_diff[:, None] * h_users)

        grads: dict[str, Grad] = {}
        if self.backbone == "lightgcn":
            grad_final = np.zeros((self.graph.num_nodes, self.dim), dtype=grad_items.dtype)
            np.add.at(grad_final, users, grad_users)
            grad_final[self.num_users:] += grad_items
            # the normalized adjacency is symmetric, so backward is the same propagation
            grad_layer0 = self.graph.propagate(grad_final, self.num_layers)
            grads[USER_PARAM] = grad_layer0[: self.num_users]
            grad_reps = grad_layer0[self.num_users:]
        else:
            grads[USER_PARAM] = RowSparseGrad.accumulate(users, grad_users)
            grad_reps = grad_items

        grads.update(self.encoder.backward(grad_reps, cache))
        if self.projection is not None:
            grads[VBPR_PARAM] = self.item_features[items].T @ grad_reps

        penalty = 0.0
        if l2_coeff > 0:
            batch_items = np.concatenate([pos, neg])
            touched = {USER_PARAM: np.unique(users), **self.encoder.touched_rows(batch_items)}
            params = self.params()
            for name, rows in touched.items():
                param = params[name][rows].astype(np.float64)
                penalty += l2_coeff * float(np.sum(param * param)) / batch
                grads[name] = add_row_penalty(grads[name], params[name], rows, l2_coeff / batch)

        return StepResult(loss=bpr + penalty, bpr=bpr, grads=grads)

    # --- accounting ---

    def parameter_breakdown(self) -> dict[str, int]:
        """Allocated parameter counts by role."""
        user = int(self.user_embeddings.size)
        if isinstance(self.encoder, TokenItemEncoder):
            item_side = self.encoder.tables.parameter_count()
            tcn = self.encoder.network.parameter_count()
        else:
            item_side = int(self.encoder.table.size)
            tcn = 0
        extra = int(self.projection.size) if self.projection is not None else 0
        return {
            "user_params": user,
            "item_side_params": item_side,
            "tcn_params": tcn,
            "backbone_extra_params": extra,
        }


def build_recommender(
    backbone: str,
    num_users: int,
    num_items: int,
    dim: int,
    seed: Seed,
    train_edges: np.ndarray | None = None,
    num_layers: int = 2,
    tables: TokenEmbeddingTables | None = None,
    network: TokenCrossNetwork | None = None,
    token_rows: np.ndarray | None = None,
    item_features: np.ndarray | None = None,
    dtype: type = np.float32,
) -> Recommender:
    """
    Allocate a model. Passing token tables, a network and token rows selects
    ID-free mode; otherwise an item ID table is created.
    """
    rng = np.random.default_rng(seed)
    users = xavier_table(rng, num_users, dim, dtype)
    if tables is not None:
        if network is None or token_rows is None:
            raise ConfigurationError("ID-free mode needs tables, a TCN and token rows together")
        encoder: IdItemEncoder | TokenItemEncoder = TokenItemEncoder(tables, network, token_rows)
    else:
        encoder = IdItemEncoder.create(num_items, dim, rng, dtype)

    graph = None
    if backbone == "lightgcn":
        if train_edges is None:
            raise ConfigurationError("lightgcn needs train edges")
        graph = NormalizedGraph(train_edges, num_users, num_items)
        if graph.num_isolated:
            logger.info("%d isolated graph nodes keep their layer-0 embedding", graph.num_isolated)

    projection = None
    features = None
    if backbone == "vbpr":
        if item_features is None:
            raise ConfigurationError("vbpr needs vision and text features")
        features = np.asarray(item_features, dtype=dtype)
        projection = xavier_table(rng, features.shape[1], dim, dtype)

    return Recommender(
        backbone,
        users,
        encoder,
        num_items,
        graph=graph,
        num_layers=num_layers,
        projection=projection,
        item_features=features,
    )
