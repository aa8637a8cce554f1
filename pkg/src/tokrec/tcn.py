"""Token Cross Network: item representations from token embeddings.

A group of n token embeddings (each of width d) is combined by three terms:

    one-order     sum_x w_x e_x
    second-order  sum_{x<y} w_x w_y (e_x * e_y)
    high-order    MLP(concat(e_1 .. e_n)), rectifier hidden layer, linear output

Modal-specific networks run one group per modality and add the results;
the modal-agnostic network runs a single group over all slots. The "mean"
and "linear" aggregators replace the whole network for ablations.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .quantizer import Seed
from .token_store import xavier_bound

VARIANTS = ("modal_specific", "modal_agnostic")
AGGREGATORS = ("cross", "mean", "linear")

MlpLayer = tuple[np.ndarray, np.ndarray]  # (weight (out, in), bias (out,))


def one_order(embs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the n embeddings; embs is (..., n, d)."""
    return np.einsum("...nd,n->...d", embs, weights)


def second_order(embs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Pairwise weighted element-wise products via 0.5 * (square of sum - sum of squares)."""
    weighted = embs * weights[:, None]
    total = weighted.sum(axis=-2)
    return 0.5 * (total * total - (weighted * weighted).sum(axis=-2))


def _mlp_forward(h0: np.ndarray, layers: Sequence[MlpLayer]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns the output and the input of every layer."""
    inputs = []
    h = h0
    for idx, (weight, bias) in enumerate(layers):
        if h.shape[-1] != weight.shape[1]:
            raise ConfigurationError(
                f"MLP layer {idx} expects input width {weight.shape[1]}, got {h.shape[-1]}"
            )
        inputs.append(h)
        h = h @ weight.T + bias
        if idx < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h, inputs


def high_order(embs: np.ndarray, layers: Sequence[MlpLayer]) -> np.ndarray:
    """MLP over the concatenation of the n embeddings in slot order."""
    h0 = embs.reshape(embs.shape[:-2] + (embs.shape[-2] * embs.shape[-1],))
    out, _ = _mlp_forward(h0, layers)
    return out


@dataclass
class GroupParams:
    """Slot weights and MLP of one crossing group."""

    slot_weights: np.ndarray  # (n,)
    layers: list[MlpLayer] = field(default_factory=list)


def group_forward(embs: np.ndarray, params: GroupParams) -> np.ndarray:
    """one_order + second_order + high_order for one group."""
    return (
        one_order(embs, params.slot_weights)
        + second_order(embs, params.slot_weights)
        + high_order(embs, params.layers)
    )


def token_representation_modal_specific(
    grouped: dict[str, np.ndarray], params: dict[str, GroupParams]
) -> np.ndarray:
    """r_i = sum over modalities (in the given order) of each modality's group output."""
    if set(grouped) != set(params):
        raise ConfigurationError("modal-specific network needs parameters for every modality")
    result = None
    for modality, embs in grouped.items():
        r = group_forward(embs, params[modality])
        result = r if result is None else result + r
    return result


def token_representation_modal_agnostic(embs: np.ndarray, params: GroupParams) -> np.ndarray:
    """One group over all slots jointly."""
    return group_forward(embs, params)


@dataclass
class TcnCache:
    """Forward state needed by backward."""

    embs: np.ndarray
    group_state: list[dict[str, np.ndarray | list[np.ndarray]]] = field(default_factory=list)


class TokenCrossNetwork:
    """Batched TCN over (B, S, d) token embeddings with exact analytic gradients.

    Args:
        groups: Named canonical slot positions per crossing group.
        dim: Embedding width d.
        aggregator: "cross", "mean" or "linear".
        seed: Seed for Xavier initialization of MLP / linear weights.
    """

    def __init__(
        self,
        groups: dict[str, list[int]],
        dim: int,
        aggregator: str = "cross",
        seed: Seed = 0,
        dtype: type = np.float32,
    ):
        if aggregator not in AGGREGATORS:
            raise ConfigurationError(f"unknown aggregator '{aggregator}'")
        self.groups = {name: np.asarray(slots, dtype=np.int64) for name, slots in groups.items()}
        self.num_slots = sum(len(s) for s in self.groups.values())
        self.dim = dim
        self.aggregator = aggregator
        self.group_params: dict[str, GroupParams] = {}
        self.linear: MlpLayer | None = None

        rng = np.random.default_rng(seed)
        if aggregator == "cross":
            for name, slots in self.groups.items():
                n = len(slots)
                self.group_params[name] = GroupParams(
                    slot_weights=np.full(n, 1.0 / n, dtype=dtype),
                    layers=[
                        _xavier_layer(rng, n * dim, dim, dtype),
                        _xavier_layer(rng, dim, dim, dtype),
                    ],
                )
        elif aggregator == "linear":
            self.linear = _xavier_layer(rng, self.num_slots * dim, dim, dtype)

    @classmethod
    def for_layout(
        cls,
        modalities: Sequence[str],
        slots_of: dict[str, list[int]],
        dim: int,
        variant: str = "modal_specific",
        aggregator: str = "cross",
        seed: Seed = 0,
        dtype: type = np.float32,
    ) -> "TokenCrossNetwork":
        """Build groups from the table layout: one per modality, or a single joint one."""
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown TCN variant '{variant}'")
        if variant == "modal_specific":
            groups = {m: list(slots_of[m]) for m in modalities}
        else:
            groups = {"all": [s for m in modalities for s in slots_of[m]]}
        return cls(groups, dim, aggregator=aggregator, seed=seed, dtype=dtype)

    def params(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {}
        for name, gp in self.group_params.items():
            named[f"tcn/{name}/slot_weights"] = gp.slot_weights
            for idx, (weight, bias) in enumerate(gp.layers):
                named[f"tcn/{name}/mlp{idx}/weight"] = weight
                named[f"tcn/{name}/mlp{idx}/bias"] = bias
        if self.linear is not None:
            named["tcn/linear/weight"] = self.linear[0]
            named["tcn/linear/bias"] = self.linear[1]
        return named

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params().values())

    def forward(self, embs: np.ndarray) -> tuple[np.ndarray, TcnCache]:
        """Token Representations (B, d) for a (B, S, d) block."""
        cache = TcnCache(embs=embs)
        if self.aggregator == "mean":
            return embs.mean(axis=1), cache
        if self.aggregator == "linear":
            weight, bias = self.linear
            return embs.reshape(len(embs), -1) @ weight.T + bias, cache

        result = None
        for name, slots in self.groups.items():
            gp = self.group_params[name]
            e = embs[:, slots, :]
            weighted = e * gp.slot_weights[:, None]
            total = weighted.sum(axis=1)
            second = 0.5 * (total * total - (weighted * weighted).sum(axis=1))
            high, inputs = _mlp_forward(e.reshape(len(e), -1), gp.layers)
            r = total + second + high
            result = r if result is None else result + r
            cache.group_state.append({"total": total, "weighted": weighted, "inputs": inputs})
        return result, cache

    def backward(
        self, grad: np.ndarray, cache: TcnCache
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """
        Gradients of a scalar loss given dL/dr (B, d).

        Returns:
            (parameter gradients keyed like params(), dL/d embs of shape (B, S, d)).
        """
        embs = cache.embs
        grad_embs = np.zeros_like(embs)
        grads: dict[str, np.ndarray] = {}

        if self.aggregator == "mean":
            grad_embs += grad[:, None, :] / embs.shape[1]
            return grads, grad_embs
        if self.aggregator == "linear":
            weight, _ = self.linear
            flat = embs.reshape(len(embs), -1)
            grads["tcn/linear/weight"] = grad.T @ flat
            grads["tcn/linear/bias"] = grad.sum(axis=0)
            grad_embs += (grad @ weight).reshape(embs.shape)
            return grads, grad_embs

        for (name, slots), state in zip(self.groups.items(), cache.group_state):
            gp = self.group_params[name]
            w = gp.slot_weights
            e = embs[:, slots, :]
            total = state["total"]
            weighted = state["weighted"]

            # second-order: d/d(w_x e_x) = total - w_x e_x
            rest = total[:, None, :] - weighted
            grad_e = grad[:, None, :] * w[:, None] * (1.0 + rest)
            grad_w = np.einsum("bd,bnd->n", grad, e * (1.0 + rest))

            grad_h0 = self._mlp_backward(name, gp.layers, state["inputs"], grad, grads)
            grad_e = grad_e + grad_h0.reshape(e.shape)

            grads[f"tcn/{name}/slot_weights"] = grad_w
            grad_embs[:, slots] += grad_e
        return grads, grad_embs

    @staticmethod
    def _mlp_backward(
        name: str,
        layers: list[MlpLayer],
        inputs: list[np.ndarray],
        grad: np.ndarray,
        grads: dict[str, np.ndarray],
    ) -> np.ndarray:
        delta = grad
        for idx in range(len(layers) - 1, -1, -1):
            weight, _ = layers[idx]
            h_in = inputs[idx]
            grads[f"tcn/{name}/mlp{idx}/weight"] = delta.T @ h_in
            grads[f"tcn/{name}/mlp{idx}/bias"] = delta.sum(axis=0)
            delta = delta @ weight
            if idx > 0:
                # inputs[idx] is the rectified output of layer idx - 1
                delta = delta * (h_in > 0)
        return delta


def _xavier_layer(rng: np.random.Generator, fan_in: int, fan_out: int, dtype: type) -> MlpLayer:
    bound = xavier_bound(fan_in, fan_out)
    weight = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    return weight, np.zeros(fan_out, dtype=dtype)


def tcn_backward(
    network: TokenCrossNetwork, grad: np.ndarray, cache: TcnCache
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Module-level alias of TokenCrossNetwork.backward."""
    return network.backward(grad, cache)
