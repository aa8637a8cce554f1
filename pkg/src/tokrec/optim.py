"""Adam with lazy (row-sparse) updates for embedding tables."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class RowSparseGrad:
    """Gradient that is non-zero only on some rows of a parameter.

    Attributes:
        rows: Unique, ascending row indices.
        values: Gradient rows, shape (len(rows), *param.shape[1:]).
    """

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def accumulate(cls, indices: np.ndarray, grads: np.ndarray) -> "RowSparseGrad":
        """Sum gradient rows that hit the same index, in input order."""
        rows, inverse = np.unique(indices, return_inverse=True)
        values = np.zeros((len(rows),) + grads.shape[1:], dtype=grads.dtype)
        np.add.at(values, inverse.reshape(-1), grads)
        return cls(rows=rows.astype(np.int64), values=values)

    def add_rows(self, rows: np.ndarray, values: np.ndarray) -> None:
        """Add values at rows; rows must be a subset of self.rows."""
        pos = np.searchsorted(self.rows, rows)
        self.values[pos] += values


Grad = np.ndarray | RowSparseGrad


def add_row_penalty(grad: Grad, param: np.ndarray, rows: np.ndarray, coeff: float) -> Grad:
    """Add the gradient of coeff * sum ||param[rows]||^2 to grad."""
    extra = 2.0 * coeff * param[rows]
    if isinstance(grad, RowSparseGrad):
        grad.add_rows(rows, extra)
        return grad
    grad[rows] += extra
    return grad


@dataclass
class AdamState:
    """First/second moments per parameter and the global timestep."""

    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            moments={name: (np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()},
            step=0,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {"adam/step": np.array([self.step], dtype=np.int64)}
        for name, (m, v) in self.moments.items():
            arrays[f"adam/m/{name}"] = m
            arrays[f"adam/v/{name}"] = v
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], params: dict[str, np.ndarray]) -> "AdamState":
        state = cls.create(params)
        if "adam/step" in arrays:
            state.step = int(arrays["adam/step"][0])
        for name, (m, v) in state.moments.items():
            if f"adam/m/{name}" in arrays:
                m[...] = arrays[f"adam/m/{name}"]
                v[...] = arrays[f"adam/v/{name}"]
        return state


class Adam:
    """Adam optimizer; row-sparse gradients only touch their rows' moments.

    Bias correction always uses the global step, so a row updated for the
    first time late in training is corrected with the same factor as every
    other row in that step.
    """

    def __init__(
        self,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {learning_rate}")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, Grad], state: AdamState
    ) -> None:
        """Update params in place from grads, in the order of params."""
        state.step += 1
        bc1 = 1.0 - self.beta1**state.step
        bc2 = 1.0 - self.beta2**state.step
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            m, v = state.moments[name]
            if isinstance(grad, RowSparseGrad):
                if len(grad.rows) == 0:
                    continue
                rows, g = grad.rows, grad.values
                m_rows = self.beta1 * m[rows] + (1.0 - self.beta1) * g
                v_rows = self.beta2 * v[rows] + (1.0 - self.beta2) * g * g
                m[rows] = m_rows
                v[rows] = v_rows
                update = (m_rows / bc1) / (np.sqrt(v_rows / bc2) + self.eps)
                param[rows] -= (self.learning_rate * update).astype(param.dtype)
            else:
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                param -= (self.learning_rate * update).astype(param.dtype)
