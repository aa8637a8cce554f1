"""Token embedding tables: one trainable K x d table per (modality, slot)."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import MODALITIES
from .artifacts import validate_tokens
from .errors import ConfigurationError
from .optim import RowSparseGrad
from .quantizer import Seed, TokenAssignment


def xavier_bound(fan_in: int, fan_out: int) -> float:
    """Half-width of the Xavier-uniform distribution."""
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass(frozen=True)
class SlotKey:
    """Position of one table in the canonical token order."""

    modality: str
    slot: int

    @property
    def param_name(self) -> str:
        return f"token_table/{self.modality}/{self.slot}"


class TokenEmbeddingTables:
    """Per-slot embedding tables in canonical order (vision slots, then text slots).

    Rows are shared: every item whose slot-x token is j reads row j of table x,
    so updating that row moves all of those items at once.
    """

    def __init__(self, layout: Sequence[SlotKey], tables: Sequence[np.ndarray]):
        if len(layout) != len(tables) or not tables:
            raise ConfigurationError("token tables and layout must be non-empty and aligned")
        shape = tables[0].shape
        if any(t.shape != shape for t in tables):
            raise ConfigurationError("all token tables must share the shape K x d")
        self.layout = tuple(layout)
        self.tables = list(tables)

    @property
    def num_tables(self) -> int:
        return len(self.tables)

    @property
    def codebook_size(self) -> int:
        return int(self.tables[0].shape[0])

    @property
    def dim(self) -> int:
        return int(self.tables[0].shape[1])

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(key.modality for key in self.layout))

    def slots_of(self, modality: str) -> list[int]:
        """Canonical positions belonging to a modality."""
        return [pos for pos, key in enumerate(self.layout) if key.modality == modality]

    def parameter_count(self) -> int:
        return sum(int(t.size) for t in self.tables)

    def params(self) -> dict[str, np.ndarray]:
        return {key.param_name: table for key, table in zip(self.layout, self.tables)}

    def gather(self, token_rows: np.ndarray) -> np.ndarray:
        """Look up (B, S) token IDs into a (B, S, d) embedding block."""
        return np.stack(
            [table[token_rows[:, s]] for s, table in enumerate(self.tables)], axis=1
        )

    def scatter(self, token_rows: np.ndarray, grad: np.ndarray) -> dict[str, RowSparseGrad]:
        """Route a (B, S, d) gradient back onto the table rows that were looked up."""
        return {
            key.param_name: RowSparseGrad.accumulate(token_rows[:, s], grad[:, s])
            for s, key in enumerate(self.layout)
        }

    def touched_rows(self, token_rows: np.ndarray) -> dict[str, np.ndarray]:
        return {
            key.param_name: np.unique(token_rows[:, s]) for s, key in enumerate(self.layout)
        }


def init_tables(
    num_modalities: int,
    num_slots: int,
    codebook_size: int,
    dim: int,
    seed: Seed,
    modalities: Sequence[str] | None = None,
    dtype: type = np.float32,
) -> TokenEmbeddingTables:
    """
    Create num_modalities x D tables of shape K x d, Xavier-uniform with fans (K, d).

    Tables are drawn in canonical order from a single generator, so the same
    seed always yields identical tables.
    """
    if modalities is None:
        modalities = MODALITIES[:num_modalities]
    if len(modalities) != num_modalities:
        raise ConfigurationError(f"expected {num_modalities} modalities, got {list(modalities)}")
    return init_modal_tables({m: num_slots for m in modalities}, codebook_size, dim, seed, dtype)


def init_modal_tables(
    slots: dict[str, int],
    codebook_size: int,
    dim: int,
    seed: Seed,
    dtype: type = np.float32,
) -> TokenEmbeddingTables:
    """Like init_tables, with its own slot count per modality (dict order is canonical)."""
    if not slots or min(min(slots.values()), codebook_size, dim) < 1:
        raise ConfigurationError("token table counts must all be >= 1")

    rng = np.random.default_rng(seed)
    bound = xavier_bound(codebook_size, dim)
    layout: list[SlotKey] = []
    tables: list[np.ndarray] = []
    for modality, num_slots in slots.items():
        for slot in range(num_slots):
            layout.append(SlotKey(modality, slot))
            tables.append(rng.uniform(-bound, bound, size=(codebook_size, dim)).astype(dtype))
    return TokenEmbeddingTables(layout, tables)


def token_matrix(
    assignments: dict[str, TokenAssignment], tables: TokenEmbeddingTables
) -> np.ndarray:
    """
    Concatenate per-modality token IDs into the (N, S) canonical matrix.

    Raises:
        TokenCorruptionError: If any token lies outside [0, K).
        ConfigurationError: If a modality is missing or has the wrong slot count.
    """
    columns: list[np.ndarray] = []
    for modality in tables.modalities:
        if modality not in assignments:
            raise ConfigurationError(f"no token assignment for modality '{modality}'")
        tokens = assignments[modality].tokens
        if tokens.shape[1] != len(tables.slots_of(modality)):
            raise ConfigurationError(
                f"{modality} tokens have {tokens.shape[1]} slots, tables expect "
                f"{len(tables.slots_of(modality))}"
            )
        validate_tokens(tokens, modality, tables.codebook_size)
        columns.append(tokens)
    return np.concatenate(columns, axis=1).astype(np.int64)


def lookup(
    tables: TokenEmbeddingTables,
    assignments: dict[str, TokenAssignment],
    item: int,
) -> list[np.ndarray]:
    """Token embeddings of one item, in canonical order (vision slots, then text slots)."""
    rows = token_matrix(assignments, tables)[item]
    return [tables.tables[s][rows[s]] for s in range(tables.num_tables)]
