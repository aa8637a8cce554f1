"""On-disk formats: feature files, codebooks, token files, sidecars and logs."""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import ConfigurationError, FeatureFormatError, MissingInputError, TokenCorruptionError
from .quantizer import ModalCodebook, TokenAssignment

FEATURE_MAGIC = b"MFEA"
FEATURE_VERSION = 1
# magic, version u32, rows u64, cols u32
FEATURE_HEADER = struct.Struct("<4sIQI")

CODEBOOK_MAGIC = b"MCBK"
CODEBOOK_VERSION = 1
# magic, version u32, modality u8, d_m u32, D u32, K u32
CODEBOOK_HEADER = struct.Struct("<4sIBIII")

MODALITY_TAGS = {"vision": 0, "text": 1}
TAG_MODALITIES = {v: k for k, v in MODALITY_TAGS.items()}


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write bytes via temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}_", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(temp_path, path)
    except Exception:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def require_file(path: str | Path, what: str, hint: str | None = None) -> Path:
    """Return path if it is an existing file, else raise MissingInputError."""
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(str(path), what, hint)
    return path


# --- Feature matrices ---


def write_feature_file(path: str | Path, data: np.ndarray) -> None:
    """Write a 2-D float matrix in the MFEA binary layout."""
    data = np.ascontiguousarray(data, dtype="<f4")
    rows, cols = data.shape
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols)
    atomic_write_bytes(path, header + data.tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    """
    Read an MFEA binary matrix, or a comma-separated text matrix.

    Raises:
        FeatureFormatError: If the file is truncated, versioned wrongly or ragged.
    """
    path = require_file(path, "feature file")
    raw = path.read_bytes()
    if raw[:4] == FEATURE_MAGIC:
        return _decode_feature_binary(str(path), raw)
    return _decode_feature_csv(str(path), raw)


def _decode_feature_binary(path: str, raw: bytes) -> np.ndarray:
    if len(raw) < FEATURE_HEADER.size:
        raise FeatureFormatError(path, "truncated header")
    _, version, rows, cols = FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(path, f"unsupported version {version}")
    expected = rows * cols
    found = (len(raw) - FEATURE_HEADER.size) // 4
    if (len(raw) - FEATURE_HEADER.size) % 4 or found != expected:
        kind = "truncated file" if found < expected else "trailing data"
        raise FeatureFormatError(path, f"{kind}: header declares {expected} floats, found {found}")
    data = np.frombuffer(raw, dtype="<f4", offset=FEATURE_HEADER.size)
    return data.reshape(rows, cols).astype(np.float32)


def _decode_feature_csv(path: str, raw: bytes) -> np.ndarray:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FeatureFormatError(path, "not an MFEA file and not UTF-8 text") from None
    rows: list[list[float]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise FeatureFormatError(path, f"line {line_no}: non-numeric value") from None
        if len(rows[-1]) != len(rows[0]):
            raise FeatureFormatError(
                path, f"line {line_no}: {len(rows[-1])} columns, expected {len(rows[0])}"
            )
    if not rows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32)


# --- Codebooks ---


def write_codebook(path: str | Path, codebook: ModalCodebook) -> None:
    """Write a ModalCodebook in the MCBK layout."""
    header = CODEBOOK_HEADER.pack(
        CODEBOOK_MAGIC,
        CODEBOOK_VERSION,
        MODALITY_TAGS[codebook.modality],
        codebook.dim,
        codebook.num_slots,
        codebook.codebook_size,
    )
    body = [np.ascontiguousarray(codebook.rotation, dtype="<f4").tobytes()]
    body.extend(np.ascontiguousarray(c, dtype="<f4").tobytes() for c in codebook.sub_codebooks)
    atomic_write_bytes(path, header + b"".join(body))


def read_codebook(path: str | Path) -> ModalCodebook:
    """Read an MCBK codebook file."""
    path = require_file(path, "codebook file")
    raw = path.read_bytes()
    if len(raw) < CODEBOOK_HEADER.size or raw[:4] != CODEBOOK_MAGIC:
        raise FeatureFormatError(str(path), "not an MCBK codebook")
    _, version, tag, dim, num_slots, k = CODEBOOK_HEADER.unpack_from(raw)
    if version != CODEBOOK_VERSION or tag not in TAG_MODALITIES or num_slots == 0:
        raise FeatureFormatError(str(path), "unsupported codebook header")
    sub_dim = dim // num_slots
    expected = dim * dim + num_slots * k * sub_dim
    floats = np.frombuffer(raw, dtype="<f4", offset=CODEBOOK_HEADER.size)
    if len(floats) != expected:
        raise FeatureFormatError(str(path), f"expected {expected} floats, found {len(floats)}")
    rotation = floats[: dim * dim].reshape(dim, dim).astype(np.float32)
    rest = floats[dim * dim:].reshape(num_slots, k, sub_dim).astype(np.float32)
    return ModalCodebook(
        modality=TAG_MODALITIES[tag],
        rotation=rotation,
        sub_codebooks=tuple(rest[x].copy() for x in range(num_slots)),
    )


# --- Token assignments ---


def write_token_file(path: str | Path, assignment: TokenAssignment) -> None:
    """Write one line per item: item_index followed by its D token IDs."""
    lines = [
        "\t".join([str(i), *(str(int(t)) for t in row)])
        for i, row in enumerate(assignment.tokens)
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_token_file(
    path: str | Path, modality: str, num_items: int, codebook_size: int
) -> TokenAssignment:
    """
    Read a token TSV and validate it against the dataset and codebook size.

    Raises:
        MissingInputError: If the file does not exist.
        ConfigurationError: If a line is blank or not integers, or rows are
            missing, out of order or ragged.
        TokenCorruptionError: If a token lies outside [0, K).
    """
    path = require_file(path, f"{modality} token file", "Run 'tokrec quantize' first.")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigurationError(f"{path}: token file is not valid UTF-8") from None
    rows: list[list[int]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        try:
            fields = [int(v) for v in line.split("\t")]
        except ValueError:
            raise ConfigurationError(
                f"{path}:{line_no}: expected tab-separated integers, found {line!r}"
            ) from None
        if len(fields) < 2:
            raise ConfigurationError(f"{path}:{line_no}: line has no tokens")
        if fields[0] != len(rows):
            raise ConfigurationError(f"{path}:{line_no}: expected item index {len(rows)}")
        rows.append(fields[1:])
    if len(rows) != num_items:
        raise ConfigurationError(
            f"{path} has {len(rows)} items but the dataset has {num_items}"
        )
    if rows and any(len(r) != len(rows[0]) for r in rows):
        raise ConfigurationError(f"{path}: rows have differing token counts")
    tokens = np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)
    validate_tokens(tokens, modality, codebook_size)
    return TokenAssignment(modality=modality, tokens=tokens, codebook_size=codebook_size)


def validate_tokens(tokens: np.ndarray, modality: str, codebook_size: int) -> None:
    """Raise TokenCorruptionError for the first token outside [0, K)."""
    bad = np.argwhere((tokens < 0) | (tokens >= codebook_size))
    if len(bad):
        item, slot = (int(v) for v in bad[0])
        raise TokenCorruptionError(modality, item, slot, int(tokens[item, slot]), codebook_size)


def write_histogram(path: str | Path, counts: np.ndarray) -> None:
    """Write per-slot token loads as "slot<TAB>token<TAB>count" lines."""
    lines = ["slot\ttoken\tcount"]
    for slot, row in enumerate(counts):
        lines.extend(f"{slot}\t{token}\t{int(c)}" for token, c in enumerate(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- Sidecars and logs ---


def write_id_map(path: str | Path, ids: Iterable[str]) -> None:
    """Write "string_id<TAB>dense_index" lines."""
    lines = [f"{sid}\t{i}" for i, sid in enumerate(ids)]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    """Write records as JSON-lines, one object per line."""
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_text(path, text)


def write_json(path: str | Path, data: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")
