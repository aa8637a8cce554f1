"""MOTR checkpoint container.

Layout (little-endian):

    "MOTR" | version u32 | config length u32 | config JSON (UTF-8)
    section count u32
    per section: name length u8 | name | payload length u64 | payload

A section payload is an array count u32 followed by arrays:

    name length u16 | name | dtype u8 (0 = f32, 1 = i64) | ndim u8 | dims u64 x ndim | data
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .artifacts import atomic_write_bytes, require_file
from .backbones import Recommender, TokenItemEncoder
from .errors import CheckpointFormatError, CheckpointMismatchError

MAGIC = b"MOTR"
VERSION = 1

# Section name -> array-name prefix, in file order.
SECTIONS = (
    ("USRE", "user_embedding"),
    ("ITME", "item_embedding"),
    ("TOKTAB", "token_table/"),
    ("TCNP", "tcn/"),
    ("VBPJ", "vbpr_projection"),
    ("TOKN", "item_tokens"),
    ("ADAM", "adam/"),
)

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<i8"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}

_HEAD = struct.Struct("<4sII")


def section_of(name: str) -> str:
    for section, prefix in SECTIONS:
        if name == prefix or (prefix.endswith("/") and name.startswith(prefix)):
            return section
    raise CheckpointFormatError("<memory>", f"array '{name}' belongs to no section")


@dataclass
class Checkpoint:
    config: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    sections: dict[str, list[str]] = field(default_factory=dict)


def _encode_array(name: str, array: np.ndarray) -> bytes:
    if np.issubdtype(array.dtype, np.integer):
        data = np.ascontiguousarray(array, dtype="<i8")
    else:
        data = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    parts = [
        struct.pack("<H", len(encoded)),
        encoded,
        struct.pack("<BB", DTYPE_CODES[data.dtype], data.ndim),
        struct.pack(f"<{data.ndim}Q", *data.shape),
        data.tobytes(),
    ]
    return b"".join(parts)


def encode_checkpoint(config: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize arrays grouped into sections; array order within a section is kept."""
    grouped: dict[str, list[str]] = {section: [] for section, _ in SECTIONS}
    for name in arrays:
        grouped[section_of(name)].append(name)

    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    present = [(s, names) for s, names in grouped.items() if names]
    out = [_HEAD.pack(MAGIC, VERSION, len(config_bytes)), config_bytes, struct.pack("<I", len(present))]
    for section, names in present:
        payload = struct.pack("<I", len(names)) + b"".join(
            _encode_array(n, arrays[n]) for n in names
        )
        encoded = section.encode("ascii")
        out.extend([struct.pack("<B", len(encoded)), encoded, struct.pack("<Q", len(payload)), payload])
    return b"".join(out)


def write_checkpoint(path: str | Path, config: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    """Atomically write a checkpoint; returns the bytes written."""
    payload = encode_checkpoint(config, arrays)
    atomic_write_bytes(path, payload)
    return payload


class _Reader:
    def __init__(self, path: str, raw: bytes):
        self.path = path
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(self.path, "truncated file")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def decode_checkpoint(raw: bytes, path: str = "<memory>") -> Checkpoint:
    reader = _Reader(path, raw)
    magic, version, config_len = reader.unpack(_HEAD.format)
    if magic != MAGIC:
        raise CheckpointFormatError(path, "bad magic")
    if version != VERSION:
        raise CheckpointFormatError(path, f"unsupported version {version}")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError(path, "config block is not valid JSON") from None

    checkpoint = Checkpoint(config=config)
    (num_sections,) = reader.unpack("<I")
    for _ in range(num_sections):
        (name_len,) = reader.unpack("<B")
        section = reader.take(name_len).decode("ascii")
        (payload_len,) = reader.unpack("<Q")
        end = reader.pos + payload_len
        (count,) = reader.unpack("<I")
        names = []
        for _ in range(count):
            (n,) = reader.unpack("<H")
            name = reader.take(n).decode("utf-8")
            code, ndim = reader.unpack("<BB")
            if code not in CODE_DTYPES:
                raise CheckpointFormatError(path, f"array '{name}' has unknown dtype code {code}")
            shape = reader.unpack(f"<{ndim}Q")
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape)
            checkpoint.arrays[name] = data.astype(dtype.newbyteorder("="))
            names.append(name)
        if reader.pos != end:
            raise CheckpointFormatError(path, f"section {section} length mismatch")
        checkpoint.sections[section] = names
    if reader.pos != len(raw):
        raise CheckpointFormatError(path, "trailing data")
    return checkpoint


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = require_file(path, "checkpoint", "Run 'tokrec train' first.")
    return decode_checkpoint(path.read_bytes(), str(path))


def layout_arrays(model: Recommender) -> dict[str, np.ndarray]:
    """TCN group layout and the item token matrix; both must match exactly on load."""
    if not isinstance(model.encoder, TokenItemEncoder):
        return {}
    encoder = model.encoder
    arrays = {
        f"tcn/{name}/slots": slots.astype(np.int64)
        for name, slots in encoder.network.groups.items()
    }
    arrays["item_tokens"] = np.asarray(encoder.token_rows, dtype=np.int64)
    return arrays


def model_arrays(model: Recommender, adam: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    arrays = {**model.params(), **layout_arrays(model)}
    if adam:
        arrays.update(adam)
    return arrays


def _describe(array: np.ndarray) -> str:
    if array.size <= 16:
        return str(array.tolist())
    digest = hashlib.sha1(np.ascontiguousarray(array, dtype="<i8").tobytes()).hexdigest()[:12]
    return f"sha1 {digest}"


def load_into(model: Recommender, checkpoint: Checkpoint) -> None:
    """
    Copy checkpoint parameters into a freshly built model.

    Raises:
        CheckpointMismatchError: If any parameter or layout array is missing,
            unexpected, or shaped differently from the model, or if the slot
            layout or item tokens differ from the ones it was trained with.
    """
    layout = layout_arrays(model)
    expected = {**model.params(), **layout}
    stored = {n: a for n, a in checkpoint.arrays.items() if not n.startswith("adam/")}
    for name in stored:
        if name not in expected:
            raise CheckpointMismatchError(name, "absent", list(stored[name].shape))
    for name, array in expected.items():
        if name not in stored:
            raise CheckpointMismatchError(name, list(array.shape), "missing")
        if stored[name].shape != array.shape:
            raise CheckpointMismatchError(name, list(array.shape), list(stored[name].shape))
        if name in layout and not np.array_equal(stored[name], array):
            raise CheckpointMismatchError(name, _describe(array), _describe(stored[name]))
    model.load_params(stored)
