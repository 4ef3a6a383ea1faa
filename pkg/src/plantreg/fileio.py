"""Shared on-disk codec: a JSON manifest paired with a raw float32 payload.

Every persisted artifact in this package (embedding caches, level-prior
tables, model checkpoints) is stored as two files derived from one base
path: ``<base>.manifest.json`` holding metadata and ``<base>.f32bin``
holding little-endian 32-bit floats in row-major order. Writes are atomic
(temp file in the target directory, then rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MANIFEST_SUFFIX = ".manifest.json"
PAYLOAD_SUFFIX = ".f32bin"
FORMAT_VERSION = 1

PAYLOAD_DTYPE = np.dtype("<f4")


class FormatError(Exception):
    """Base class for artifact file-format violations."""


class DimensionError(FormatError):
    """Array dimension disagrees with the format contract."""


class PayloadTruncatedError(FormatError):
    """Binary payload is shorter than the manifest implies (or not a
    whole number of rows)."""


class CountMismatchError(FormatError):
    """Manifest row count disagrees with the payload row count."""


class KindMismatchError(FormatError):
    """Manifest describes a different kind of artifact than requested."""


def manifest_path(base: str | Path) -> Path:
    return Path(str(base) + MANIFEST_SUFFIX)


def payload_path(base: str | Path) -> Path:
    return Path(str(base) + PAYLOAD_SUFFIX)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write *data* to *path* via a temp file + rename in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    """Stable JSON serialization: sorted keys, fixed separators, newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_pair(base: str | Path, manifest: dict, payload: np.ndarray) -> None:
    """Persist a manifest/payload pair atomically.

    The payload is flattened row-major and stored as little-endian float32;
    non-finite values pass through untouched (validation is a separate,
    content-level concern).
    """
    flat = np.ascontiguousarray(payload, dtype=PAYLOAD_DTYPE)
    atomic_write_bytes(payload_path(base), flat.tobytes())
    atomic_write_text(manifest_path(base), dump_json(manifest))


def read_pair(base: str | Path, expected_kind: str, row_width: int) -> tuple[dict, np.ndarray]:
    """Load a manifest/payload pair written by :func:`write_pair`.

    Returns the manifest dict and the payload reshaped to
    ``(manifest["count"], row_width)``.

    Raises:
        FileNotFoundError: either file is missing.
        KindMismatchError: manifest ``kind`` is not *expected_kind*.
        DimensionError: manifest ``dim`` disagrees with *row_width*.
        PayloadTruncatedError: payload is not a whole number of rows.
        CountMismatchError: payload row count disagrees with the manifest.
    """
    mpath = manifest_path(base)
    ppath = payload_path(base)
    if not mpath.exists():
        raise FileNotFoundError(f"manifest not found: {mpath}")
    if not ppath.exists():
        raise FileNotFoundError(f"payload not found: {ppath}")

    with open(mpath, "r", encoding="utf-8") as handle:
        manifest = json.load(handle)

    kind = manifest.get("kind")
    if kind != expected_kind:
        raise KindMismatchError(
            f"{mpath}: manifest kind is {kind!r}, expected {expected_kind!r}"
        )
    dim = manifest.get("dim", row_width)
    if dim != row_width:
        raise DimensionError(f"{mpath}: dim is {dim}, expected {row_width}")
    count = manifest.get("count")
    if not isinstance(count, int) or count < 0:
        raise FormatError(f"{mpath}: invalid record count {count!r}")

    raw = np.fromfile(ppath, dtype=PAYLOAD_DTYPE)
    row_bytes = row_width * PAYLOAD_DTYPE.itemsize
    if raw.size % row_width != 0:
        raise PayloadTruncatedError(
            f"{ppath}: {raw.size * PAYLOAD_DTYPE.itemsize} bytes is not a "
            f"multiple of the {row_bytes}-byte row size"
        )
    rows = raw.size // row_width
    if rows != count:
        raise CountMismatchError(
            f"{ppath}: payload holds {rows} rows, manifest says {count}"
        )
    return manifest, raw.reshape(count, row_width)
