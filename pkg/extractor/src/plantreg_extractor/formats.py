"""Writers for the plantreg on-disk formats.

Implemented standalone so the extractor has no dependency on the training
toolkit: each artifact is a ``<base>.manifest.json`` plus a
``<base>.f32bin`` of row-major little-endian float32, and the emitted
files must load through the consuming toolkit's own readers unchanged.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

EMBED_DIM = 512
FORMAT_VERSION = 1
CACHE_KIND = "embedding_cache"
PRIORS_KIND = "level_priors"

PROMPT_TEMPLATE = "a plant at approximately level {level}"
LEVELS = (1, 2, 3, 4, 5)


def prompt_for_level(level: int) -> str:
    """Prompt string for a camera level; must byte-match the consumer's."""
    if level not in LEVELS:
        raise ValueError(f"level {level} out of range 1..5")
    return PROMPT_TEMPLATE.format(level=level)


def atomic_write_bytes(path: Path, data: bytes) -> None:
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


def _write_pair(base: str | Path, manifest: dict, payload: np.ndarray) -> None:
    flat = np.ascontiguousarray(payload, dtype="<f4")
    atomic_write_bytes(Path(str(base) + ".f32bin"), flat.tobytes())
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(Path(str(base) + ".manifest.json"), text.encode("utf-8"))


def write_cache(records: Sequence[dict], matrix: np.ndarray, base: str | Path) -> None:
    """Emit an embedding cache; *records* are manifest-ready dicts."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[1] != EMBED_DIM:
        raise ValueError(f"matrix must be (n, {EMBED_DIM}), got {matrix.shape}")
    if matrix.shape[0] != len(records):
        raise ValueError(f"{len(records)} records but {matrix.shape[0]} rows")
    manifest = {
        "kind": CACHE_KIND,
        "version": FORMAT_VERSION,
        "dim": EMBED_DIM,
        "count": len(records),
        "records": list(records),
    }
    _write_pair(base, manifest, matrix)


def write_priors(embeddings: np.ndarray, base: str | Path, normalized: bool) -> None:
    """Emit a prior table for the five levels (rows ordered by level)."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.shape != (len(LEVELS), EMBED_DIM):
        raise ValueError(
            f"priors must be ({len(LEVELS)}, {EMBED_DIM}), got {embeddings.shape}"
        )
    manifest = {
        "kind": PRIORS_KIND,
        "version": FORMAT_VERSION,
        "dim": EMBED_DIM,
        "count": len(LEVELS),
        "levels": list(LEVELS),
        "prompts": [prompt_for_level(level) for level in LEVELS],
        "normalized": bool(normalized),
    }
    _write_pair(str(base) + ".priors", manifest, embeddings)
