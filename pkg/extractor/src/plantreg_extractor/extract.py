"""Embedding and prior extraction pipelines.

For each accepted metadata row the image is cropped to the padded union
of detector boxes for the prompts (default "plant" and "pot") above the
confidence threshold, then encoded to a 512-d vector; detection failures
fall back to encoding the full frame and are flagged in the log. Image
embeddings are written raw (unnormalized); only the text priors are
L2-normalized.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats, metadata
from .backends import Detector, Encoder

log = logging.getLogger("plantreg_extractor")


@dataclass
class ExtractionJob:
    image_root: str | Path
    metadata_path: str | Path
    out_base: str | Path
    prompts: tuple[str, ...] = ("plant", "pot")
    padding: float = 0.1
    confidence_threshold: float = 0.35
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not 0.0 <= self.padding <= 0.5:
            raise ValueError(f"padding must be in [0, 0.5], got {self.padding}")
        if not self.prompts:
            raise ValueError("at least one detector prompt required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ExtractionResult:
    accepted: int
    rejected: list[metadata.Rejection]
    fallbacks: int
    log_path: Path
    entries: list[dict] = field(default_factory=list)


def _crop_region(image: Image.Image, boxes, padding: float) -> tuple[float, ...] | None:
    """Padded union of detection boxes, clamped to the frame; None if empty."""
    if not boxes:
        return None
    x0 = min(box.x0 for box in boxes)
    y0 = min(box.y0 for box in boxes)
    x1 = max(box.x1 for box in boxes)
    y1 = max(box.y1 for box in boxes)
    pad_x = (x1 - x0) * padding
    pad_y = (y1 - y0) * padding
    width, height = image.size
    region = (
        max(0.0, x0 - pad_x),
        max(0.0, y0 - pad_y),
        min(float(width), x1 + pad_x),
        min(float(height), y1 + pad_y),
    )
    if region[2] - region[0] < 1 or region[3] - region[1] < 1:
        return None
    return region


def extract_embeddings(
    job: ExtractionJob, detector: Detector, encoder: Encoder
) -> ExtractionResult:
    """Run detect-crop-encode over a metadata table and emit cache files.

    Writes ``<out_base>.manifest.json`` / ``<out_base>.f32bin`` plus an
    ``<out_base>.extraction.log.jsonl`` with one entry per input row.
    Output row order follows metadata order regardless of batching.
    """
    image_root = Path(job.image_root)
    rows, rejections = metadata.read_rows(job.metadata_path)

    kept: list[tuple[metadata.MetaRow, Image.Image, bool]] = []
    entries: list[dict] = []
    for rejection in rejections:
        entries.append(
            {
                "line": rejection.line,
                "status": "rejected",
                "reason": rejection.reason,
                "detail": rejection.detail,
            }
        )
    fallbacks = 0
    for row in rows:
        path = image_root / row.image_path
        if not path.exists():
            rejections.append(
                metadata.Rejection(row.line, "missing_file", str(path))
            )
            entries.append(
                {
                    "line": row.line,
                    "status": "rejected",
                    "reason": "missing_file",
                    "detail": str(path),
                }
            )
            continue
        try:
            with Image.open(path) as handle:
                image = handle.convert("RGB")
        except Exception as exc:
            rejections.append(
                metadata.Rejection(row.line, "unreadable_image", str(exc))
            )
            entries.append(
                {
                    "line": row.line,
                    "status": "rejected",
                    "reason": "unreadable_image",
                    "detail": str(exc),
                }
            )
            continue
        boxes = [
            box
            for box in detector.detect(image, job.prompts)
            if box.score >= job.confidence_threshold
        ]
        region = _crop_region(image, boxes, job.padding)
        fallback = region is None
        cropped = image if fallback else image.crop(tuple(int(round(v)) for v in region))
        if fallback:
            fallbacks += 1
            log.warning("detection failed for %s; using full frame", path)
        entries.append(
            {
                "line": row.line,
                "status": "accepted",
                "image_path": row.image_path,
                "fallback_full_frame": fallback,
                "box": None if fallback else list(region),
                "detections": len(boxes),
            }
        )
        kept.append((row, cropped, fallback))

    if kept:
        embeddings = []
        for start in range(0, len(kept), job.batch_size):
            batch = [image for _, image, _ in kept[start : start + job.batch_size]]
            encoded = encoder.encode_images(batch)
            if encoded.shape != (len(batch), formats.EMBED_DIM):
                raise ValueError(
                    f"encoder returned {encoded.shape}, expected "
                    f"({len(batch)}, {formats.EMBED_DIM})"
                )
            embeddings.append(encoded)
        matrix = np.concatenate(embeddings, axis=0)
    else:
        matrix = np.zeros((0, formats.EMBED_DIM), dtype=np.float32)
    if not np.isfinite(matrix).all():
        raise ValueError("encoder produced non-finite embeddings")

    records = [
        row.record_dict(embedding_row=i) for i, (row, _, _) in enumerate(kept)
    ]
    formats.write_cache(records, matrix, job.out_base)

    log_path = Path(str(job.out_base) + ".extraction.log.jsonl")
    log_lines = [json.dumps(entry, sort_keys=True) for entry in entries]
    formats.atomic_write_bytes(
        log_path, ("\n".join(log_lines) + "\n").encode("utf-8") if log_lines else b""
    )
    log.info(
        "extracted %d embeddings (%d fallbacks, %d rejected) to %s",
        len(kept),
        fallbacks,
        len(rejections),
        job.out_base,
    )
    return ExtractionResult(
        accepted=len(kept),
        rejected=rejections,
        fallbacks=fallbacks,
        log_path=log_path,
        entries=entries,
    )


def extract_priors(out_base: str | Path, encoder: Encoder) -> np.ndarray:
    """Encode the five level prompts, L2-normalize, and emit prior files."""
    prompts = [formats.prompt_for_level(level) for level in formats.LEVELS]
    embeddings = np.asarray(encoder.encode_texts(prompts), dtype=np.float64)
    if embeddings.shape != (len(formats.LEVELS), formats.EMBED_DIM):
        raise ValueError(
            f"encoder returned {embeddings.shape}, expected "
            f"({len(formats.LEVELS)}, {formats.EMBED_DIM})"
        )
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("encoder produced a zero-norm prompt embedding")
    normalized = (embeddings / norms).astype(np.float32)
    formats.write_priors(normalized, out_base, normalized=True)
    log.info("wrote %d level priors to %s.priors", len(prompts), out_base)
    return normalized
