"""Embedding cache data model: view records, metadata cleaning, cache
persistence, content validation, and per-(crop, plant, day, level) grouping.

A cache couples an ``N x 512`` float32 matrix of image embeddings with a
manifest of :class:`ViewRecord` metadata. Metadata arrives as a CSV table
with columns ``image_path, crop, plant_id, day, level, angle, leaf_count``;
rows that violate the record invariants are rejected with explicit reasons
rather than silently corrected, so cleaning stays reproducible.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import fileio
from .fileio import CountMismatchError, DimensionError

EMBED_DIM = 512
LEVELS = (1, 2, 3, 4, 5)
VIEWS_PER_LEVEL = 24
CACHE_KIND = "embedding_cache"

METADATA_COLUMNS = (
    "image_path",
    "crop",
    "plant_id",
    "day",
    "level",
    "angle",
    "leaf_count",
)

# Rejection reasons for metadata cleaning.
REASON_MISSING_FILE = "missing_file"
REASON_BAD_LEVEL = "bad_level"
REASON_BAD_ANGLE = "bad_angle"
REASON_DUPLICATE_KEY = "duplicate_key"
REASON_UNPARSEABLE = "unparseable"
REASON_INCOMPLETE_LEVEL = "incomplete_level_excluded"


class MetadataHeaderError(ValueError):
    """Metadata table header is missing a required column."""


@dataclass(frozen=True)
class ViewRecord:
    """Metadata plus embedding reference for a single image.

    ``day`` doubles as the plant-age regression target and ``leaf_count``
    as the leaf-count target. ``embedding_row`` indexes the cache matrix.
    """

    crop: str
    plant_id: int
    day: int
    level: int
    angle: int
    leaf_count: int
    embedding_row: int
    image_path: str = ""

    @property
    def key(self) -> tuple[str, int, int, int, int]:
        """Uniqueness key within a cache."""
        return (self.crop, self.plant_id, self.day, self.level, self.angle)

    @property
    def group_key(self) -> tuple[str, int, int, int]:
        """Aggregation unit key: one camera level of one plant on one day."""
        return (self.crop, self.plant_id, self.day, self.level)

    def to_dict(self) -> dict:
        return {
            "crop": self.crop,
            "plant_id": self.plant_id,
            "day": self.day,
            "level": self.level,
            "angle": self.angle,
            "leaf_count": self.leaf_count,
            "embedding_row": self.embedding_row,
            "image_path": self.image_path,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ViewRecord":
        return cls(
            crop=str(data["crop"]),
            plant_id=int(data["plant_id"]),
            day=int(data["day"]),
            level=int(data["level"]),
            angle=int(data["angle"]),
            leaf_count=int(data["leaf_count"]),
            embedding_row=int(data["embedding_row"]),
            image_path=str(data.get("image_path", "")),
        )


@dataclass
class EmbeddingCache:
    """An ``N x 512`` float32 embedding matrix plus its record manifest."""

    records: list[ViewRecord]
    matrix: np.ndarray
    version: int = fileio.FORMAT_VERSION

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != EMBED_DIM:
            raise DimensionError(
                f"cache matrix must be (n, {EMBED_DIM}), got {self.matrix.shape}"
            )
        if self.matrix.shape[0] != len(self.records):
            raise CountMismatchError(
                f"{len(self.records)} records but {self.matrix.shape[0]} matrix rows"
            )

    @property
    def record_count(self) -> int:
        return len(self.records)


@dataclass
class LevelGroup:
    """All views of one (crop, plant, day, level) unit, ordered by angle."""

    key: tuple[str, int, int, int]
    rows: list[int]
    angles: list[int]

    @property
    def complete(self) -> bool:
        return len(self.rows) == VIEWS_PER_LEVEL

    @property
    def crop(self) -> str:
        return self.key[0]

    @property
    def plant_id(self) -> int:
        return self.key[1]

    @property
    def day(self) -> int:
        return self.key[2]

    @property
    def level(self) -> int:
        return self.key[3]


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str
    detail: str


@dataclass
class CleaningReport:
    accepted: int = 0
    rejected: list[RejectedRow] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.accepted + len(self.rejected)

    def counts_by_reason(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for entry in self.rejected:
            out[entry.reason] = out.get(entry.reason, 0) + 1
        return out


@dataclass(frozen=True)
class Finding:
    """A single content-validation finding; never raised, only reported."""

    kind: str
    message: str
    row: int | None = None
    column: int | None = None


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings


def read_metadata_csv(path: str | Path) -> list[dict]:
    """Read a metadata table, returning one dict per data row.

    Each dict carries the seven metadata columns as raw strings plus a
    ``line`` key with the 1-based file line of the row.

    Raises:
        MetadataHeaderError: the header lacks a required column.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [col for col in METADATA_COLUMNS if col not in header]
        if missing:
            raise MetadataHeaderError(
                f"{path}: header is missing column(s) {', '.join(missing)}"
            )
        rows = []
        for row in reader:
            entry = {col: (row.get(col) or "") for col in METADATA_COLUMNS}
            entry["line"] = reader.line_num
            rows.append(entry)
    return rows


def _parse_int(text: str, name: str, minimum: int) -> int:
    value = int(str(text).strip())
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def clean_metadata(
    raw_rows: Sequence[Mapping],
    *,
    exclude_incomplete_levels: bool = False,
    check_files: bool = False,
) -> tuple[list[ViewRecord], CleaningReport]:
    """Validate raw metadata rows into :class:`ViewRecord` objects.

    Rejection reasons: out-of-range ``level``/``angle`` map to ``bad_level``
    and ``bad_angle``; any other unparseable or out-of-domain field (day < 1,
    negative leaf count, empty crop) maps to ``unparseable``; repeated
    (crop, plant, day, level, angle) keys keep the first occurrence and
    reject the rest as ``duplicate_key``. With *exclude_incomplete_levels*,
    groups holding fewer than 24 distinct views are dropped wholesale as
    ``incomplete_level_excluded``. With *check_files*, rows whose image path
    does not exist are rejected as ``missing_file``.

    ``embedding_row`` is assigned sequentially over the surviving rows, so
    the output aligns with an embedding matrix built in the same order.
    """
    report = CleaningReport()
    kept: list[tuple[int, ViewRecord]] = []
    seen: set[tuple] = set()

    for index, row in enumerate(raw_rows):
        line = int(row.get("line", index))
        try:
            image_path = str(row.get("image_path", "") or "").strip()
            crop = str(row.get("crop", "") or "").strip().lower()
            if not crop:
                raise ValueError("crop must be non-empty")
            plant_id = _parse_int(row.get("plant_id", ""), "plant_id", 1)
            day = _parse_int(row.get("day", ""), "day", 1)
            level = int(str(row.get("level", "")).strip())
            angle = int(str(row.get("angle", "")).strip())
            leaf_count = _parse_int(row.get("leaf_count", ""), "leaf_count", 0)
        except (ValueError, TypeError) as exc:
            report.rejected.append(RejectedRow(line, REASON_UNPARSEABLE, str(exc)))
            continue

        if level not in LEVELS:
            report.rejected.append(
                RejectedRow(line, REASON_BAD_LEVEL, f"level {level} not in 1..5")
            )
            continue
        if not 0 <= angle < VIEWS_PER_LEVEL:
            report.rejected.append(
                RejectedRow(line, REASON_BAD_ANGLE, f"angle {angle} not in 0..23")
            )
            continue
        if check_files and not os.path.exists(image_path):
            report.rejected.append(
                RejectedRow(line, REASON_MISSING_FILE, image_path)
            )
            continue

        record = ViewRecord(
            crop=crop,
            plant_id=plant_id,
            day=day,
            level=level,
            angle=angle,
            leaf_count=leaf_count,
            embedding_row=0,
            image_path=image_path,
        )
        if record.key in seen:
            report.rejected.append(
                RejectedRow(line, REASON_DUPLICATE_KEY, repr(record.key))
            )
            continue
        seen.add(record.key)
        kept.append((line, record))

    if exclude_incomplete_levels:
        group_sizes: dict[tuple, int] = {}
        for _, record in kept:
            group_sizes[record.group_key] = group_sizes.get(record.group_key, 0) + 1
        survivors = []
        for line, record in kept:
            size = group_sizes[record.group_key]
            if size < VIEWS_PER_LEVEL:
                report.rejected.append(
                    RejectedRow(
                        line,
                        REASON_INCOMPLETE_LEVEL,
                        f"group {record.group_key} has {size} of "
                        f"{VIEWS_PER_LEVEL} views",
                    )
                )
            else:
                survivors.append((line, record))
        kept = survivors

    records = [
        ViewRecord(
            crop=r.crop,
            plant_id=r.plant_id,
            day=r.day,
            level=r.level,
            angle=r.angle,
            leaf_count=r.leaf_count,
            embedding_row=i,
            image_path=r.image_path,
        )
        for i, (_, r) in enumerate(kept)
    ]
    report.accepted = len(records)
    return records, report


def write_cache(records: Sequence[ViewRecord], matrix: np.ndarray, base: str | Path) -> None:
    """Persist records + matrix as ``<base>.manifest.json`` / ``<base>.f32bin``.

    Raises:
        DimensionError: matrix is not ``(n, 512)``.
        CountMismatchError: matrix row count differs from the record count.
    """
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[1] != EMBED_DIM:
        raise DimensionError(
            f"cache matrix must be (n, {EMBED_DIM}), got {matrix.shape}"
        )
    if matrix.shape[0] != len(records):
        raise CountMismatchError(
            f"{len(records)} records but {matrix.shape[0]} matrix rows"
        )
    manifest = {
        "kind": CACHE_KIND,
        "version": fileio.FORMAT_VERSION,
        "dim": EMBED_DIM,
        "count": len(records),
        "records": [record.to_dict() for record in records],
    }
    fileio.write_pair(base, manifest, matrix)


def read_cache(base: str | Path) -> EmbeddingCache:
    """Load a cache written by :func:`write_cache`."""
    manifest, matrix = fileio.read_pair(base, CACHE_KIND, EMBED_DIM)
    records = [ViewRecord.from_dict(entry) for entry in manifest["records"]]
    if len(records) != manifest["count"]:
        raise CountMismatchError(
            f"{base}: manifest count {manifest['count']} but "
            f"{len(records)} record entries"
        )
    return EmbeddingCache(records=records, matrix=matrix, version=manifest["version"])


_MAX_NONFINITE_FINDINGS = 100


def validate_cache(cache: EmbeddingCache) -> ValidationReport:
    """Report every record/matrix invariant violation without raising.

    Covers non-finite matrix entries (capped at 100 itemized findings),
    duplicate record keys, embedding rows outside the matrix, and
    out-of-domain record fields.
    """
    report = ValidationReport()

    bad = np.argwhere(~np.isfinite(cache.matrix))
    for row, col in bad[:_MAX_NONFINITE_FINDINGS]:
        value = cache.matrix[row, col]
        report.findings.append(
            Finding(
                "non_finite",
                f"matrix[{row}, {col}] is {value}",
                row=int(row),
                column=int(col),
            )
        )
    if len(bad) > _MAX_NONFINITE_FINDINGS:
        report.findings.append(
            Finding(
                "non_finite",
                f"{len(bad) - _MAX_NONFINITE_FINDINGS} further non-finite "
                "entries omitted",
            )
        )

    seen: dict[tuple, int] = {}
    for index, record in enumerate(cache.records):
        if record.key in seen:
            report.findings.append(
                Finding(
                    "duplicate_key",
                    f"records {seen[record.key]} and {index} share key "
                    f"{record.key}",
                    row=index,
                )
            )
        else:
            seen[record.key] = index
        if not 0 <= record.embedding_row < cache.record_count:
            report.findings.append(
                Finding(
                    "row_out_of_range",
                    f"record {index} points at matrix row "
                    f"{record.embedding_row} of {cache.record_count}",
                    row=index,
                )
            )
        if record.level not in LEVELS:
            report.findings.append(
                Finding("bad_level", f"record {index} level {record.level}", row=index)
            )
        if not 0 <= record.angle < VIEWS_PER_LEVEL:
            report.findings.append(
                Finding("bad_angle", f"record {index} angle {record.angle}", row=index)
            )
        if record.day < 1:
            report.findings.append(
                Finding("bad_day", f"record {index} day {record.day}", row=index)
            )
        if record.leaf_count < 0:
            report.findings.append(
                Finding(
                    "bad_leaf_count",
                    f"record {index} leaf_count {record.leaf_count}",
                    row=index,
                )
            )
        if record.plant_id < 1:
            report.findings.append(
                Finding(
                    "bad_plant_id",
                    f"record {index} plant_id {record.plant_id}",
                    row=index,
                )
            )
    return report


def group_by_level(cache: EmbeddingCache) -> list[LevelGroup]:
    """Partition records into (crop, plant, day, level) groups.

    Rows within a group are ordered by angle; groups are sorted by key, so
    iteration order is canonical and reproducible.
    """
    buckets: dict[tuple, list[tuple[int, int]]] = {}
    for record in cache.records:
        buckets.setdefault(record.group_key, []).append(
            (record.angle, record.embedding_row)
        )
    groups = []
    for key in sorted(buckets):
        pairs = sorted(buckets[key])
        groups.append(
            LevelGroup(
                key=key,
                rows=[row for _, row in pairs],
                angles=[angle for angle, _ in pairs],
            )
        )
    return groups


def records_to_raw_rows(records: Iterable[ViewRecord]) -> list[dict]:
    """Render records back into raw metadata rows (for idempotence checks
    and ground-truth table emission)."""
    return [
        {
            "image_path": r.image_path,
            "crop": r.crop,
            "plant_id": str(r.plant_id),
            "day": str(r.day),
            "level": str(r.level),
            "angle": str(r.angle),
            "leaf_count": str(r.leaf_count),
        }
        for r in records
    ]


def write_metadata_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    """Write rows in the standard metadata-table format."""
    lines = [",".join(METADATA_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[col]) for col in METADATA_COLUMNS))
    fileio.atomic_write_text(Path(path), "\n".join(lines) + "\n")
