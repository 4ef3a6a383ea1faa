"""Metadata table ingestion with the same cleaning rules the training
toolkit applies: explicit per-row rejection reasons, first-occurrence-wins
deduplication, no silent correction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

REQUIRED_COLUMNS = (
    "image_path",
    "crop",
    "plant_id",
    "day",
    "level",
    "angle",
    "leaf_count",
)


class MetadataHeaderError(ValueError):
    pass


@dataclass(frozen=True)
class MetaRow:
    line: int
    image_path: str
    crop: str
    plant_id: int
    day: int
    level: int
    angle: int
    leaf_count: int

    @property
    def key(self):
        return (self.crop, self.plant_id, self.day, self.level, self.angle)

    def record_dict(self, embedding_row: int) -> dict:
        return {
            "crop": self.crop,
            "plant_id": self.plant_id,
            "day": self.day,
            "level": self.level,
            "angle": self.angle,
            "leaf_count": self.leaf_count,
            "embedding_row": embedding_row,
            "image_path": self.image_path,
        }


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str
    detail: str


def read_rows(path: str | Path) -> tuple[list[MetaRow], list[Rejection]]:
    """Parse and validate a metadata CSV, keeping input order.

    Raises:
        MetadataHeaderError: a required column is missing from the header.
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [col for col in REQUIRED_COLUMNS if col not in header]
        if missing:
            raise MetadataHeaderError(
                f"{path}: header is missing column(s) {', '.join(missing)}"
            )
        accepted: list[MetaRow] = []
        rejected: list[Rejection] = []
        seen = set()
        for raw in reader:
            line = reader.line_num
            try:
                row = MetaRow(
                    line=line,
                    image_path=str(raw.get("image_path") or "").strip(),
                    crop=str(raw.get("crop") or "").strip().lower(),
                    plant_id=int(str(raw.get("plant_id")).strip()),
                    day=int(str(raw.get("day")).strip()),
                    level=int(str(raw.get("level")).strip()),
                    angle=int(str(raw.get("angle")).strip()),
                    leaf_count=int(str(raw.get("leaf_count")).strip()),
                )
            except (TypeError, ValueError) as exc:
                rejected.append(Rejection(line, "unparseable", str(exc)))
                continue
            if not row.crop or row.plant_id < 1 or row.day < 1 or row.leaf_count < 0:
                rejected.append(Rejection(line, "unparseable", "field out of domain"))
                continue
            if not 1 <= row.level <= 5:
                rejected.append(Rejection(line, "bad_level", f"level {row.level}"))
                continue
            if not 0 <= row.angle <= 23:
                rejected.append(Rejection(line, "bad_angle", f"angle {row.angle}"))
                continue
            if row.key in seen:
                rejected.append(Rejection(line, "duplicate_key", repr(row.key)))
                continue
            seen.add(row.key)
            accepted.append(row)
    return accepted, rejected
