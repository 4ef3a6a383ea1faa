"""Synthetic embedding caches with a known linear generative model.

Each record's embedding is ``age * u_age + leaf * u_leaf + level * u_level``
plus optional Gaussian noise, where the three hidden directions are
orthonormal and fixed by the seed. Because the mapping is linear and
noiseless data are exactly recoverable by closed-form regression, these
caches serve as ground-truth oracles for the training and evaluation
stack: if a closed-form ridge fit succeeds but gradient training does not,
the training loop is to blame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import priors, store
from .store import EMBED_DIM, LEVELS, VIEWS_PER_LEVEL, ViewRecord

DEFAULT_CROPS = ("mustard", "radish", "wheat")

# Substream salts so directions, noise, and synthetic priors never alias.
_DIRECTIONS_STREAM = 0xD12
_NOISE_STREAM = 0x4015E
_PRIORS_STREAM = 0x9123


@dataclass(frozen=True)
class SynthSpec:
    """Shape and seed of a synthetic dataset.

    ``n_plants`` is per crop; every plant is imaged for days ``1..n_days``
    at all five levels and 24 angles. Leaf count is the deterministic
    ``ceil(1.5 * day)`` so the two regression targets are correlated.
    """

    n_plants: int = 3
    n_days: int = 20
    noise_std: float = 0.0
    seed: int = 7
    crops: tuple[str, ...] = DEFAULT_CROPS

    def __post_init__(self) -> None:
        if self.n_plants < 2:
            raise ValueError("n_plants must be >= 2 so a plant split exists")
        if self.n_days < 2:
            raise ValueError("n_days must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.crops:
            raise ValueError("at least one crop required")


def leaf_count_for_day(day: int) -> int:
    return int(math.ceil(1.5 * day))


def generative_directions(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The seed-fixed orthonormal (age, leaf, level) directions in R^512."""
    rng = np.random.default_rng([spec.seed, _DIRECTIONS_STREAM])
    raw = rng.standard_normal((EMBED_DIM, 3))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # canonical sign so QR is reproducible
    return q[:, 0].copy(), q[:, 1].copy(), q[:, 2].copy()


def generate_synthetic_cache(
    spec: SynthSpec,
) -> tuple[store.EmbeddingCache, list[dict]]:
    """Build a cache plus its ground-truth metadata table.

    Record order is canonical: crop, plant, day, level, angle. With
    ``noise_std == 0`` the angle never affects the embedding, so the mean
    over any subset of a group's views equals any single view.
    """
    u_age, u_leaf, u_level = generative_directions(spec)
    noise_rng = np.random.default_rng([spec.seed, _NOISE_STREAM])

    records: list[ViewRecord] = []
    blocks: list[np.ndarray] = []
    truth_rows: list[dict] = []
    row = 0
    for crop in spec.crops:
        for plant in range(1, spec.n_plants + 1):
            for day in range(1, spec.n_days + 1):
                leaf = leaf_count_for_day(day)
                for level in LEVELS:
                    base = day * u_age + leaf * u_leaf + level * u_level
                    block = np.repeat(base[None, :], VIEWS_PER_LEVEL, axis=0)
                    if spec.noise_std > 0:
                        block = block + spec.noise_std * noise_rng.standard_normal(
                            block.shape
                        )
                    blocks.append(block.astype(np.float32))
                    for angle in range(VIEWS_PER_LEVEL):
                        image_path = (
                            f"synthetic/{crop}/plant{plant}/day{day:02d}/"
                            f"level{level}/angle{angle:02d}.png"
                        )
                        records.append(
                            ViewRecord(
                                crop=crop,
                                plant_id=plant,
                                day=day,
                                level=level,
                                angle=angle,
                                leaf_count=leaf,
                                embedding_row=row,
                                image_path=image_path,
                            )
                        )
                        truth_rows.append(
                            {
                                "image_path": image_path,
                                "crop": crop,
                                "plant_id": plant,
                                "day": day,
                                "level": level,
                                "angle": angle,
                                "leaf_count": leaf,
                            }
                        )
                        row += 1
    matrix = np.concatenate(blocks, axis=0)
    return store.EmbeddingCache(records=records, matrix=matrix), truth_rows


def synthetic_priors(seed: int) -> priors.PriorTable:
    """Deterministic stand-in prior table (random unit embeddings).

    Lets the full multimodal pipeline run end to end without a text
    encoder; prompts follow the real template so the table passes every
    prior-file check.
    """
    rng = np.random.default_rng([int(seed), _PRIORS_STREAM])
    embeddings = rng.standard_normal((len(LEVELS), EMBED_DIM)).astype(np.float32)
    table = priors.PriorTable(
        prompts=tuple(priors.prompt_for_level(level) for level in LEVELS),
        embeddings=embeddings,
        normalized=False,
    )
    return priors.normalize_priors(table)
