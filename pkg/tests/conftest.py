import numpy as np
import pytest

from plantreg import store


def make_rows(n_angles=24, crop="mustard", plant=1, day=3, level=2, leaf=5):
    """Raw metadata rows for one complete (or partial) level group."""
    return [
        {
            "image_path": f"images/{crop}/p{plant}/d{day}/l{level}/a{a:02d}.png",
            "crop": crop,
            "plant_id": str(plant),
            "day": str(day),
            "level": str(level),
            "angle": str(a),
            "leaf_count": str(leaf),
            "line": a + 2,
        }
        for a in range(n_angles)
    ]


def make_cache(records_spec, seed=0):
    """Build a small cache from (crop, plant, day, level, angle, leaf) tuples."""
    rng = np.random.default_rng(seed)
    records = [
        store.ViewRecord(
            crop=crop,
            plant_id=plant,
            day=day,
            level=level,
            angle=angle,
            leaf_count=leaf,
            embedding_row=i,
            image_path=f"img{i}.png",
        )
        for i, (crop, plant, day, level, angle, leaf) in enumerate(records_spec)
    ]
    matrix = rng.standard_normal((len(records), store.EMBED_DIM)).astype(np.float32)
    return store.EmbeddingCache(records=records, matrix=matrix)


@pytest.fixture
def tiny_cache():
    """Two complete groups (two levels) of one mustard plant-day."""
    spec = [
        ("mustard", 1, 3, level, angle, 5)
        for level in (1, 2)
        for angle in range(24)
    ]
    return make_cache(spec)
