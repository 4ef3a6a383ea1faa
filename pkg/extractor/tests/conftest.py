import numpy as np
import pytest
from PIL import Image


def plant_image(seed, size=64):
    """Gray background with a contrasting block: detectable by the stub."""
    rng = np.random.default_rng(seed)
    pixels = np.full((size, size, 3), 128, dtype=np.uint8)
    x0, y0 = rng.integers(8, 24, size=2)
    w, h = rng.integers(16, 32, size=2)
    color = np.array([30, 180 + rng.integers(0, 60), 40], dtype=np.uint8)
    pixels[y0 : y0 + h, x0 : x0 + w] = color
    return Image.fromarray(pixels)


def blank_image(size=64):
    return Image.fromarray(np.full((size, size, 3), 128, dtype=np.uint8))


METADATA_HEADER = "image_path,crop,plant_id,day,level,angle,leaf_count"


@pytest.fixture
def sample_dataset(tmp_path):
    """Three detectable images plus one blank one, with a metadata table."""
    images = tmp_path / "images"
    images.mkdir()
    rows = []
    for i in range(3):
        name = f"mustard_p1_d1_l1_a{i}.png"
        plant_image(seed=i).save(images / name)
        rows.append(f"{name},mustard,1,1,1,{i},4")
    blank_image().save(images / "blank.png")
    rows.append("blank.png,mustard,1,1,1,3,4")
    csv_path = tmp_path / "meta.csv"
    csv_path.write_text(METADATA_HEADER + "\n" + "\n".join(rows) + "\n")
    return {"root": images, "csv": csv_path, "tmp": tmp_path, "n_rows": len(rows)}
