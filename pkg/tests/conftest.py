import os

import numpy as np
import pytest
from PIL import Image

from sigma_mapper.core import Raster


def pytest_collection_modifyitems(config, items):
    if os.getenv("SIGMA_MAPPER_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set SIGMA_MAPPER_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def textured(height, width, channels=1, seed=0):
    """Smooth-ish random texture in [20, 235]"""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, (height // 4 + 2, width // 4 + 2, channels))
    up = np.kron(base, np.ones((4, 4, 1)))[:height, :width]
    return Raster(20.0 + 215.0 * up)


def write_png(path, raster):
    pixels = np.clip(np.rint(raster.data), 0, 255).astype(np.uint8)
    if raster.channels == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path)
    return str(path)


@pytest.fixture
def image_dir(tmp_path):
    """Three 48x48 test images (two gray, one colour) and a manifest listing them"""
    folder = tmp_path / "images"
    folder.mkdir()
    paths = [
        write_png(folder / "a.png", textured(48, 48, 1, seed=1)),
        write_png(folder / "b.png", textured(48, 48, 1, seed=2)),
        write_png(folder / "c.png", textured(48, 48, 3, seed=3)),
    ]
    manifest = folder / "manifest.txt"
    manifest.write_text("# test images\n" + "\n".join(os.path.basename(p) for p in paths) + "\n\n")
    return folder, paths, str(manifest)
