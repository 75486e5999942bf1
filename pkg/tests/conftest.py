import numpy as np
import pytest
from PIL import Image

from fairvision.dataset import (
    DatasetManifest,
    GenderLabel,
    ImageRecord,
    SkinTone,
    Split,
)


@pytest.fixture
def make_record():
    def build(path="img.png", identity="id0", gender=GenderLabel.MALE,
              fitzpatrick=None, tone=SkinTone.UNKNOWN, split=Split.UNASSIGNED):
        return ImageRecord(image_path=path, identity_id=identity, gender=gender,
                           fitzpatrick=fitzpatrick, tone=tone, split=split)
    return build


@pytest.fixture
def write_manifest(tmp_path):
    """Write manifest CSV text rows and return the path."""
    def build(rows, header="image_path,identity_id,gender,fitzpatrick,split",
              name="manifest.csv"):
        path = tmp_path / name
        path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
        return path
    return build


@pytest.fixture
def write_png(tmp_path):
    """Write a random RGB PNG of the given side and return its path."""
    counter = {"n": 0}

    def build(side=12, seed=None, name=None, array=None):
        counter["n"] += 1
        path = tmp_path / (name or f"img_{counter['n']:03d}.png")
        if array is None:
            rng = np.random.default_rng(seed if seed is not None else counter["n"])
            array = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
        Image.fromarray(array).save(path)
        return path
    return build


def manifest_of(records):
    return DatasetManifest(records=list(records), name="test")
