"""Deterministic synthetic image datasets for end-to-end runs and tests.

Each class paints a distinct dominant color channel plus a class-specific
texture, so the true label is decodable from pixels alone (argmax of the
per-channel mean). Generation is a pure function of the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    CLASS_ORDER,
    DatasetManifest,
    GenderLabel,
    ImageRecord,
)

# Mean (R, G, B) palette per class. The third class combines the first two
# channels so that features learned on a two-class subset (which must encode
# both channel intensities) stay sufficient for transfer to all three.
_HI, _LO = 0.78, 0.22
PALETTE = (
    (_HI, _LO, _LO),
    (_LO, _HI, _LO),
    (_HI, _HI, _LO),
)


def _pattern(rng: np.random.Generator, class_idx: int, side: int) -> np.ndarray:
    """Class texture: horizontal stripes / vertical stripes / checkerboard."""
    period = int(rng.integers(6, 13))
    phase = int(rng.integers(0, period))
    yy, xx = np.mgrid[0:side, 0:side]
    if class_idx == 0:
        mask = ((yy + phase) // period) % 2
    elif class_idx == 1:
        mask = ((xx + phase) // period) % 2
    else:
        mask = (((yy + phase) // period) + ((xx + phase) // period)) % 2
    return mask.astype(np.float32)


def synthesize_image(class_idx: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """One float32 (side, side, 3) image in [0, 1] for the given class."""
    img = np.empty((side, side, 3), dtype=np.float32)
    img[:] = PALETTE[class_idx]
    texture = _pattern(rng, class_idx, side) * 0.15
    img += texture[:, :, None]
    img += rng.normal(0.0, 0.04, size=img.shape).astype(np.float32)
    brightness = rng.uniform(0.9, 1.1)
    return np.clip(img * brightness, 0.0, 1.0)


def decode_class(img: np.ndarray) -> int:
    """Ground-truth oracle: nearest palette point to the image's mean color."""
    mean = img.reshape(-1, 3).mean(axis=0)
    dists = [np.sum((mean - np.asarray(p)) ** 2) for p in PALETTE]
    return int(np.argmin(dists))


def make_synthetic_dataset(
    root: str | Path,
    n_per_class: int,
    side: int = 64,
    classes: tuple[GenderLabel, ...] = CLASS_ORDER,
    seed: int = 0,
    identities_per_class: int = 10,
) -> DatasetManifest:
    """Write PNGs under root/images and return an unsplit manifest.

    Records cycle through Fitzpatrick types 1..6 so every skin-tone group is
    populated; identity ids repeat within a class to exercise identity-disjoint
    splitting.
    """
    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for class_idx, label in enumerate(classes):
        for i in range(n_per_class):
            rng = np.random.default_rng((seed, class_idx, i))
            img = synthesize_image(class_idx, side, rng)
            path = image_dir / f"{label.value}_{i:04d}.png"
            Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)
            records.append(ImageRecord(
                image_path=str(path),
                identity_id=f"{label.value}-id{i % identities_per_class:03d}",
                gender=label,
                fitzpatrick=(i % 6) + 1,
            ))
    return DatasetManifest(records=records, name="synthetic")
