"""Label vocabulary, manifest I/O, dataset splitting, grouping, and image loading.

The manifest file format is UTF-8 CSV with the exact header
``image_path,identity_id,gender,fitzpatrick,split``. ``fitzpatrick`` and
``split`` may be empty. All downstream modules consume :class:`DatasetManifest`
objects produced here.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError


class DatasetError(Exception):
    """Base class for dataset-layer failures."""


class ManifestError(DatasetError):
    """Manifest file violates the schema; message carries the row number."""


class SplitError(DatasetError):
    """Split request cannot be satisfied."""


class ImageLoadError(DatasetError):
    """An image file could not be read or decoded; message carries the path."""


class GenderLabel(str, Enum):
    MALE = "male"
    FEMALE = "female"
    NONBINARY = "nonbinary"

    def __str__(self) -> str:
        return self.value


class SkinTone(str, Enum):
    LIGHT = "light"
    BROWN = "brown"
    DARK = "dark"
    UNKNOWN = "unknown"

    def __str__(self) -> str:
        return self.value


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"

    def __str__(self) -> str:
        return self.value


class Origin(str, Enum):
    ORIGINAL = "original"
    AUGMENTED = "augmented"
    DUPLICATED = "duplicated"

    def __str__(self) -> str:
        return self.value


# Stable column/class orders used across the package.
CLASS_ORDER: tuple[GenderLabel, ...] = (
    GenderLabel.MALE,
    GenderLabel.FEMALE,
    GenderLabel.NONBINARY,
)

MANIFEST_COLUMNS: tuple[str, ...] = (
    "image_path",
    "identity_id",
    "gender",
    "fitzpatrick",
    "split",
)


def fitzpatrick_to_tone(t: int) -> SkinTone:
    """Bucket a Fitzpatrick skin type (1..6) into light/brown/dark.

    Types 1-2 map to light, 3-4 to brown, 5-6 to dark.
    """
    if t in (1, 2):
        return SkinTone.LIGHT
    if t in (3, 4):
        return SkinTone.BROWN
    if t in (5, 6):
        return SkinTone.DARK
    raise ManifestError(f"Fitzpatrick type must be an integer in 1..6, got {t!r}")


@dataclass(frozen=True)
class GroupKey:
    """Audit group: the (gender, skin tone) cell of the label space."""

    gender: GenderLabel
    tone: SkinTone

    def __str__(self) -> str:
        return f"{self.gender.value}.{self.tone.value}"

    @classmethod
    def parse(cls, text: str) -> "GroupKey":
        gender, _, tone = text.partition(".")
        return cls(GenderLabel(gender), SkinTone(tone))


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image. ``tone`` is derived from ``fitzpatrick`` when present."""

    image_path: str
    identity_id: str
    gender: GenderLabel
    fitzpatrick: int | None = None
    tone: SkinTone = SkinTone.UNKNOWN
    split: Split = Split.UNASSIGNED
    origin: Origin = Origin.ORIGINAL

    def __post_init__(self) -> None:
        if not self.image_path:
            raise ManifestError("image_path must be nonempty")
        if not self.identity_id:
            raise ManifestError("identity_id must be nonempty")
        if self.fitzpatrick is not None:
            derived = fitzpatrick_to_tone(self.fitzpatrick)
            if self.tone is SkinTone.UNKNOWN:
                object.__setattr__(self, "tone", derived)
            elif self.tone is not derived:
                raise ManifestError(
                    f"tone {self.tone.value!r} inconsistent with Fitzpatrick type "
                    f"{self.fitzpatrick} (expected {derived.value!r})"
                )

    @property
    def group(self) -> GroupKey:
        return GroupKey(self.gender, self.tone)


@dataclass
class DatasetManifest:
    """An ordered collection of image records."""

    records: list[ImageRecord] = field(default_factory=list)
    name: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def filter(self, *, split: Split | None = None,
               genders: Sequence[GenderLabel] | None = None) -> "DatasetManifest":
        """Subset by split and/or gender, preserving record order."""
        keep = [
            r for r in self.records
            if (split is None or r.split is split)
            and (genders is None or r.gender in genders)
        ]
        return DatasetManifest(records=keep, name=self.name)

    def gender_counts(self) -> dict[GenderLabel, int]:
        return dict(Counter(r.gender for r in self.records))

    def group_counts(self) -> dict[GroupKey, int]:
        return dict(Counter(r.group for r in self.records))


def _parse_row(row: dict[str, str], row_num: int) -> ImageRecord:
    gender_tok = row["gender"].strip()
    try:
        gender = GenderLabel(gender_tok)
    except ValueError:
        raise ManifestError(
            f"row {row_num}: unknown gender token {gender_tok!r} "
            f"(expected one of {', '.join(g.value for g in GenderLabel)})"
        ) from None

    fitz_tok = row["fitzpatrick"].strip()
    fitz: int | None = None
    if fitz_tok:
        try:
            fitz = int(fitz_tok)
        except ValueError:
            raise ManifestError(
                f"row {row_num}: malformed Fitzpatrick value {fitz_tok!r}"
            ) from None
        if fitz not in range(1, 7):
            raise ManifestError(
                f"row {row_num}: Fitzpatrick value {fitz} out of range 1..6"
            )

    split_tok = row["split"].strip()
    try:
        split = Split(split_tok) if split_tok else Split.UNASSIGNED
    except ValueError:
        raise ManifestError(
            f"row {row_num}: unknown split token {split_tok!r}"
        ) from None

    try:
        return ImageRecord(
            image_path=row["image_path"].strip(),
            identity_id=row["identity_id"].strip(),
            gender=gender,
            fitzpatrick=fitz,
            split=split,
        )
    except ManifestError as exc:
        raise ManifestError(f"row {row_num}: {exc}") from None


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV into a DatasetManifest, preserving file order.

    Raises ManifestError with the offending row number on any schema violation.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected header row") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_COLUMNS)}"
            )
        records = []
        for row_num, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"row {row_num}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}"
                )
            records.append(_parse_row(dict(zip(MANIFEST_COLUMNS, row)), row_num))
    return DatasetManifest(records=records, name=path.stem)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest CSV (the five schema columns; origin is not persisted)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([
                r.image_path,
                r.identity_id,
                r.gender.value,
                "" if r.fitzpatrick is None else str(r.fitzpatrick),
                "" if r.split is Split.UNASSIGNED else r.split.value,
            ])
    return path


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier split."""
    raw = [n * f for f in fractions]
    counts = [int(x) for x in raw]
    remainders = sorted(
        range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(
    manifest: DatasetManifest,
    fractions: tuple[float, float, float],
    seed: int,
    identity_disjoint: bool = True,
) -> DatasetManifest:
    """Assign every record a train/val/test split, deterministically under seed.

    Without identity_disjoint the counts land within ±1 of fraction*N. With it
    (the default), whole identity groups are placed greedily - largest group
    first, into the split with the largest remaining deficit, ties to the
    earlier split - so no identity spans two splits and counts stay within
    ±(largest identity group) of the targets.
    """
    if len(fractions) != 3:
        raise SplitError(f"expected 3 fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise SplitError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got sum={sum(fractions)!r}")

    n = len(manifest)
    targets = _apportion(n, fractions)
    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    assignment: dict[int, Split] = {}
    rng = np.random.default_rng(seed)

    if identity_disjoint:
        by_identity: dict[str, list[int]] = defaultdict(list)
        for idx, rec in enumerate(manifest.records):
            by_identity[rec.identity_id].append(idx)
        identities = list(by_identity)
        rng.shuffle(identities)
        # Stable sort keeps the seeded shuffle as the tie order among equal sizes.
        identities.sort(key=lambda ident: -len(by_identity[ident]))
        filled = [0, 0, 0]
        for ident in identities:
            deficits = [targets[i] - filled[i] for i in range(3)]
            dest = max(range(3), key=lambda i: (deficits[i], -i))
            for idx in by_identity[ident]:
                assignment[idx] = splits[dest]
            filled[dest] += len(by_identity[ident])
    else:
        order = rng.permutation(n)
        bounds = np.cumsum(targets)
        for rank, idx in enumerate(order):
            dest = int(np.searchsorted(bounds, rank, side="right"))
            assignment[int(idx)] = splits[dest]

    new_records = [
        replace(rec, split=assignment[idx]) for idx, rec in enumerate(manifest.records)
    ]
    return DatasetManifest(records=new_records, name=manifest.name)


def group_distribution(manifest: DatasetManifest) -> dict[GroupKey, float]:
    """Proportion of records per (gender, tone) group; sums to 1."""
    if len(manifest) == 0:
        raise DatasetError("group distribution is undefined for an empty manifest")
    counts = manifest.group_counts()
    total = len(manifest)
    return {key: counts[key] / total for key in sorted(counts, key=str)}


def _resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Plain bilinear resize (half-pixel centers, no antialias filter)."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (side, side):
        return img.copy()
    out = img
    for axis, in_len in ((0, in_h), (1, in_w)):
        coords = (np.arange(side) + 0.5) * (in_len / side) - 0.5
        lo = np.floor(coords).astype(np.int64)
        frac = (coords - lo).astype(np.float32)
        lo = np.clip(lo, 0, in_len - 1)
        hi = np.clip(lo + 1, 0, in_len - 1)
        take_lo = np.take(out, lo, axis=axis)
        take_hi = np.take(out, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = side
        w = frac.reshape(shape)
        # lo + (hi-lo)*w is exact when hi == lo (constant and identity cases)
        out = take_lo + (take_hi - take_lo) * w
    return out.astype(np.float32)


def load_image(source: ImageRecord | str | Path, side: int) -> np.ndarray:
    """Decode an image to a float32 (side, side, 3) array with values in [0, 1].

    Resizing is deterministic bilinear with half-pixel sample centers and no
    antialiasing; a same-size input passes through unchanged.
    """
    path = Path(source.image_path if isinstance(source, ImageRecord) else source)
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot load image {path}: {exc}") from exc
    return _resize_bilinear(arr, side)


def load_images(records: Iterable[ImageRecord], side: int) -> np.ndarray:
    """Stack load_image over records into an (N, side, side, 3) batch."""
    arrays = [load_image(r, side) for r in records]
    if not arrays:
        return np.zeros((0, side, side, 3), dtype=np.float32)
    return np.stack(arrays)
