"""Move a dataset toward target group proportions.

Two mechanisms: augmentation (synthesize perturbed copies of images in
under-represented groups, materialized as PNG files) and oversampling
(duplicate manifest rows of a class until it reaches a target count).
Neither changes any record's labels, and both are deterministic functions
of (input, plan, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image, UnidentifiedImageError

from .dataset import (
    DatasetManifest,
    GenderLabel,
    GroupKey,
    ImageRecord,
    Origin,
)


class RebalanceError(Exception):
    """Base class for rebalancing failures."""


class PlanError(RebalanceError):
    """Requested proportions are infeasible or a plan precondition fails."""


FILL_MODES = ("nearest", "reflect", "wrap")

PROPORTION_TOLERANCE = 0.005  # ±0.5 percentage points on achieved proportions


@dataclass(frozen=True)
class TransformParams:
    """Perturbation ranges for augmentation (face-safe defaults)."""

    rotation_range: float = 20.0
    width_shift: float = 0.1
    height_shift: float = 0.1
    zoom_range: float = 0.1
    horizontal_flip: bool = True
    fill_mode: str = "nearest"

    def __post_init__(self) -> None:
        if self.rotation_range < 0:
            raise PlanError(f"rotation_range must be nonnegative, got {self.rotation_range}")
        for name in ("width_shift", "height_shift", "zoom_range"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise PlanError(f"{name} must be in [0, 1), got {v}")
        if self.fill_mode not in FILL_MODES:
            raise PlanError(f"fill_mode must be one of {FILL_MODES}, got {self.fill_mode!r}")


@dataclass
class AugmentationPlan:
    """Copy counts per group. Values are TOTAL new copies for the group;
    application gives each original total//n copies and assigns the remainder
    to the lexicographically first image paths."""

    copies_per_group: dict[GroupKey, int]
    target_proportions: dict[GroupKey, float]

    def total_copies(self) -> int:
        return sum(self.copies_per_group.values())


@dataclass(frozen=True)
class OversamplePlan:
    """Duplicate records of one class until it has target_count members."""

    class_key: GroupKey | GenderLabel
    target_count: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_count < 1:
            raise PlanError(f"target_count must be positive, got {self.target_count}")


def save_plan(plan: AugmentationPlan, path: str | Path) -> Path:
    """Serialize a plan to a human-readable key-value audit file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(plan.target_proportions, key=str):
        lines.append(f"target.{key} = {plan.target_proportions[key]:.6f}")
    for key in sorted(plan.copies_per_group, key=str):
        lines.append(f"copies.{key} = {plan.copies_per_group[key]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_plan(path: str | Path) -> AugmentationPlan:
    copies: dict[GroupKey, int] = {}
    targets: dict[GroupKey, float] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kind, _, group = key.strip().partition(".")
        if kind == "target":
            targets[GroupKey.parse(group)] = float(value)
        elif kind == "copies":
            copies[GroupKey.parse(group)] = int(value)
        else:
            raise PlanError(f"unknown plan entry {key.strip()!r}")
    return AugmentationPlan(copies_per_group=copies, target_proportions=targets)


def plan_augmentation(
    dist: dict[GroupKey, float],
    current_counts: dict[GroupKey, int],
    targets: dict[GroupKey, float],
) -> AugmentationPlan:
    """Solve per-group copy counts so targeted groups reach their proportions.

    Untargeted groups receive zero copies. With untargeted mass present the
    grown total is T = untargeted/(1 - sum(targets)); when every group is
    targeted the total is pinned by the group needing no growth. Copy counts
    are apportioned by largest remainder and verified against the ±0.5pp
    tolerance.
    """
    n_total = sum(current_counts.values())
    if n_total == 0:
        raise PlanError("cannot plan augmentation for an empty dataset")
    for g, t in targets.items():
        if not 0 < t <= 1:
            raise PlanError(f"target for {g} must be in (0, 1], got {t}")
        if g not in current_counts or current_counts[g] == 0:
            raise PlanError(f"target group {g} has no source images to copy")
        if t + 1e-12 < dist.get(g, 0.0):
            raise PlanError(
                f"target {t:.4f} for {g} is below its current proportion "
                f"{dist[g]:.4f}; shrinking a group would require deleting images"
            )

    targeted = sorted(targets, key=str)
    s = sum(targets[g] for g in targeted)
    untargeted_count = n_total - sum(current_counts[g] for g in targeted)

    if untargeted_count > 0:
        if s >= 1 - 1e-12:
            raise PlanError(
                f"targets sum to {s:.4f} but untargeted groups hold "
                f"{untargeted_count} records; no growth total can satisfy both"
            )
        grown_total = untargeted_count / (1.0 - s)
    else:
        if abs(s - 1.0) > 1e-9:
            raise PlanError(
                f"every group is targeted, so targets must sum to 1 (got {s:.6f})"
            )
        grown_total = max(current_counts[g] / targets[g] for g in targeted)

    exact = {g: max(0.0, targets[g] * grown_total - current_counts[g]) for g in targeted}
    total_copies = int(np.floor(sum(exact.values()) + 0.5))
    copies = {g: int(np.floor(exact[g])) for g in targeted}
    remainders = sorted(
        targeted, key=lambda g: (-(exact[g] - copies[g]), str(g))
    )
    for g in remainders[: total_copies - sum(copies.values())]:
        copies[g] += 1

    achieved_total = n_total + sum(copies.values())
    for g in targeted:
        achieved = (current_counts[g] + copies[g]) / achieved_total
        if abs(achieved - targets[g]) > PROPORTION_TOLERANCE:
            raise PlanError(
                f"no integer copy count reaches {targets[g]:.4f} for {g} within "
                f"±{PROPORTION_TOLERANCE * 100:.1f}pp (closest: {achieved:.4f}); "
                f"the dataset is too small for this target"
            )
    return AugmentationPlan(copies_per_group=copies, target_proportions=dict(targets))


def _sample_transform(rng: np.random.Generator, params: TransformParams,
                      height: int, width: int) -> dict:
    angle = rng.uniform(-params.rotation_range, params.rotation_range)
    tx = rng.uniform(-params.width_shift, params.width_shift) * width
    ty = rng.uniform(-params.height_shift, params.height_shift) * height
    zoom = rng.uniform(1.0 - params.zoom_range, 1.0 + params.zoom_range)
    flip = bool(params.horizontal_flip and rng.random() < 0.5)
    return {"angle": angle, "tx": tx, "ty": ty, "zoom": zoom, "flip": flip}


def _apply_transform(img: np.ndarray, t: dict, fill_mode: str) -> np.ndarray:
    """Affine warp (rotate/zoom about center, then shift) per channel."""
    h, w = img.shape[:2]
    if t["flip"]:
        img = img[:, ::-1, :]
    theta = np.deg2rad(t["angle"])
    # Output->input mapping: inverse rotation and zoom about the image center,
    # then the inverse shift. Row axis first to match ndimage conventions.
    cos, sin = np.cos(theta), np.sin(theta)
    inv_scale = 1.0 / t["zoom"]
    mat = inv_scale * np.array([[cos, -sin], [sin, cos]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([t["ty"], t["tx"]])
    offset = center - mat @ (center + shift)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndi.affine_transform(
            img[:, :, c], mat, offset=offset, order=1, mode=fill_mode
        )
    return np.clip(out, 0.0, 1.0)


def _augmented_name(index: int, src: Path, copy: int) -> str:
    return f"{index:06d}_{src.stem}_aug{copy:03d}.png"


def apply_augmentation(
    manifest: DatasetManifest,
    plan: AugmentationPlan,
    params: TransformParams,
    seed: int,
    output_dir: str | Path,
) -> DatasetManifest:
    """Materialize the plan: write perturbed PNG copies and extend the manifest.

    Every original record is kept; copies inherit all labels and identity with
    origin=augmented. Per-image randomness derives from (seed, source index,
    copy index), so results are independent of processing order.
    """
    output_dir = Path(output_dir)
    by_group: dict[GroupKey, list[tuple[int, ImageRecord]]] = {}
    for idx, rec in enumerate(manifest.records):
        by_group.setdefault(rec.group, []).append((idx, rec))

    # Per-record copy assignment: base copies for all, remainder to the
    # lexicographically first paths within the group.
    jobs: list[tuple[int, ImageRecord, int]] = []
    for group, total in sorted(plan.copies_per_group.items(), key=lambda kv: str(kv[0])):
        if total == 0:
            continue
        members = by_group.get(group)
        if not members:
            raise PlanError(f"plan assigns copies to {group}, absent from the manifest")
        ordered = sorted(members, key=lambda pair: (pair[1].image_path, pair[0]))
        base, extra = divmod(total, len(ordered))
        for rank, (idx, rec) in enumerate(ordered):
            n_copies = base + (1 if rank < extra else 0)
            if n_copies:
                jobs.append((idx, rec, n_copies))

    # Validate every source before writing anything: no partial output.
    sources: dict[int, np.ndarray] = {}
    for idx, rec, _ in jobs:
        try:
            with Image.open(rec.image_path) as im:
                sources[idx] = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            raise RebalanceError(
                f"cannot read augmentation source {rec.image_path}: {exc}"
            ) from exc

    output_dir.mkdir(parents=True, exist_ok=True)
    augmented: list[tuple[int, int, ImageRecord]] = []
    for idx, rec, n_copies in jobs:
        img = sources[idx]
        for k in range(n_copies):
            rng = np.random.default_rng((seed, idx, k))
            t = _sample_transform(rng, params, img.shape[0], img.shape[1])
            warped = _apply_transform(img, t, params.fill_mode)
            out_path = output_dir / _augmented_name(idx, Path(rec.image_path), k)
            Image.fromarray((warped * 255.0 + 0.5).astype(np.uint8)).save(out_path)
            augmented.append((idx, k, replace(
                rec, image_path=str(out_path), origin=Origin.AUGMENTED
            )))

    augmented.sort(key=lambda item: (item[0], item[1]))
    new_records = list(manifest.records) + [rec for _, _, rec in augmented]
    return DatasetManifest(records=new_records, name=manifest.name)


def oversample(manifest: DatasetManifest, plan: OversamplePlan) -> DatasetManifest:
    """Duplicate rows of one class (uniform with replacement) up to target_count.

    Other classes are untouched; no pixel files are copied. Deterministic under
    the plan's seed.
    """
    if isinstance(plan.class_key, GroupKey):
        members = [r for r in manifest.records if r.group == plan.class_key]
    else:
        members = [r for r in manifest.records if r.gender is plan.class_key]
    current = len(members)
    if current == 0:
        raise PlanError(f"class {plan.class_key} has no records to duplicate")
    if plan.target_count < current:
        raise PlanError(
            f"target_count {plan.target_count} is below the current count {current}; "
            f"shrinking a class is out of scope"
        )
    n_new = plan.target_count - current
    rng = np.random.default_rng(plan.seed)
    picks = rng.integers(0, current, size=n_new)
    duplicates = [replace(members[int(i)], origin=Origin.DUPLICATED) for i in picks]
    return DatasetManifest(records=list(manifest.records) + duplicates,
                           name=manifest.name)
