from collections import Counter

import numpy as np
import pytest
from PIL import Image

from fairvision.dataset import (
    GenderLabel,
    GroupKey,
    ImageRecord,
    Origin,
    SkinTone,
    group_distribution,
)
from fairvision.rebalance import (
    AugmentationPlan,
    OversamplePlan,
    PlanError,
    RebalanceError,
    TransformParams,
    apply_augmentation,
    load_plan,
    oversample,
    plan_augmentation,
    save_plan,
)

from conftest import manifest_of

DARK_MALE = GroupKey(GenderLabel.MALE, SkinTone.DARK)
DARK_FEMALE = GroupKey(GenderLabel.FEMALE, SkinTone.DARK)
LIGHT_MALE = GroupKey(GenderLabel.MALE, SkinTone.LIGHT)
LIGHT_FEMALE = GroupKey(GenderLabel.FEMALE, SkinTone.LIGHT)


def dist_of(counts):
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


class TestTransformParams:
    def test_defaults_valid(self):
        params = TransformParams()
        assert params.rotation_range == 20.0
        assert params.fill_mode == "nearest"

    @pytest.mark.parametrize("kwargs", [
        {"rotation_range": -1.0},
        {"width_shift": 1.0},
        {"zoom_range": -0.1},
        {"fill_mode": "mirror"},
    ])
    def test_bad_params_rejected(self, kwargs):
        with pytest.raises(PlanError):
            TransformParams(**kwargs)


class TestPlanAugmentation:
    def test_small_group_to_half(self):
        counts = {DARK_MALE: 10, LIGHT_FEMALE: 90}
        plan = plan_augmentation(dist_of(counts), counts, {DARK_MALE: 0.5})
        assert plan.copies_per_group[DARK_MALE] == 80
        assert LIGHT_FEMALE not in plan.copies_per_group

    def test_paper_targets_within_tolerance(self):
        counts = {DARK_MALE: 13, DARK_FEMALE: 25, LIGHT_MALE: 500, LIGHT_FEMALE: 462}
        targets = {DARK_MALE: 0.1521, DARK_FEMALE: 0.1603}
        plan = plan_augmentation(dist_of(counts), counts, targets)
        new_total = sum(counts.values()) + plan.total_copies()
        for group, target in targets.items():
            achieved = (counts[group] + plan.copies_per_group[group]) / new_total
            assert abs(achieved - target) <= 0.005

    def test_fixed_point_gives_zero_copies(self):
        counts = {DARK_MALE: 20, LIGHT_FEMALE: 80}
        dist = dist_of(counts)
        plan = plan_augmentation(dist, counts, dict(dist))
        assert all(v == 0 for v in plan.copies_per_group.values())

    def test_target_below_current_is_infeasible(self):
        counts = {DARK_MALE: 50, LIGHT_FEMALE: 50}
        with pytest.raises(PlanError, match="deleting"):
            plan_augmentation(dist_of(counts), counts, {DARK_MALE: 0.2})

    def test_target_for_empty_group_is_infeasible(self):
        counts = {LIGHT_FEMALE: 50}
        with pytest.raises(PlanError, match="no source images"):
            plan_augmentation(dist_of(counts), counts, {DARK_MALE: 0.3})

    def test_all_groups_targeted_at_fixed_point(self):
        counts = {DARK_MALE: 25, LIGHT_FEMALE: 75}
        dist = dist_of(counts)
        plan = plan_augmentation(dist, counts, {DARK_MALE: 0.25, LIGHT_FEMALE: 0.75})
        assert plan.copies_per_group == {DARK_MALE: 0, LIGHT_FEMALE: 0}

    def test_majority_target_below_share_is_rejected(self):
        # A target below a group's current share violates the growth-only
        # contract even if other groups could be grown around it.
        counts = {DARK_MALE: 10, LIGHT_FEMALE: 90}
        with pytest.raises(PlanError, match="below its current proportion"):
            plan_augmentation(dist_of(counts), counts,
                              {DARK_MALE: 0.5, LIGHT_FEMALE: 0.5})

    def test_plan_file_round_trip(self, tmp_path):
        plan = AugmentationPlan(
            copies_per_group={DARK_MALE: 164},
            target_proportions={DARK_MALE: 0.1521},
        )
        path = save_plan(plan, tmp_path / "plan.txt")
        text = path.read_text()
        assert "copies.male.dark = 164" in text
        assert "target.male.dark = 0.152100" in text
        back = load_plan(path)
        assert back.copies_per_group == plan.copies_per_group
        assert back.target_proportions[DARK_MALE] == pytest.approx(0.1521)


def _image_records(write_png, group: GroupKey, n, fitz, prefix):
    records = []
    for i in range(n):
        path = write_png(side=12, name=f"{prefix}{i}.png")
        records.append(ImageRecord(
            image_path=str(path), identity_id=f"{prefix}{i}",
            gender=group.gender, fitzpatrick=fitz,
        ))
    return records


class TestApplyAugmentation:
    def test_zero_plan_is_identity(self, write_png, tmp_path):
        man = manifest_of(_image_records(write_png, DARK_MALE, 3, 6, "dm"))
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 0},
                                target_proportions={})
        out = apply_augmentation(man, plan, TransformParams(), seed=0,
                                 output_dir=tmp_path / "aug")
        assert out.records == man.records

    def test_labels_inherited(self, write_png, tmp_path):
        man = manifest_of(_image_records(write_png, DARK_MALE, 1, 5, "dm"))
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 3},
                                target_proportions={})
        out = apply_augmentation(man, plan, TransformParams(), seed=1,
                                 output_dir=tmp_path / "aug")
        assert len(out) == 4
        for rec in out.records:
            assert rec.gender is GenderLabel.MALE
            assert rec.tone is SkinTone.DARK
            assert rec.identity_id == "dm0"
        assert [r.origin for r in out.records].count(Origin.AUGMENTED) == 3
        for rec in out.records[1:]:
            img = np.asarray(Image.open(rec.image_path))
            assert img.shape == (12, 12, 3)

    def test_group_proportions_reached_by_recount(self, write_png, tmp_path):
        records = _image_records(write_png, DARK_MALE, 4, 6, "dm")
        records += _image_records(write_png, LIGHT_FEMALE, 96, 1, "lf")
        man = manifest_of(records)
        dist = group_distribution(man)
        targets = {DARK_MALE: 0.25}
        plan = plan_augmentation(dist, man.group_counts(), targets)
        out = apply_augmentation(man, plan, TransformParams(), seed=3,
                                 output_dir=tmp_path / "aug")
        achieved = group_distribution(out)
        assert abs(achieved[DARK_MALE] - 0.25) <= 0.005
        assert len(out) == len(man) + plan.total_copies()

    def test_deterministic_under_seed(self, write_png, tmp_path):
        man = manifest_of(_image_records(write_png, DARK_MALE, 2, 5, "dm"))
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 5},
                                target_proportions={})
        out1 = apply_augmentation(man, plan, TransformParams(), seed=9,
                                  output_dir=tmp_path / "a")
        out2 = apply_augmentation(man, plan, TransformParams(), seed=9,
                                  output_dir=tmp_path / "b")
        for r1, r2 in zip(out1.records, out2.records):
            if r1.origin is Origin.AUGMENTED:
                b1 = np.asarray(Image.open(r1.image_path))
                b2 = np.asarray(Image.open(r2.image_path))
                np.testing.assert_array_equal(b1, b2)

    def test_different_seed_changes_pixels(self, write_png, tmp_path):
        man = manifest_of(_image_records(write_png, DARK_MALE, 1, 5, "dm"))
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 1},
                                target_proportions={})
        out1 = apply_augmentation(man, plan, TransformParams(), seed=1,
                                  output_dir=tmp_path / "a")
        out2 = apply_augmentation(man, plan, TransformParams(), seed=2,
                                  output_dir=tmp_path / "b")
        b1 = np.asarray(Image.open(out1.records[-1].image_path))
        b2 = np.asarray(Image.open(out2.records[-1].image_path))
        assert not np.array_equal(b1, b2)

    def test_unreadable_source_no_partial_output(self, write_png, tmp_path):
        records = _image_records(write_png, DARK_MALE, 1, 5, "dm")
        records.append(ImageRecord(image_path=str(tmp_path / "missing.png"),
                                   identity_id="ghost", gender=GenderLabel.MALE,
                                   fitzpatrick=5))
        man = manifest_of(records)
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 4},
                                target_proportions={})
        out_dir = tmp_path / "aug"
        with pytest.raises(RebalanceError, match="missing.png"):
            apply_augmentation(man, plan, TransformParams(), seed=0,
                               output_dir=out_dir)
        assert not out_dir.exists() or not list(out_dir.iterdir())

    @pytest.mark.parametrize("fill_mode", ["nearest", "reflect", "wrap"])
    def test_fill_modes_run(self, write_png, tmp_path, fill_mode):
        man = manifest_of(_image_records(write_png, DARK_MALE, 1, 5, "dm"))
        plan = AugmentationPlan(copies_per_group={DARK_MALE: 1},
                                target_proportions={})
        params = TransformParams(fill_mode=fill_mode)
        out = apply_augmentation(man, plan, params, seed=4,
                                 output_dir=tmp_path / fill_mode)
        assert len(out) == 2


def _plain_records(gender, n, prefix):
    return [
        ImageRecord(image_path=f"{prefix}{i}.png", identity_id=f"{prefix}{i}",
                    gender=gender)
        for i in range(n)
    ]


class TestOversample:
    def test_paper_counts_male_753_to_1019(self):
        man = manifest_of(
            _plain_records(GenderLabel.MALE, 753, "m")
            + _plain_records(GenderLabel.FEMALE, 1006, "f")
            + _plain_records(GenderLabel.NONBINARY, 760, "n")
        )
        out = oversample(man, OversamplePlan(class_key=GenderLabel.MALE,
                                             target_count=1019, seed=0))
        counts = out.gender_counts()
        assert counts[GenderLabel.MALE] == 1019
        assert counts[GenderLabel.FEMALE] == 1006
        assert counts[GenderLabel.NONBINARY] == 760
        added = [r for r in out.records if r.origin is Origin.DUPLICATED]
        assert len(added) == 266
        assert all(r.gender is GenderLabel.MALE for r in added)

    def test_noop_when_target_equals_current(self):
        man = manifest_of(_plain_records(GenderLabel.FEMALE, 5, "f"))
        out = oversample(man, OversamplePlan(class_key=GenderLabel.FEMALE,
                                             target_count=5, seed=0))
        assert out.records == man.records

    def test_duplicates_are_copies_of_originals(self):
        man = manifest_of(_plain_records(GenderLabel.NONBINARY, 2, "n"))
        out = oversample(man, OversamplePlan(class_key=GenderLabel.NONBINARY,
                                             target_count=5, seed=3))
        added = [r for r in out.records if r.origin is Origin.DUPLICATED]
        assert len(added) == 3
        original_paths = {"n0.png", "n1.png"}
        assert all(r.image_path in original_paths for r in added)
        multiset = Counter(r.image_path for r in out.records)
        assert sum(multiset.values()) == 5

    def test_shrinking_rejected(self):
        man = manifest_of(_plain_records(GenderLabel.MALE, 10, "m"))
        with pytest.raises(PlanError, match="below the current count"):
            oversample(man, OversamplePlan(class_key=GenderLabel.MALE,
                                           target_count=4, seed=0))

    def test_group_key_selection(self):
        records = []
        for i in range(4):
            records.append(ImageRecord(image_path=f"dm{i}.png", identity_id=f"dm{i}",
                                       gender=GenderLabel.MALE, fitzpatrick=6))
        for i in range(4):
            records.append(ImageRecord(image_path=f"lm{i}.png", identity_id=f"lm{i}",
                                       gender=GenderLabel.MALE, fitzpatrick=1))
        man = manifest_of(records)
        out = oversample(man, OversamplePlan(class_key=DARK_MALE,
                                             target_count=7, seed=1))
        counts = out.group_counts()
        assert counts[DARK_MALE] == 7
        assert counts[LIGHT_MALE] == 4

    def test_deterministic_under_seed(self):
        man = manifest_of(_plain_records(GenderLabel.MALE, 6, "m"))
        plan = OversamplePlan(class_key=GenderLabel.MALE, target_count=20, seed=11)
        a = oversample(man, plan)
        b = oversample(man, plan)
        assert [r.image_path for r in a.records] == [r.image_path for r in b.records]

    def test_labels_never_change(self):
        man = manifest_of(_plain_records(GenderLabel.MALE, 3, "m"))
        out = oversample(man, OversamplePlan(class_key=GenderLabel.MALE,
                                             target_count=9, seed=2))
        for rec in out.records:
            assert rec.gender is GenderLabel.MALE
            assert rec.identity_id.startswith("m")
