"""Group-accuracy auditing: selection rate, the 80% rule, and reporting.

Selection rate is worst class accuracy over best class accuracy, equivalently
(1 - error_worst)/(1 - error_best). A selection rate strictly below the
threshold (default 0.8) flags disparate impact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .dataset import (
    CLASS_ORDER,
    DatasetManifest,
    GenderLabel,
    GroupKey,
    ImageRecord,
    Origin,
    SkinTone,
    Split,
    load_image,
)

logger = logging.getLogger(__name__)


class FairnessError(Exception):
    """Metric precondition failure."""


class EvaluationError(FairnessError):
    """Model evaluation failed; chains the underlying prediction error."""


class ManifestPredictor(Protocol):
    def predict(self, manifest: DatasetManifest) -> Sequence[GenderLabel]: ...


@dataclass(frozen=True)
class GroupAccuracy:
    group: GenderLabel | GroupKey
    correct: int
    total: int

    def __post_init__(self) -> None:
        if self.total < 1:
            raise FairnessError(f"group {self.group} has no instances")
        if not 0 <= self.correct <= self.total:
            raise FairnessError(f"correct={self.correct} out of range for total={self.total}")

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


@dataclass
class EvaluationReport:
    model_name: str
    overall_accuracy: float
    wrong_count: int
    per_class: list[GroupAccuracy]
    selection_rate: float
    disparate_impact: bool
    misclassified: list[tuple[ImageRecord, GenderLabel]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(g.total for g in self.per_class)


def per_class_accuracy(
    preds: Sequence[GenderLabel],
    truths: Sequence[GenderLabel],
    classes: Sequence[GenderLabel] = CLASS_ORDER,
) -> list[GroupAccuracy]:
    """Accuracy per class, one entry per class that occurs in the truths.

    Classes with zero truth instances are omitted (a warning is logged)
    because 0/0 accuracy is undefined, not zero.
    """
    if len(preds) != len(truths):
        raise FairnessError(
            f"{len(preds)} predictions vs {len(truths)} truths"
        )
    class_set = set(classes)
    for t in truths:
        if t not in class_set:
            raise FairnessError(f"truth label {t!r} outside the class list")
    entries = []
    for cls in classes:
        total = sum(1 for t in truths if t is cls)
        if total == 0:
            logger.warning("class %s has no truth instances; omitted from the audit", cls.value)
            continue
        correct = sum(1 for p, t in zip(preds, truths) if t is cls and p is cls)
        entries.append(GroupAccuracy(group=cls, correct=correct, total=total))
    return entries


def selection_rate(accuracies: Sequence[float]) -> float:
    """Worst accuracy divided by best accuracy; 1.0 means uniform performance."""
    if not accuracies:
        raise FairnessError("selection rate needs at least one accuracy")
    for a in accuracies:
        if not (0.0 <= a <= 1.0) or math.isnan(a):
            raise FairnessError(f"accuracies must lie in [0, 1], got {a!r}")
    best = max(accuracies)
    if best == 0.0:
        raise FairnessError(
            "all class accuracies are zero, so the selection rate is undefined; "
            "check that the model and test set share a label space"
        )
    return min(accuracies) / best


def disparate_impact(rate: float, threshold: float = 0.8) -> bool:
    """True iff the selection rate falls strictly below the threshold."""
    if not 0.0 <= rate <= 1.0:
        raise FairnessError(f"selection rate must lie in [0, 1], got {rate!r}")
    if not 0.0 < threshold <= 1.0:
        raise FairnessError(f"threshold must lie in (0, 1], got {threshold!r}")
    return rate < threshold


def evaluate(
    model: ManifestPredictor,
    test: DatasetManifest,
    model_name: str,
    group_by: str = "gender",
    threshold: float = 0.8,
) -> EvaluationReport:
    """Run a model over a test manifest and audit per-group accuracy.

    group_by="gender" audits the three gender classes (the Table-3 style
    audit); "gender_tone" audits full (gender, skin tone) groups instead.
    """
    if len(test) == 0:
        raise FairnessError("cannot evaluate on an empty test manifest")
    if group_by not in ("gender", "gender_tone"):
        raise FairnessError(f"group_by must be gender or gender_tone, got {group_by!r}")
    try:
        preds = list(model.predict(test))
    except Exception as exc:
        raise EvaluationError(f"prediction failed for {model_name!r}: {exc}") from exc
    if len(preds) != len(test):
        raise EvaluationError(
            f"model {model_name!r} returned {len(preds)} predictions for {len(test)} records"
        )
    truths = [r.gender for r in test.records]

    if group_by == "gender":
        per_class = per_class_accuracy(preds, truths, CLASS_ORDER)
    else:
        groups = sorted({r.group for r in test.records}, key=str)
        per_class = []
        for grp in groups:
            members = [(p, r) for p, r in zip(preds, test.records) if r.group == grp]
            correct = sum(1 for p, r in members if p is r.gender)
            per_class.append(GroupAccuracy(group=grp, correct=correct, total=len(members)))

    misclassified = [
        (rec, pred) for rec, pred, truth in zip(test.records, preds, truths)
        if pred is not truth
    ]
    wrong = len(misclassified)
    total = len(test)
    rate = selection_rate([g.accuracy for g in per_class])
    return EvaluationReport(
        model_name=model_name,
        overall_accuracy=(total - wrong) / total,
        wrong_count=wrong,
        per_class=per_class,
        selection_rate=rate,
        disparate_impact=disparate_impact(rate, threshold),
        misclassified=misclassified,
    )


def render_percent(fraction: float) -> str:
    """Half-up percentage with two decimals, Table-3 style."""
    return str(Decimal(repr(fraction * 100)).quantize(Decimal("0.01"), ROUND_HALF_UP))


TABLE_COLUMNS = ("model", "wrong_images", "overall_accuracy", "male_accuracy",
                 "female_accuracy", "nonbinary_accuracy", "selection_rate")


@dataclass(frozen=True)
class ReportTable:
    csv: str
    text: str


def report_table(reports: Sequence[EvaluationReport]) -> ReportTable:
    """Render reports as delimited text plus an aligned display table.

    Accuracy cells are percentages to two decimals; a class absent from a
    report's audit renders as an empty cell.
    """
    if not reports:
        raise FairnessError("report table needs at least one report")
    rows = []
    for rep in reports:
        by_class = {g.group: g for g in rep.per_class if isinstance(g.group, GenderLabel)}
        cells = [rep.model_name, str(rep.wrong_count), render_percent(rep.overall_accuracy)]
        for cls in CLASS_ORDER:
            cells.append(render_percent(by_class[cls].accuracy) if cls in by_class else "")
        cells.append(render_percent(rep.selection_rate))
        rows.append(cells)

    csv_lines = [",".join(TABLE_COLUMNS)] + [",".join(row) for row in rows]
    widths = [
        max(len(TABLE_COLUMNS[i]), *(len(row[i]) for row in rows))
        for i in range(len(TABLE_COLUMNS))
    ]
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(cells)).rstrip()
    text_lines = [fmt(TABLE_COLUMNS), fmt(["-" * w for w in widths])]
    text_lines += [fmt(row) for row in rows]
    return ReportTable(csv="\n".join(csv_lines) + "\n", text="\n".join(text_lines) + "\n")


def parse_report_table_csv(text: str) -> list[dict[str, str]]:
    lines = [l for l in text.splitlines() if l.strip()]
    header = lines[0].split(",")
    if tuple(header) != TABLE_COLUMNS:
        raise FairnessError(f"unexpected table header {header!r}")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


_TILE_LABEL_HEIGHT = 14


def misclassified_grid(
    report: EvaluationReport,
    columns: int,
    out_path: str | Path,
    tile_side: int = 96,
) -> Path | None:
    """Render misclassified images as an annotated grid PNG.

    Tiles follow the report's (manifest) order; each carries a truth->pred
    caption in its label strip, and the same annotations are embedded as a
    JSON PNG text chunk under the key "annotations". With zero
    misclassifications nothing is written and None is returned.
    """
    if columns < 1:
        raise FairnessError(f"columns must be >= 1, got {columns}")
    items = report.misclassified
    if not items:
        logger.warning("report %r has no misclassified images; grid skipped",
                       report.model_name)
        return None
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    columns = min(columns, len(items))
    n_rows = math.ceil(len(items) / columns)
    cell_h = tile_side + _TILE_LABEL_HEIGHT
    canvas = Image.new("RGB", (columns * tile_side, n_rows * cell_h), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    annotations = []
    for i, (rec, pred) in enumerate(items):
        tile = load_image(rec, tile_side)
        img = Image.fromarray((tile * 255.0 + 0.5).astype(np.uint8))
        r, c = divmod(i, columns)
        x, y = c * tile_side, r * cell_h
        canvas.paste(img, (x, y))
        caption = f"{rec.gender.value}->{pred.value}"
        draw.text((x + 2, y + tile_side + 1), caption, fill=(255, 220, 0))
        annotations.append({
            "image_path": rec.image_path,
            "truth": rec.gender.value,
            "predicted": pred.value,
        })
    meta = PngInfo()
    meta.add_text("annotations", json.dumps(annotations))
    canvas.save(out_path, pnginfo=meta)
    return out_path


REPORT_SCHEMA_VERSION = 1


def _group_to_str(group: GenderLabel | GroupKey) -> str:
    return group.value if isinstance(group, GenderLabel) else str(group)


def _group_from_str(text: str) -> GenderLabel | GroupKey:
    return GroupKey.parse(text) if "." in text else GenderLabel(text)


def save_report(report: EvaluationReport, path: str | Path) -> Path:
    """Serialize a report to structured JSON with a schema version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "model_name": report.model_name,
        "overall_accuracy": report.overall_accuracy,
        "wrong_count": report.wrong_count,
        "selection_rate": report.selection_rate,
        "disparate_impact": report.disparate_impact,
        "per_class": [
            {"group": _group_to_str(g.group), "correct": g.correct, "total": g.total}
            for g in report.per_class
        ],
        "misclassified": [
            {
                "image_path": rec.image_path,
                "identity_id": rec.identity_id,
                "gender": rec.gender.value,
                "fitzpatrick": rec.fitzpatrick,
                "tone": rec.tone.value,
                "split": rec.split.value,
                "origin": rec.origin.value,
                "predicted": pred.value,
            }
            for rec, pred in report.misclassified
        ],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path: str | Path) -> EvaluationReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise FairnessError(f"unsupported report schema version {version!r}")
    per_class = [
        GroupAccuracy(group=_group_from_str(e["group"]), correct=e["correct"],
                      total=e["total"])
        for e in payload["per_class"]
    ]
    misclassified = [
        (
            ImageRecord(
                image_path=e["image_path"],
                identity_id=e["identity_id"],
                gender=GenderLabel(e["gender"]),
                fitzpatrick=e["fitzpatrick"],
                tone=SkinTone(e["tone"]),
                split=Split(e["split"]),
                origin=Origin(e["origin"]),
            ),
            GenderLabel(e["predicted"]),
        )
        for e in payload["misclassified"]
    ]
    return EvaluationReport(
        model_name=payload["model_name"],
        overall_accuracy=payload["overall_accuracy"],
        wrong_count=payload["wrong_count"],
        per_class=per_class,
        selection_rate=payload["selection_rate"],
        disparate_impact=payload["disparate_impact"],
        misclassified=misclassified,
    )
