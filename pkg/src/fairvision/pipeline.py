"""End-to-end orchestration: rebalance, train, transfer, stack, audit, report.

One run writes everything under a fresh timestamped directory (append-only)
with the resolved config copied in; rerunning the same config and seeds
reproduces every metric, so the report table is byte-identical across runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import fairness, nets, rebalance, stacking
from .config import ConfigError, RunConfig, resolved_config_text
from .dataset import (
    CLASS_ORDER,
    DatasetManifest,
    GenderLabel,
    Split,
    group_distribution,
    load_images,
    load_manifest,
    save_manifest,
    split_dataset,
)

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """A pipeline stage failed; the message names the stage."""


# Audited models, in the order reports are emitted.
BASE_MODEL_STAGES = ("feature_extraction", "fine_tuned", "backbone")

DISPLAY_NAMES = {
    "baseline": "baseline",
    "feature_extraction": "baseline_feature_extraction",
    "fine_tuned": "baseline_fine_tuned",
    "backbone": "vgg16_feature_extraction",
    "logistic": "logistic_regression_ensemble",
    "adaboost": "adaboost_ensemble",
}


@dataclass
class PipelineResult:
    run_dir: Path
    reports: list[fairness.EvaluationReport]
    table: fairness.ReportTable


class EnsemblePredictor:
    """Adapts a stacked ensemble plus its base models to manifest prediction."""

    def __init__(self, ensemble: stacking.EnsembleModel,
                 base_models: Sequence[nets.TrainedModel]):
        if len(base_models) != len(ensemble.model_order):
            raise stacking.SchemaError(
                f"ensemble expects {len(ensemble.model_order)} base models, "
                f"got {len(base_models)}"
            )
        self.ensemble = ensemble
        self.base_models = list(base_models)

    def _meta(self, manifest: DatasetManifest):
        side = self.base_models[0].spec.input_side
        images = load_images(manifest.records, side)
        probs = [nets.predict_proba(m, images) for m in self.base_models]
        if self.ensemble.kind == "logistic":
            return stacking.stack_probabilities(
                probs, self.ensemble.model_order, self.ensemble.class_order,
                class_orders=[m.class_order for m in self.base_models],
            )
        preds = [p.argmax(axis=1) for p in probs]
        return stacking.stack_predictions(
            preds, self.ensemble.model_order, self.ensemble.class_order
        )

    def predict(self, manifest: DatasetManifest) -> list[GenderLabel]:
        return stacking.ensemble_predict(self.ensemble, self._meta(manifest))


def plot_learning_curves(history: nets.TrainingHistory,
                         out_path: str | Path) -> tuple[Path, dict]:
    """Accuracy and loss curves (train + validation) versus epoch.

    Returns the written path and the drawn axis ranges, which always cover
    the series' min and max.
    """
    if len(history) == 0:
        raise ValueError("history has no epochs to plot")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(1, len(history) + 1)
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    ax_acc.plot(epochs, history.train_accuracy, label="train")
    ax_acc.plot(epochs, history.val_accuracy, label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    ax_acc.grid(True, alpha=0.3)
    ax_loss.plot(epochs, history.train_loss, label="train")
    ax_loss.plot(epochs, history.val_loss, label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.grid(True, alpha=0.3)
    fig.tight_layout()
    ranges = {"accuracy_ylim": ax_acc.get_ylim(), "loss_ylim": ax_loss.get_ylim()}
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path, ranges


def _stage(name: str, fn: Callable, log: Callable[[str], None]):
    log(f"[stage] {name}")
    start = time.perf_counter()
    try:
        result = fn()
    except Exception as exc:
        raise PipelineError(f"stage {name!r} failed: {exc}") from exc
    log(f"[stage] {name} done in {time.perf_counter() - start:.1f}s")
    return result


def _slug(name: str) -> str:
    return name.replace(" ", "_").lower()


def new_run_dir(output_root: Path) -> Path:
    """Fresh timestamped run directory; never reuses an existing one."""
    output_root.mkdir(parents=True, exist_ok=True)
    while True:
        stamp = time.strftime("%Y%m%d_%H%M%S") + f"_{time.time_ns() % 1_000_000:06d}"
        run_dir = output_root / f"run_{stamp}"
        if not run_dir.exists():
            run_dir.mkdir()
            return run_dir


def run_pipeline(cfg: RunConfig, log: Callable[[str], None] = logger.info) -> PipelineResult:
    """Execute the full experiment described by a RunConfig.

    Stage order: ingest/split, rebalance (augment + oversample the train
    split), 2-class baseline, three 3-class transfer models, two stacked
    ensembles (meta-features from the pre-rebalance train split pooled with
    validation by default), evaluation of all six models on the test split,
    and the summary report with learning-curve plots.
    """
    # Preflight: fail before any work if referenced files are missing.
    if not cfg.manifest.exists():
        raise ConfigError(f"manifest not found: {cfg.manifest}")
    if cfg.backbone_weights is not None and not cfg.backbone_weights.exists():
        raise ConfigError(f"backbone weights not found: {cfg.backbone_weights}")

    run_dir = new_run_dir(cfg.output_root)
    (run_dir / "config.ini").write_text(resolved_config_text(cfg), encoding="utf-8")
    log(f"run directory: {run_dir}")

    def ingest() -> DatasetManifest:
        manifest = load_manifest(cfg.manifest)
        manifest = split_dataset(manifest, cfg.fractions, cfg.split_seed,
                                 identity_disjoint=cfg.identity_disjoint)
        save_manifest(manifest, run_dir / "manifests" / "split.csv")
        return manifest

    manifest = _stage("ingest", ingest, log)
    train_split = manifest.filter(split=Split.TRAIN)
    val_split = manifest.filter(split=Split.VAL)
    test_split = manifest.filter(split=Split.TEST)
    if min(len(train_split), len(val_split), len(test_split)) == 0:
        raise PipelineError("stage 'ingest' failed: a split is empty; adjust fractions")

    def do_rebalance() -> DatasetManifest:
        out = train_split
        if cfg.augment_targets:
            dist = group_distribution(out)
            plan = rebalance.plan_augmentation(dist, out.group_counts(),
                                               cfg.augment_targets)
            rebalance.save_plan(plan, run_dir / "manifests" / "augmentation_plan.txt")
            out = rebalance.apply_augmentation(
                out, plan, cfg.transform, cfg.rebalance_seed,
                run_dir / "augmented",
            )
        if cfg.oversample_class is not None:
            out = rebalance.oversample(out, rebalance.OversamplePlan(
                class_key=cfg.oversample_class,
                target_count=cfg.oversample_target,
                seed=cfg.rebalance_seed,
            ))
        save_manifest(out, run_dir / "manifests" / "train_rebalanced.csv")
        return out

    train_rebalanced = _stage("rebalance", do_rebalance, log)

    binary = (GenderLabel.MALE, GenderLabel.FEMALE)
    histories: dict[str, nets.TrainingHistory] = {}

    def train_baseline() -> nets.TrainedModel:
        spec = nets.build_baseline(cfg.input_side, 2)
        model, history = nets.train(
            spec,
            train_rebalanced.filter(genders=binary),
            val_split.filter(genders=binary),
            cfg.train_configs["baseline"],
        )
        histories["baseline"] = history
        nets.save_model(model, run_dir / "models" / "baseline", history)
        return model

    baseline = _stage("baseline", train_baseline, log)

    def train_transfer(stage: str) -> Callable[[], nets.TrainedModel]:
        def build() -> nets.TrainedModel:
            if stage == "feature_extraction":
                spec = nets.make_feature_extractor(baseline, 3)
                init = baseline
            elif stage == "fine_tuned":
                spec = nets.make_fine_tuned(baseline, 3)
                init = baseline
            else:
                backbone = nets.load_vgg16_backbone(
                    cfg.backbone_weights, cfg.input_side,
                    random_init=cfg.backbone_weights is None,
                    seed=cfg.train_configs["backbone"].seed,
                )
                spec = nets.make_backbone_extractor(backbone, 3)
                init = backbone
            model, history = nets.train(
                spec, train_rebalanced, val_split, cfg.train_configs[stage],
                init_from=init,
            )
            histories[stage] = history
            nets.save_model(model, run_dir / "models" / DISPLAY_NAMES[stage], history)
            return model

        return build

    base_models = {
        stage: _stage(f"transfer:{stage}", train_transfer(stage), log)
        for stage in BASE_MODEL_STAGES
    }

    def fit_ensembles() -> dict[str, stacking.EnsembleModel]:
        # Meta-learners train on pre-rebalance rows: the train split pooled
        # with validation (pool_train_val=false keeps train only).
        rows = DatasetManifest(
            records=list(train_split.records)
            + (list(val_split.records) if cfg.pool_train_val else []),
            name="meta-train",
        )
        images = load_images(rows.records, cfg.input_side)
        labels = [r.gender for r in rows.records]
        order = tuple(DISPLAY_NAMES[s] for s in BASE_MODEL_STAGES)
        models = [base_models[s] for s in BASE_MODEL_STAGES]
        probs = [nets.predict_proba(m, images) for m in models]
        meta_prob = stacking.stack_probabilities(
            probs, order, CLASS_ORDER, class_orders=[m.class_order for m in models]
        )
        meta_pred = stacking.stack_predictions(
            [p.argmax(axis=1) for p in probs], order, CLASS_ORDER
        )
        stacking.save_meta(meta_prob, run_dir / "stacking" / "meta_probabilities.csv")
        stacking.save_meta(meta_pred, run_dir / "stacking" / "meta_predictions.csv")
        logistic = stacking.fit_logistic_ensemble(
            meta_prob, labels, cv_folds=cfg.cv_folds, seed=cfg.stacking_seed
        )
        adaboost = stacking.fit_adaboost_ensemble(
            meta_pred, labels, grid=cfg.adaboost_grid,
            cv_folds=cfg.cv_folds, seed=cfg.stacking_seed,
        )
        stacking.save_ensemble(logistic, run_dir / "models" / DISPLAY_NAMES["logistic"])
        stacking.save_ensemble(adaboost, run_dir / "models" / DISPLAY_NAMES["adaboost"])
        return {"logistic": logistic, "adaboost": adaboost}

    ensembles = _stage("stack", fit_ensembles, log)

    def evaluate_all() -> list[fairness.EvaluationReport]:
        ordered_models = [m for m in base_models.values()]
        predictors: list[tuple[str, object]] = [("baseline", baseline)]
        predictors += [(s, base_models[s]) for s in BASE_MODEL_STAGES]
        predictors += [
            (kind, EnsemblePredictor(ensembles[kind], ordered_models))
            for kind in ("logistic", "adaboost")
        ]
        reports = []
        for stage, predictor in predictors:
            name = DISPLAY_NAMES[stage]
            report = fairness.evaluate(predictor, test_split, name,
                                       group_by=cfg.audit, threshold=cfg.threshold)
            fairness.save_report(report, run_dir / "reports" / f"{_slug(name)}.json")
            fairness.misclassified_grid(
                report, columns=6, out_path=run_dir / "reports" / f"{_slug(name)}_errors.png"
            )
            reports.append(report)
        return reports

    reports = _stage("evaluate", evaluate_all, log)

    def emit_report() -> fairness.ReportTable:
        table = fairness.report_table(reports)
        (run_dir / "report.csv").write_text(table.csv, encoding="utf-8")
        (run_dir / "report.txt").write_text(table.text, encoding="utf-8")
        for stage, history in histories.items():
            plot_learning_curves(
                history, run_dir / "plots" / f"{DISPLAY_NAMES[stage]}_curves.png"
            )
        return table

    table = _stage("report", emit_report, log)
    log("pipeline complete")
    return PipelineResult(run_dir=run_dir, reports=reports, table=table)
