"""Command-line interface.

Commands: ingest, rebalance, train, transfer, stack, evaluate, report, plot,
pipeline. Shared flags: --config (run configuration file), --seed (overrides
every configured seed), --out (output directory; defaults under the output
root, which the FAIRVISION_OUTPUT_ROOT environment variable controls).

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import fairness, nets, rebalance, stacking
from .config import (
    ConfigError,
    RunConfig,
    default_output_root,
    parse_config,
)
from .dataset import (
    CLASS_ORDER,
    DatasetError,
    DatasetManifest,
    GenderLabel,
    Split,
    group_distribution,
    load_images,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .pipeline import (
    DISPLAY_NAMES,
    EnsemblePredictor,
    PipelineError,
    plot_learning_curves,
    run_pipeline,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ConfigError,
    DatasetError,
    rebalance.RebalanceError,
    nets.ArchitectureError,
    nets.PredictionError,
    stacking.SchemaError,
    stacking.StackingError,
    fairness.FairnessError,
    FileNotFoundError,
)


def _require_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.override_seed(args.seed)
    if args.out:
        cfg.output_root = Path(args.out)
    return cfg


def _out_dir(args, cfg: RunConfig | None, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = cfg.output_root if cfg else default_output_root()
        out = root / f"{command}_{time.strftime('%Y%m%d_%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_if_needed(manifest: DatasetManifest, cfg: RunConfig) -> DatasetManifest:
    if any(r.split is Split.UNASSIGNED for r in manifest.records):
        return split_dataset(manifest, cfg.fractions, cfg.split_seed,
                             identity_disjoint=cfg.identity_disjoint)
    return manifest


def cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    print(f"manifest: {args.manifest}")
    print(f"records: {len(manifest)}")
    if len(manifest) == 0:
        return EXIT_OK
    dist = group_distribution(manifest)
    width = max(len(str(k)) for k in dist)
    counts = manifest.group_counts()
    print(f"{'group'.ljust(width)}  count  proportion")
    for key, frac in dist.items():
        print(f"{str(key).ljust(width)}  {counts[key]:5d}  {fairness.render_percent(frac)}%")
    return EXIT_OK


def cmd_rebalance(args) -> int:
    cfg = _require_config(args)
    if not cfg.augment_targets and cfg.oversample_class is None:
        raise ConfigError(
            "config declares no rebalance work: set [rebalance] augment_targets "
            "and/or oversample_class/oversample_target"
        )
    manifest = load_manifest(cfg.manifest)
    out = _out_dir(args, cfg, "rebalance")
    result = manifest
    if cfg.augment_targets:
        plan = rebalance.plan_augmentation(
            group_distribution(result), result.group_counts(), cfg.augment_targets
        )
        rebalance.save_plan(plan, out / "augmentation_plan.txt")
        result = rebalance.apply_augmentation(
            result, plan, cfg.transform, cfg.rebalance_seed, out / "augmented"
        )
        print(f"augmented: +{plan.total_copies()} images")
    if cfg.oversample_class is not None:
        result = rebalance.oversample(result, rebalance.OversamplePlan(
            class_key=cfg.oversample_class, target_count=cfg.oversample_target,
            seed=cfg.rebalance_seed,
        ))
        print(f"oversampled {cfg.oversample_class} to {cfg.oversample_target}")
    path = save_manifest(result, out / "manifest.csv")
    print(f"rebalanced manifest: {path} ({len(result)} records)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _require_config(args)
    manifest = _split_if_needed(load_manifest(cfg.manifest), cfg)
    n_classes = args.classes
    genders = CLASS_ORDER[:n_classes]
    spec = nets.build_baseline(cfg.input_side, n_classes)
    model, history = nets.train(
        spec,
        manifest.filter(split=Split.TRAIN, genders=genders),
        manifest.filter(split=Split.VAL, genders=genders),
        cfg.train_configs["baseline"],
    )
    out = _out_dir(args, cfg, "train")
    nets.save_model(model, out, history)
    print(f"model bundle: {out}")
    print(f"epochs: {len(history)}  final val accuracy: {history.val_accuracy[-1]:.4f}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _require_config(args)
    manifest = _split_if_needed(load_manifest(cfg.manifest), cfg)
    if args.kind == "backbone":
        base = nets.load_vgg16_backbone(
            cfg.backbone_weights, cfg.input_side,
            random_init=cfg.backbone_weights is None,
            seed=cfg.train_configs["backbone"].seed,
        )
        spec = nets.make_backbone_extractor(base, args.classes)
    else:
        if not args.base:
            raise ConfigError("--base (baseline model bundle) is required for this kind")
        base = nets.load_model(args.base)
        if args.kind == "feature_extraction":
            spec = nets.make_feature_extractor(base, args.classes)
        else:
            spec = nets.make_fine_tuned(base, args.classes)
    stage = args.kind if args.kind in cfg.train_configs else "baseline"
    model, history = nets.train(
        spec,
        manifest.filter(split=Split.TRAIN),
        manifest.filter(split=Split.VAL),
        cfg.train_configs[stage],
        init_from=base,
    )
    out = _out_dir(args, cfg, f"transfer_{args.kind}")
    nets.save_model(model, out, history)
    print(f"model bundle: {out}")
    print(f"epochs: {len(history)}  final val accuracy: {history.val_accuracy[-1]:.4f}")
    return EXIT_OK


def _stacking_rows(manifest: DatasetManifest, cfg: RunConfig) -> DatasetManifest:
    rows = list(manifest.filter(split=Split.TRAIN).records)
    if cfg.pool_train_val:
        rows += list(manifest.filter(split=Split.VAL).records)
    return DatasetManifest(records=rows, name="meta-train")


def cmd_stack(args) -> int:
    cfg = _require_config(args)
    bundles = [Path(p) for p in args.models.split(",")]
    models = [nets.load_model(b) for b in bundles]
    manifest = _split_if_needed(load_manifest(cfg.manifest), cfg)
    rows = _stacking_rows(manifest, cfg)
    images = load_images(rows.records, models[0].spec.input_side)
    labels = [r.gender for r in rows.records]
    order = tuple(b.name for b in bundles)
    probs = [nets.predict_proba(m, images) for m in models]
    if args.kind == "logistic":
        meta = stacking.stack_probabilities(
            probs, order, CLASS_ORDER, class_orders=[m.class_order for m in models]
        )
        ensemble = stacking.fit_logistic_ensemble(
            meta, labels, cv_folds=cfg.cv_folds, seed=cfg.stacking_seed
        )
    else:
        meta = stacking.stack_predictions(
            [p.argmax(axis=1) for p in probs], order, CLASS_ORDER
        )
        ensemble = stacking.fit_adaboost_ensemble(
            meta, labels, grid=cfg.adaboost_grid,
            cv_folds=cfg.cv_folds, seed=cfg.stacking_seed,
        )
    out = _out_dir(args, cfg, f"stack_{args.kind}")
    stacking.save_ensemble(ensemble, out)
    stacking.save_meta(meta, out / "meta_train.csv")
    print(f"ensemble bundle: {out}")
    print(f"cv report: {ensemble.cv_report}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = parse_config(args.config) if args.config else None
    threshold = cfg.threshold if cfg else 0.8
    audit = cfg.audit if cfg else "gender"
    model_dir = Path(args.model)
    manifest = load_manifest(args.manifest)
    name = args.name or model_dir.name
    if (model_dir / "ensemble.json").exists():
        if not args.base_models:
            raise ConfigError("--base-models is required to evaluate an ensemble bundle")
        ensemble = stacking.load_ensemble(model_dir)
        bases = [nets.load_model(p) for p in args.base_models.split(",")]
        predictor = EnsemblePredictor(ensemble, bases)
    else:
        predictor = nets.load_model(model_dir)
    report = fairness.evaluate(predictor, manifest, name,
                               group_by=audit, threshold=threshold)
    out = _out_dir(args, cfg, "evaluate")
    fairness.save_report(report, out / f"{name}.json")
    fairness.misclassified_grid(report, columns=6, out_path=out / f"{name}_errors.png")
    table = fairness.report_table([report])
    print(table.text, end="")
    print(f"report: {out / (name + '.json')}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [fairness.load_report(p) for p in args.reports]
    table = fairness.report_table(reports)
    out = _out_dir(args, None, "report")
    (out / "report.csv").write_text(table.csv, encoding="utf-8")
    (out / "report.txt").write_text(table.text, encoding="utf-8")
    print(table.text, end="")
    print(f"written: {out / 'report.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out_file = Path(args.out) if args.out else Path(args.input).with_suffix(".png")
    if args.kind == "curves":
        history = nets.TrainingHistory.load_csv(args.input)
        path, _ = plot_learning_curves(history, out_file)
    else:
        report = fairness.load_report(args.input)
        path = fairness.misclassified_grid(report, columns=args.columns,
                                           out_path=out_file)
        if path is None:
            print("no misclassified images; nothing to plot")
            return EXIT_OK
    print(f"plot: {path}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _require_config(args)
    result = run_pipeline(cfg, log=print)
    print()
    print(result.table.text, end="")
    print(f"run directory: {result.run_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI)")
    common.add_argument("--seed", type=int, help="override every configured seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="fairvision",
        description="Train gender classifiers, extend them with transfer learning "
                    "and stacked ensembles, and audit group accuracy disparity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="validate a manifest and print its group distribution")
    p.add_argument("manifest")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("rebalance", parents=[common],
                       help="augment/oversample a manifest toward target proportions")
    p.set_defaults(fn=cmd_rebalance)

    p = sub.add_parser("train", parents=[common], help="train the baseline CNN")
    p.add_argument("--classes", type=int, default=2, choices=(2, 3))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("transfer", parents=[common],
                       help="train a transfer-learning derivative")
    p.add_argument("--kind", required=True,
                   choices=("feature_extraction", "fine_tuned", "backbone"))
    p.add_argument("--base", help="baseline model bundle directory")
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("stack", parents=[common], help="fit a stacked ensemble")
    p.add_argument("--kind", required=True, choices=("logistic", "adaboost"))
    p.add_argument("--models", required=True,
                   help="comma-separated base model bundle directories")
    p.set_defaults(fn=cmd_stack)

    p = sub.add_parser("evaluate", parents=[common],
                       help="audit a model bundle on a test manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--name")
    p.add_argument("--base-models", dest="base_models",
                   help="comma-separated base bundles (ensemble evaluation)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", parents=[common],
                       help="merge evaluation reports into a summary table")
    p.add_argument("reports", nargs="+")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("plot", parents=[common],
                       help="render learning curves or a misclassification grid")
    p.add_argument("--kind", required=True, choices=("curves", "grid"))
    p.add_argument("--columns", type=int, default=6)
    p.add_argument("input")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run the full experiment from one config file")
    p.set_defaults(fn=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PipelineError, nets.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - unexpected failure path
        logger.exception("unexpected failure")
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
