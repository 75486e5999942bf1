"""Declarative run configuration for the pipeline CLI.

The config file is INI-style key-value text with sections. Every key has a
default except paths.manifest; unknown sections or keys are rejected before
any stage runs.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import GenderLabel, GroupKey
from .nets import TrainingConfig
from .rebalance import TransformParams

OUTPUT_ROOT_ENV = "FAIRVISION_OUTPUT_ROOT"

TRAIN_STAGES = ("baseline", "feature_extraction", "fine_tuned", "backbone")


class ConfigError(Exception):
    """Config file is missing, malformed, or contains unknown keys."""


_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "optimizer",
               "early_stop_patience", "seed"}

_KNOWN_KEYS: dict[str, set[str]] = {
    "paths": {"manifest", "output_root", "backbone_weights"},
    "dataset": {"input_side", "train_fraction", "val_fraction", "test_fraction",
                "identity_disjoint", "seed"},
    "rebalance": {"augment_targets", "rotation_range", "width_shift", "height_shift",
                  "zoom_range", "horizontal_flip", "fill_mode",
                  "oversample_class", "oversample_target", "seed"},
    "stacking": {"cv_folds", "pool_train_val", "adaboost_n_estimators",
                 "adaboost_learning_rates", "seed"},
    "fairness": {"threshold", "audit"},
    **{f"train.{stage}": _TRAIN_KEYS for stage in TRAIN_STAGES},
}


@dataclass
class RunConfig:
    manifest: Path
    output_root: Path
    backbone_weights: Path | None = None
    input_side: int = 64
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    identity_disjoint: bool = True
    split_seed: int = 7
    augment_targets: dict[GroupKey, float] = field(default_factory=dict)
    transform: TransformParams = field(default_factory=TransformParams)
    oversample_class: GenderLabel | GroupKey | None = None
    oversample_target: int | None = None
    rebalance_seed: int = 0
    train_configs: dict[str, TrainingConfig] = field(default_factory=dict)
    cv_folds: int = 5
    pool_train_val: bool = True
    adaboost_grid: dict[str, list] = field(default_factory=lambda: {
        "n_estimators": [50, 100, 200], "learning_rate": [0.5, 1.0]})
    stacking_seed: int = 0
    threshold: float = 0.8
    audit: str = "gender"

    def __post_init__(self) -> None:
        for stage in TRAIN_STAGES:
            self.train_configs.setdefault(stage, TrainingConfig())
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")
        if self.audit not in ("gender", "gender_tone"):
            raise ConfigError(f"fairness audit must be gender or gender_tone, got {self.audit!r}")
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"fairness threshold must be in (0, 1], got {self.threshold}")
        if (self.oversample_class is None) != (self.oversample_target is None):
            raise ConfigError("oversample_class and oversample_target must be set together")

    def override_seed(self, seed: int) -> None:
        """Replace every configured seed (the CLI --seed flag)."""
        self.split_seed = seed
        self.rebalance_seed = seed
        self.stacking_seed = seed
        for stage, cfg in self.train_configs.items():
            self.train_configs[stage] = TrainingConfig(
                epochs=cfg.epochs, batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate, optimizer=cfg.optimizer,
                seed=seed, early_stop_patience=cfg.early_stop_patience,
            )


def _get(parser: configparser.ConfigParser, section: str, key: str,
         default: str | None = None) -> str | None:
    if parser.has_option(section, key):
        value = parser.get(section, key).strip()
        return value if value else default
    return default


def _get_bool(parser, section, key, default: bool) -> bool:
    raw = _get(parser, section, key)
    if raw is None:
        return default
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")


def _get_number(parser, section, key, default, cast):
    raw = _get(parser, section, key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _parse_targets(raw: str | None) -> dict[GroupKey, float]:
    targets: dict[GroupKey, float] = {}
    if not raw:
        return targets
    for token in raw.replace(",", " ").split():
        key, _, value = token.partition("=")
        try:
            targets[GroupKey.parse(key)] = float(value)
        except (ValueError, KeyError):
            raise ConfigError(
                f"bad augment target {token!r}; expected gender.tone=fraction"
            ) from None
    return targets


def _parse_class_key(raw: str | None) -> GenderLabel | GroupKey | None:
    if raw is None:
        return None
    try:
        return GroupKey.parse(raw) if "." in raw else GenderLabel(raw)
    except ValueError:
        raise ConfigError(f"bad oversample class {raw!r}") from None


def _parse_train_section(parser, section: str) -> TrainingConfig:
    patience_raw = _get(parser, section, "early_stop_patience")
    patience: int | None
    if patience_raw is None:
        patience = 5
    elif patience_raw.lower() == "none":
        patience = None
    else:
        patience = int(patience_raw)
    return TrainingConfig(
        epochs=_get_number(parser, section, "epochs", 50, int),
        batch_size=_get_number(parser, section, "batch_size", 32, int),
        learning_rate=_get_number(parser, section, "learning_rate", 1e-4, float),
        optimizer=_get(parser, section, "optimizer", "adam"),
        seed=_get_number(parser, section, "seed", 0, int),
        early_stop_patience=patience,
    )


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def parse_config(path: str | Path) -> RunConfig:
    """Read and fully validate a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser.options(section)) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(
                f"unknown keys in [{section}]: {', '.join(sorted(unknown))}"
            )

    manifest = _get(parser, "paths", "manifest") if parser.has_section("paths") else None
    if manifest is None:
        raise ConfigError("config must set [paths] manifest")
    output_root = _get(parser, "paths", "output_root")
    backbone = _get(parser, "paths", "backbone_weights")

    transform = TransformParams(
        rotation_range=_get_number(parser, "rebalance", "rotation_range", 20.0, float),
        width_shift=_get_number(parser, "rebalance", "width_shift", 0.1, float),
        height_shift=_get_number(parser, "rebalance", "height_shift", 0.1, float),
        zoom_range=_get_number(parser, "rebalance", "zoom_range", 0.1, float),
        horizontal_flip=_get_bool(parser, "rebalance", "horizontal_flip", True),
        fill_mode=_get(parser, "rebalance", "fill_mode", "nearest"),
    )

    grid = {
        "n_estimators": [
            int(v) for v in (_get(parser, "stacking", "adaboost_n_estimators",
                                   "50 100 200")).split()
        ],
        "learning_rate": [
            float(v) for v in (_get(parser, "stacking", "adaboost_learning_rates",
                                    "0.5 1.0")).split()
        ],
    }

    return RunConfig(
        manifest=Path(manifest),
        output_root=Path(output_root) if output_root else default_output_root(),
        backbone_weights=Path(backbone) if backbone else None,
        input_side=_get_number(parser, "dataset", "input_side", 64, int),
        fractions=(
            _get_number(parser, "dataset", "train_fraction", 0.7, float),
            _get_number(parser, "dataset", "val_fraction", 0.15, float),
            _get_number(parser, "dataset", "test_fraction", 0.15, float),
        ),
        identity_disjoint=_get_bool(parser, "dataset", "identity_disjoint", True),
        split_seed=_get_number(parser, "dataset", "seed", 7, int),
        augment_targets=_parse_targets(_get(parser, "rebalance", "augment_targets")),
        transform=transform,
        oversample_class=_parse_class_key(_get(parser, "rebalance", "oversample_class")),
        oversample_target=_get_number(parser, "rebalance", "oversample_target", None,
                                      int) if _get(parser, "rebalance", "oversample_target") else None,
        rebalance_seed=_get_number(parser, "rebalance", "seed", 0, int),
        train_configs={
            stage: _parse_train_section(parser, f"train.{stage}")
            for stage in TRAIN_STAGES
        },
        cv_folds=_get_number(parser, "stacking", "cv_folds", 5, int),
        pool_train_val=_get_bool(parser, "stacking", "pool_train_val", True),
        adaboost_grid=grid,
        stacking_seed=_get_number(parser, "stacking", "seed", 0, int),
        threshold=_get_number(parser, "fairness", "threshold", 0.8, float),
        audit=_get(parser, "fairness", "audit", "gender"),
    )


def resolved_config_text(cfg: RunConfig) -> str:
    """Serialize the fully resolved configuration (written into each run dir)."""
    lines = [
        "[paths]",
        f"manifest = {cfg.manifest}",
        f"output_root = {cfg.output_root}",
        f"backbone_weights = {cfg.backbone_weights or ''}",
        "",
        "[dataset]",
        f"input_side = {cfg.input_side}",
        f"train_fraction = {cfg.fractions[0]}",
        f"val_fraction = {cfg.fractions[1]}",
        f"test_fraction = {cfg.fractions[2]}",
        f"identity_disjoint = {str(cfg.identity_disjoint).lower()}",
        f"seed = {cfg.split_seed}",
        "",
        "[rebalance]",
        "augment_targets = " + " ".join(
            f"{k}={v}" for k, v in sorted(cfg.augment_targets.items(), key=lambda kv: str(kv[0]))
        ),
        f"rotation_range = {cfg.transform.rotation_range}",
        f"width_shift = {cfg.transform.width_shift}",
        f"height_shift = {cfg.transform.height_shift}",
        f"zoom_range = {cfg.transform.zoom_range}",
        f"horizontal_flip = {str(cfg.transform.horizontal_flip).lower()}",
        f"fill_mode = {cfg.transform.fill_mode}",
        f"oversample_class = {cfg.oversample_class or ''}",
        f"oversample_target = {cfg.oversample_target if cfg.oversample_target is not None else ''}",
        f"seed = {cfg.rebalance_seed}",
    ]
    for stage in TRAIN_STAGES:
        tc = cfg.train_configs[stage]
        lines += [
            "",
            f"[train.{stage}]",
            f"epochs = {tc.epochs}",
            f"batch_size = {tc.batch_size}",
            f"learning_rate = {tc.learning_rate}",
            f"optimizer = {tc.optimizer}",
            f"early_stop_patience = {tc.early_stop_patience if tc.early_stop_patience is not None else 'none'}",
            f"seed = {tc.seed}",
        ]
    lines += [
        "",
        "[stacking]",
        f"cv_folds = {cfg.cv_folds}",
        f"pool_train_val = {str(cfg.pool_train_val).lower()}",
        "adaboost_n_estimators = " + " ".join(str(v) for v in cfg.adaboost_grid["n_estimators"]),
        "adaboost_learning_rates = " + " ".join(str(v) for v in cfg.adaboost_grid["learning_rate"]),
        f"seed = {cfg.stacking_seed}",
        "",
        "[fairness]",
        f"threshold = {cfg.threshold}",
        f"audit = {cfg.audit}",
        "",
    ]
    return "\n".join(lines)
