"""Meta-feature construction and the two stacked meta-learners.

Base-model outputs are stacked horizontally: probability matrices side by
side (N x K*C) for the cross-validated logistic regression, hard predictions
(N x K) for the grid-searched AdaBoost over decision stumps. Fitting
canonically sorts training rows first so that jointly permuting (features,
labels) cannot change the learned predictor.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.ensemble import AdaBoostClassifier
from sklearn.linear_model import LogisticRegressionCV
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.tree import DecisionTreeClassifier

from .dataset import GenderLabel


class SchemaError(Exception):
    """Meta-feature shapes or orders do not line up."""


class StackingError(Exception):
    """Ensemble fitting precondition failure."""


PROB_BLOCK_TOLERANCE = 1e-6

DEFAULT_LOGISTIC_CS = np.logspace(-3, 3, 7)
DEFAULT_ADABOOST_GRID = {"n_estimators": [50, 100, 200], "learning_rate": [0.5, 1.0]}


@dataclass
class MetaFeaturesProb:
    """N x (K*C) matrix of horizontally stacked class probabilities."""

    matrix: np.ndarray
    model_order: tuple[str, ...]
    class_order: tuple[GenderLabel, ...]

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.model_order = tuple(self.model_order)
        self.class_order = tuple(self.class_order)
        k, c = len(self.model_order), len(self.class_order)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != k * c:
            raise SchemaError(
                f"probability meta-features must be N x {k}*{c}, got {self.matrix.shape}"
            )
        for j in range(k):
            block = self.matrix[:, j * c: (j + 1) * c]
            if block.size and np.max(np.abs(block.sum(axis=1) - 1.0)) > PROB_BLOCK_TOLERANCE:
                raise SchemaError(
                    f"probability block for model {self.model_order[j]!r} does not row-sum to 1"
                )


@dataclass
class MetaFeaturesPred:
    """N x K matrix of hard class indices, one column per base model."""

    matrix: np.ndarray
    model_order: tuple[str, ...]
    class_order: tuple[GenderLabel, ...]

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        self.model_order = tuple(self.model_order)
        self.class_order = tuple(self.class_order)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.model_order):
            raise SchemaError(
                f"prediction meta-features must be N x {len(self.model_order)}, "
                f"got {self.matrix.shape}"
            )
        c = len(self.class_order)
        if self.matrix.size and (self.matrix.min() < 0 or self.matrix.max() >= c):
            raise SchemaError(f"prediction entries must lie in [0, {c})")


@dataclass
class EnsembleModel:
    kind: str  # logistic | adaboost
    estimator: object
    model_order: tuple[str, ...]
    class_order: tuple[GenderLabel, ...]
    cv_report: dict = field(default_factory=dict)
    encoding: str = "onehot"  # adaboost only: onehot | raw


def stack_probabilities(
    outputs: Sequence[np.ndarray],
    model_order: Sequence[str],
    class_order: Sequence[GenderLabel],
    class_orders: Sequence[Sequence[GenderLabel]] | None = None,
) -> MetaFeaturesProb:
    """Concatenate K probability matrices (each N x C) column-wise; column
    j*C+c of the result is column c of model j."""
    if len(outputs) != len(model_order):
        raise SchemaError(f"{len(outputs)} matrices but {len(model_order)} model ids")
    if not outputs:
        raise SchemaError("need at least one base-model output")
    if class_orders is not None:
        for mid, order in zip(model_order, class_orders):
            if tuple(order) != tuple(class_order):
                raise SchemaError(
                    f"model {mid!r} class order {[str(c) for c in order]} does not match "
                    f"{[str(c) for c in class_order]}"
                )
    c = len(class_order)
    n = outputs[0].shape[0] if outputs[0].ndim == 2 else -1
    for mid, out in zip(model_order, outputs):
        if out.ndim != 2 or out.shape != (n, c):
            raise SchemaError(
                f"model {mid!r} output has shape {tuple(out.shape)}, expected ({n}, {c})"
            )
    return MetaFeaturesProb(
        matrix=np.concatenate([np.asarray(o, dtype=float) for o in outputs], axis=1),
        model_order=tuple(model_order),
        class_order=tuple(class_order),
    )


def stack_predictions(
    outputs: Sequence[np.ndarray],
    model_order: Sequence[str],
    class_order: Sequence[GenderLabel],
) -> MetaFeaturesPred:
    """Stack K hard-prediction vectors (each length N) into an N x K matrix."""
    if len(outputs) != len(model_order):
        raise SchemaError(f"{len(outputs)} vectors but {len(model_order)} model ids")
    if not outputs:
        raise SchemaError("need at least one base-model output")
    n = len(outputs[0])
    for mid, out in zip(model_order, outputs):
        arr = np.asarray(out)
        if arr.ndim != 1 or len(arr) != n:
            raise SchemaError(
                f"model {mid!r} predictions have length {len(arr)}, expected {n}"
            )
    return MetaFeaturesPred(
        matrix=np.stack([np.asarray(o, dtype=np.int64) for o in outputs], axis=1),
        model_order=tuple(model_order),
        class_order=tuple(class_order),
    )


def _encode_truths(labels: Sequence[GenderLabel | int],
                   class_order: Sequence[GenderLabel]) -> np.ndarray:
    index = {label: i for i, label in enumerate(class_order)}
    out = []
    for lab in labels:
        if isinstance(lab, GenderLabel):
            if lab not in index:
                raise StackingError(f"label {lab.value!r} not in class order")
            out.append(index[lab])
        else:
            out.append(int(lab))
    return np.asarray(out, dtype=np.int64)


def _canonical_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row order independent of the input permutation (labels least significant)."""
    keys = (labels,) + tuple(features.T[::-1])
    return np.lexsort(keys)


def _check_fit_inputs(features: np.ndarray, labels: np.ndarray, cv_folds: int) -> None:
    if cv_folds < 2:
        raise StackingError(f"cv_folds must be >= 2, got {cv_folds}")
    if len(labels) < cv_folds:
        raise StackingError(f"need at least cv_folds={cv_folds} rows, got {len(labels)}")
    if features.shape[0] != len(labels):
        raise StackingError(
            f"{features.shape[0]} feature rows vs {len(labels)} labels"
        )
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise StackingError("labels contain a single class; nothing to learn")
    if counts.min() < cv_folds:
        raise StackingError(
            f"smallest class has {counts.min()} rows; stratified CV needs >= {cv_folds}"
        )
    if not np.all(np.isfinite(features)):
        raise StackingError("meta-features contain non-finite values")


def fit_logistic_ensemble(
    meta: MetaFeaturesProb,
    labels: Sequence[GenderLabel | int],
    cv_folds: int = 5,
    seed: int = 0,
    Cs: Sequence[float] | None = None,
) -> EnsembleModel:
    """Multinomial logistic regression over stacked probabilities, with the
    regularization strength chosen by stratified cross-validation."""
    y = _encode_truths(labels, meta.class_order)
    _check_fit_inputs(meta.matrix, y, cv_folds)
    order = _canonical_order(meta.matrix, y)
    X, y = meta.matrix[order], y[order]
    est = LogisticRegressionCV(
        Cs=np.asarray(Cs if Cs is not None else DEFAULT_LOGISTIC_CS, dtype=float),
        cv=StratifiedKFold(n_splits=cv_folds, shuffle=True, random_state=seed),
        max_iter=2000,
    )
    est.fit(X, y)
    report = {
        "chosen_C": float(np.atleast_1d(est.C_)[0]),
        "training_accuracy": float(est.score(X, y)),
        "cv_folds": cv_folds,
    }
    return EnsembleModel(
        kind="logistic", estimator=est,
        model_order=meta.model_order, class_order=meta.class_order,
        cv_report=report,
    )


def _encode_pred_features(matrix: np.ndarray, n_classes: int, encoding: str) -> np.ndarray:
    if encoding == "raw":
        return matrix.astype(float)
    return np.eye(n_classes)[matrix].reshape(matrix.shape[0], -1)


def fit_adaboost_ensemble(
    meta: MetaFeaturesPred,
    labels: Sequence[GenderLabel | int],
    grid: dict[str, list] | None = None,
    cv_folds: int = 5,
    seed: int = 0,
    strict_raw_indices: bool = False,
) -> EnsembleModel:
    """Boosted decision stumps over stacked hard predictions, hyperparameters
    chosen by stratified grid search.

    Prediction columns are one-hot encoded by default; strict_raw_indices
    keeps the raw class-index columns for strict replication of ordinal
    encoding.
    """
    grid = dict(grid) if grid is not None else dict(DEFAULT_ADABOOST_GRID)
    if not grid or any(not v for v in grid.values()):
        raise StackingError(f"hyperparameter grid must be nonempty, got {grid!r}")
    y = _encode_truths(labels, meta.class_order)
    encoding = "raw" if strict_raw_indices else "onehot"
    X = _encode_pred_features(meta.matrix, len(meta.class_order), encoding)
    _check_fit_inputs(X, y, cv_folds)
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    base = AdaBoostClassifier(
        estimator=DecisionTreeClassifier(max_depth=1, random_state=seed),
        random_state=seed,
    )
    search = GridSearchCV(
        base, param_grid=grid,
        cv=StratifiedKFold(n_splits=cv_folds, shuffle=True, random_state=seed),
    )
    search.fit(X, y)
    report = {
        "chosen": dict(search.best_params_),
        "training_accuracy": float(search.best_estimator_.score(X, y)),
        "cv_folds": cv_folds,
        "grid": {k: list(v) for k, v in grid.items()},
    }
    return EnsembleModel(
        kind="adaboost", estimator=search.best_estimator_,
        model_order=meta.model_order, class_order=meta.class_order,
        cv_report=report, encoding=encoding,
    )


def ensemble_predict(
    model: EnsembleModel,
    meta: MetaFeaturesProb | MetaFeaturesPred,
) -> list[GenderLabel]:
    """Apply a fitted ensemble row-wise; returns one label per meta-feature row."""
    expected_type = MetaFeaturesProb if model.kind == "logistic" else MetaFeaturesPred
    if not isinstance(meta, expected_type):
        raise SchemaError(
            f"{model.kind} ensemble expects {expected_type.__name__}, got {type(meta).__name__}"
        )
    if meta.model_order != model.model_order or meta.class_order != model.class_order:
        raise SchemaError(
            f"meta-feature schema mismatch: expected model_order={list(model.model_order)} "
            f"class_order={[str(c) for c in model.class_order]}, got "
            f"model_order={list(meta.model_order)} class_order={[str(c) for c in meta.class_order]}"
        )
    if meta.matrix.shape[0] == 0:
        return []
    if model.kind == "logistic":
        X = meta.matrix
    else:
        X = _encode_pred_features(meta.matrix, len(model.class_order), model.encoding)
    return [model.class_order[int(i)] for i in model.estimator.predict(X)]


def save_ensemble(model: EnsembleModel, bundle_dir: str | Path) -> Path:
    """Write ensemble.json (kind, schema, hyperparameters) plus params.bin."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": 1,
        "kind": model.kind,
        "model_order": list(model.model_order),
        "class_order": [c.value for c in model.class_order],
        "cv_report": model.cv_report,
        "encoding": model.encoding,
    }
    (bundle_dir / "ensemble.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    with (bundle_dir / "params.bin").open("wb") as fh:
        pickle.dump(model.estimator, fh)
    return bundle_dir


def load_ensemble(bundle_dir: str | Path) -> EnsembleModel:
    bundle_dir = Path(bundle_dir)
    meta = json.loads((bundle_dir / "ensemble.json").read_text(encoding="utf-8"))
    if meta.get("schema_version") != 1:
        raise SchemaError(f"unsupported ensemble schema version {meta.get('schema_version')!r}")
    with (bundle_dir / "params.bin").open("rb") as fh:
        estimator = pickle.load(fh)
    return EnsembleModel(
        kind=meta["kind"], estimator=estimator,
        model_order=tuple(meta["model_order"]),
        class_order=tuple(GenderLabel(v) for v in meta["class_order"]),
        cv_report=meta.get("cv_report", {}),
        encoding=meta.get("encoding", "onehot"),
    )


def save_meta(meta: MetaFeaturesProb | MetaFeaturesPred, path: str | Path) -> Path:
    """Export meta-features as delimited text with a schema-identifying header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "prob" if isinstance(meta, MetaFeaturesProb) else "pred"
    lines = [
        f"# kind={kind}",
        f"# model_order={','.join(meta.model_order)}",
        f"# class_order={','.join(c.value for c in meta.class_order)}",
    ]
    if kind == "prob":
        header = [f"{m}:{c.value}" for m in meta.model_order for c in meta.class_order]
        body = [",".join(f"{v:.10g}" for v in row) for row in meta.matrix]
    else:
        header = list(meta.model_order)
        body = [",".join(str(int(v)) for v in row) for row in meta.matrix]
    lines.append(",".join(header))
    lines.extend(body)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_meta(path: str | Path) -> MetaFeaturesProb | MetaFeaturesPred:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    fields = {}
    data_lines = []
    for line in text:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            fields[key.strip()] = value.strip()
        elif line.strip():
            data_lines.append(line)
    try:
        kind = fields["kind"]
        model_order = tuple(fields["model_order"].split(","))
        class_order = tuple(GenderLabel(v) for v in fields["class_order"].split(","))
    except KeyError as exc:
        raise SchemaError(f"meta-feature file missing header field {exc}") from None
    rows = [line.split(",") for line in data_lines[1:]]  # first data line is the column header
    if kind == "prob":
        matrix = np.asarray([[float(v) for v in row] for row in rows], dtype=float)
        if matrix.size == 0:
            matrix = matrix.reshape(0, len(model_order) * len(class_order))
        return MetaFeaturesProb(matrix=matrix, model_order=model_order, class_order=class_order)
    matrix = np.asarray([[int(v) for v in row] for row in rows], dtype=np.int64)
    if matrix.size == 0:
        matrix = matrix.reshape(0, len(model_order))
    return MetaFeaturesPred(matrix=matrix, model_order=model_order, class_order=class_order)
