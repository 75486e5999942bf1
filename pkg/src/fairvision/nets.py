"""CNN architectures, training, and transfer-learning builders.

Architectures are declarative (:class:`ArchitectureSpec`, a flat layer list)
and compiled to torch modules by :func:`build_module`. The softmax layer is
declared in every spec but applied at prediction time; training consumes
logits through the numerically stable cross-entropy.

Pooling uses ceil-mode windows (3x3 stride 2 after the first two convs, 2x2
stride 2 after the rest); when the incoming spatial side is smaller than the
window, the window is clamped to the side so small desk-scale inputs remain
valid. No clamping occurs at the 227-pixel reference size.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import (
    CLASS_ORDER,
    DatasetManifest,
    GenderLabel,
    load_images,
)


class ArchitectureError(Exception):
    """Invalid or structurally unexpected architecture."""


class TrainingError(Exception):
    """Training precondition or runtime failure."""


class PredictionError(Exception):
    """Inference input does not match the model."""


MIN_INPUT_SIDE = 32
SCHEMA_VERSION = 1

BASELINE_FILTERS = (96, 96, 256, 256, 384, 384)
BASELINE_KERNELS = (7, 7, 5, 5, 3, 3)
FINETUNE_FILTERS = (64, 64, 128, 128)
DEFAULT_DROPOUT = 0.25

LAYER_KINDS = ("conv", "relu", "maxpool", "batchnorm", "dropout", "flatten",
               "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int | None = None
    units: int | None = None
    rate: float | None = None
    stride: int | None = None
    padding: int | None = None
    ceil_mode: bool = False
    frozen: bool = False

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters is None or self.kernel is None):
            raise ArchitectureError("conv layer requires filters and kernel")
        if self.kind == "dense" and self.units is None:
            raise ArchitectureError("dense layer requires units")
        if self.kind == "dropout" and not (self.rate and 0 < self.rate < 1):
            raise ArchitectureError(f"dropout requires rate in (0,1), got {self.rate}")
        if self.kind == "maxpool" and self.kernel is None:
            raise ArchitectureError("maxpool layer requires kernel")


@dataclass
class ArchitectureSpec:
    input_side: int
    channels: int
    layers: list[LayerSpec]
    n_classes: int
    inherited_layers: int = 0  # leading layers whose weights come from a base model

    def __post_init__(self) -> None:
        if len(self.layers) < 2:
            raise ArchitectureError("architecture needs at least a head")
        tail = self.layers[-2:]
        if tail[0].kind != "dense" or tail[0].units != self.n_classes:
            raise ArchitectureError(
                f"second-to-last layer must be dense({self.n_classes}), got {tail[0]}"
            )
        if tail[1].kind != "softmax":
            raise ArchitectureError(f"last layer must be softmax, got {tail[1]}")

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "input_side": self.input_side,
            "channels": self.channels,
            "n_classes": self.n_classes,
            "inherited_layers": self.inherited_layers,
            "layers": [
                {k: v for k, v in asdict(l).items()
                 if v is not None and not (k in ("ceil_mode", "frozen") and v is False)}
                for l in self.layers
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ArchitectureError(f"unsupported architecture schema version {version!r}")
        return cls(
            input_side=payload["input_side"],
            channels=payload["channels"],
            layers=[LayerSpec(**entry) for entry in payload["layers"]],
            n_classes=payload["n_classes"],
            inherited_layers=payload.get("inherited_layers", 0),
        )


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"  # adam | sgd_momentum
    seed: int = 0
    early_stop_patience: int | None = 5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise TrainingError(f"optimizer must be adam or sgd_momentum, got {self.optimizer!r}")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for i in range(len(self)):
                writer.writerow([
                    i + 1,
                    f"{self.train_loss[i]:.6f}", f"{self.train_accuracy[i]:.6f}",
                    f"{self.val_loss[i]:.6f}", f"{self.val_accuracy[i]:.6f}",
                ])
        return path

    @classmethod
    def load_csv(cls, path: str | Path) -> "TrainingHistory":
        hist = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            expected = {"epoch", "train_loss", "train_acc", "val_loss", "val_acc"}
            if reader.fieldnames is None or set(reader.fieldnames) != expected:
                raise TrainingError(f"bad history header in {path}: {reader.fieldnames}")
            for row in reader:
                hist.train_loss.append(float(row["train_loss"]))
                hist.train_accuracy.append(float(row["train_acc"]))
                hist.val_loss.append(float(row["val_loss"]))
                hist.val_accuracy.append(float(row["val_acc"]))
        return hist


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    module: nn.Module
    class_order: tuple[GenderLabel, ...]

    def predict(self, manifest: DatasetManifest) -> list[GenderLabel]:
        """Predict one gender label per manifest record."""
        if not self.class_order:
            raise PredictionError("model has no gender class order (backbone-only model)")
        images = load_images(manifest.records, self.spec.input_side)
        probs = predict_proba(self, images)
        return [self.class_order[i] for i in probs.argmax(axis=1)]


def _pool_out(size: int, kernel: int, stride: int, ceil: bool) -> int:
    if ceil:
        out = (size - kernel + stride - 1) // stride + 1
        if (out - 1) * stride >= size:
            out -= 1
    else:
        out = (size - kernel) // stride + 1
    return max(out, 0)


def _maxpool_layer(kernel: int, spatial: int, ceil: bool = True,
                   frozen: bool = False) -> LayerSpec:
    return LayerSpec(kind="maxpool", kernel=min(kernel, spatial), stride=2,
                     ceil_mode=ceil, frozen=frozen)


def _walk_spatial(spec: ArchitectureSpec, upto: int | None = None) -> int:
    """Spatial side after the first `upto` layers (all layers if None)."""
    side = spec.input_side
    for layer in spec.layers[:upto]:
        if layer.kind == "maxpool":
            side = _pool_out(side, layer.kernel, layer.stride or 2, layer.ceil_mode)
    return side


def build_baseline(input_side: int, n_classes: int,
                   dropout_rate: float = DEFAULT_DROPOUT) -> ArchitectureSpec:
    """Six conv blocks (96,96,256,256,384,384 filters; 7,7,5,5,3,3 kernels),
    each conv followed by relu and maxpool, the first four blocks additionally
    by batchnorm and dropout; then flatten and a dense(512)x2 head ending in
    dense(n_classes)+softmax."""
    if n_classes < 2:
        raise ArchitectureError(f"n_classes must be >= 2, got {n_classes}")
    if input_side < MIN_INPUT_SIDE:
        raise ArchitectureError(
            f"input_side {input_side} is too small for the pooling stack; "
            f"the minimum is {MIN_INPUT_SIDE}"
        )
    layers: list[LayerSpec] = []
    spatial = input_side
    for i, (filters, kernel) in enumerate(zip(BASELINE_FILTERS, BASELINE_KERNELS)):
        layers.append(LayerSpec(kind="conv", filters=filters, kernel=kernel,
                                padding=kernel // 2))
        layers.append(LayerSpec(kind="relu"))
        pool = _maxpool_layer(3 if i < 2 else 2, spatial)
        layers.append(pool)
        spatial = _pool_out(spatial, pool.kernel, 2, True)
        if i < 4:
            layers.append(LayerSpec(kind="batchnorm"))
            layers.append(LayerSpec(kind="dropout", rate=dropout_rate))
    layers.append(LayerSpec(kind="flatten"))
    for _ in range(2):
        layers.append(LayerSpec(kind="dense", units=512))
        layers.append(LayerSpec(kind="relu"))
    layers.append(LayerSpec(kind="dense", units=n_classes))
    layers.append(LayerSpec(kind="softmax"))
    return ArchitectureSpec(input_side=input_side, channels=3, layers=layers,
                            n_classes=n_classes)


VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


def build_vgg16(input_side: int, n_classes: int = 1000,
                dropout_rate: float = 0.5) -> ArchitectureSpec:
    """VGG16 topology: 13 convs in five blocks, floor-mode 2x2 pools, and the
    4096-4096-n_classes classifier."""
    if input_side < MIN_INPUT_SIDE:
        raise ArchitectureError(
            f"input_side {input_side} is too small for the pooling stack; "
            f"the minimum is {MIN_INPUT_SIDE}"
        )
    layers: list[LayerSpec] = []
    spatial = input_side
    for filters, reps in VGG16_BLOCKS:
        for _ in range(reps):
            layers.append(LayerSpec(kind="conv", filters=filters, kernel=3, padding=1))
            layers.append(LayerSpec(kind="relu"))
        pool = _maxpool_layer(2, spatial, ceil=False)
        layers.append(pool)
        spatial = _pool_out(spatial, pool.kernel, 2, False)
    layers.append(LayerSpec(kind="flatten"))
    for _ in range(2):
        layers.append(LayerSpec(kind="dense", units=4096))
        layers.append(LayerSpec(kind="relu"))
        layers.append(LayerSpec(kind="dropout", rate=dropout_rate))
    layers.append(LayerSpec(kind="dense", units=n_classes))
    layers.append(LayerSpec(kind="softmax"))
    return ArchitectureSpec(input_side=input_side, channels=3, layers=layers,
                            n_classes=n_classes)


def _head_start(spec: ArchitectureSpec) -> int:
    """Index of the flatten layer opening the dense head."""
    for i, layer in enumerate(spec.layers):
        if layer.kind == "flatten":
            return i
    raise ArchitectureError("architecture has no flatten layer")


_BASELINE_HEAD = ("dense", "relu", "dense", "relu", "dense", "softmax")


def _check_baseline_head(spec: ArchitectureSpec) -> int:
    flat = _head_start(spec)
    tail = [l.kind for l in spec.layers[flat + 1:]]
    if tuple(tail) != _BASELINE_HEAD or spec.layers[flat + 1].units != 512 \
            or spec.layers[flat + 3].units != 512:
        raise ArchitectureError(
            "base model lacks the expected dense(512)x2 + dense + softmax head; "
            f"found layer kinds {tail}"
        )
    return flat


def make_feature_extractor(base: TrainedModel, n_classes: int) -> ArchitectureSpec:
    """Freeze all six conv blocks of a trained baseline, drop both dense(512)
    head layers, and attach a single trainable dense(n_classes)+softmax."""
    flat = _check_baseline_head(base.spec)
    trunk = [replace(l, frozen=True) for l in base.spec.layers[: flat + 1]]
    head = [LayerSpec(kind="dense", units=n_classes), LayerSpec(kind="softmax")]
    return ArchitectureSpec(
        input_side=base.spec.input_side,
        channels=base.spec.channels,
        layers=trunk + head,
        n_classes=n_classes,
        inherited_layers=len(trunk),
    )


def _conv_block_spans(layers: Sequence[LayerSpec], end: int) -> list[tuple[int, int]]:
    """(start, stop) spans of conv blocks within layers[:end]."""
    starts = [i for i, l in enumerate(layers[:end]) if l.kind == "conv"]
    spans = []
    for j, s in enumerate(starts):
        stop = starts[j + 1] if j + 1 < len(starts) else end
        spans.append((s, stop))
    return spans


def make_fine_tuned(base: TrainedModel, n_classes: int,
                    nearest_input: bool = True) -> ArchitectureSpec:
    """Keep the whole six-conv trunk of a trained baseline, freeze five of its
    blocks (nearest the input by default; nearest_input=False inverts), and
    append four new conv layers - two of 64 then two of 128 filters, each pair
    followed by maxpool and batchnorm - plus a fresh dense(n_classes)+softmax."""
    _check_baseline_head(base.spec)
    flat = _head_start(base.spec)
    spans = _conv_block_spans(base.spec.layers, flat)
    if len(spans) != 6:
        raise ArchitectureError(f"expected a 6-conv-block trunk, found {len(spans)} blocks")
    frozen_blocks = set(range(5)) if nearest_input else set(range(1, 6))
    trunk: list[LayerSpec] = []
    for block_idx, (start, stop) in enumerate(spans):
        for l in base.spec.layers[start:stop]:
            trunk.append(replace(l, frozen=block_idx in frozen_blocks))

    spatial = _walk_spatial(base.spec, flat)
    new_layers: list[LayerSpec] = []
    for pair in (FINETUNE_FILTERS[:2], FINETUNE_FILTERS[2:]):
        for filters in pair:
            new_layers.append(LayerSpec(kind="conv", filters=filters, kernel=3, padding=1))
            new_layers.append(LayerSpec(kind="relu"))
        pool = _maxpool_layer(2, spatial)
        new_layers.append(pool)
        spatial = _pool_out(spatial, pool.kernel, 2, True)
        new_layers.append(LayerSpec(kind="batchnorm"))
    new_layers.append(LayerSpec(kind="flatten"))
    new_layers.append(LayerSpec(kind="dense", units=n_classes))
    new_layers.append(LayerSpec(kind="softmax"))
    return ArchitectureSpec(
        input_side=base.spec.input_side,
        channels=base.spec.channels,
        layers=trunk + new_layers,
        n_classes=n_classes,
        inherited_layers=len(trunk),
    )


def make_backbone_extractor(backbone: TrainedModel, n_classes: int) -> ArchitectureSpec:
    """Freeze every backbone layer, pop its classification head, and append a
    single trainable dense(n_classes)+softmax."""
    layers = backbone.spec.layers
    if layers[-1].kind != "softmax" or layers[-2].kind != "dense":
        raise ArchitectureError(
            "backbone must end with a dense+softmax classification head"
        )
    retained = [replace(l, frozen=True) for l in layers[:-2]]
    head = [LayerSpec(kind="dense", units=n_classes), LayerSpec(kind="softmax")]
    return ArchitectureSpec(
        input_side=backbone.spec.input_side,
        channels=backbone.spec.channels,
        layers=retained + head,
        n_classes=n_classes,
        inherited_layers=len(retained),
    )


def load_vgg16_backbone(weights_path: str | Path | None, input_side: int = 227,
                        n_classes: int = 1000, random_init: bool = False,
                        seed: int = 0) -> TrainedModel:
    """Build the VGG16 topology and load backbone weights from a state-dict
    file (tensors matched positionally by shape), or initialize randomly when
    random_init is set."""
    spec = build_vgg16(input_side, n_classes)
    module = build_module(spec, seed)
    if not random_init:
        if weights_path is None or not Path(weights_path).exists():
            raise ArchitectureError(
                f"pretrained backbone requested but weights file is missing: {weights_path}"
            )
        loaded = torch.load(weights_path, map_location="cpu", weights_only=True)
        own = module.state_dict()
        if len(loaded) != len(own):
            raise ArchitectureError(
                f"backbone weights file has {len(loaded)} tensors, expected {len(own)}"
            )
        mapped = {}
        for (own_key, own_val), src_val in zip(own.items(), loaded.values()):
            if tuple(own_val.shape) != tuple(src_val.shape):
                raise ArchitectureError(
                    f"backbone tensor shape mismatch at {own_key}: "
                    f"{tuple(src_val.shape)} vs expected {tuple(own_val.shape)}"
                )
            mapped[own_key] = src_val
        module.load_state_dict(mapped)
    return TrainedModel(spec=spec, module=module, class_order=())


class _SpecNet(nn.Module):
    """Torch compilation of an ArchitectureSpec. Forward returns logits; the
    declared softmax is applied by predict_proba. Frozen batchnorm and dropout
    layers are pinned to eval mode: running statistics never move and a frozen
    trunk feeds the trainable head the same features it will produce at
    inference."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        mods: list[nn.Module] = []
        self._frozen_eval: list[int] = []
        in_ch = spec.channels
        spatial = spec.input_side
        width = None
        for i, layer in enumerate(spec.layers):
            if layer.kind == "conv":
                pad = layer.padding if layer.padding is not None else layer.kernel // 2
                mods.append(nn.Conv2d(in_ch, layer.filters, layer.kernel, padding=pad))
                in_ch = layer.filters
            elif layer.kind == "relu":
                mods.append(nn.ReLU())
            elif layer.kind == "maxpool":
                stride = layer.stride or 2
                mods.append(nn.MaxPool2d(layer.kernel, stride, ceil_mode=layer.ceil_mode))
                spatial = _pool_out(spatial, layer.kernel, stride, layer.ceil_mode)
            elif layer.kind == "batchnorm":
                mods.append(nn.BatchNorm2d(in_ch))
            elif layer.kind == "dropout":
                mods.append(nn.Dropout(layer.rate))
            elif layer.kind == "flatten":
                mods.append(nn.Flatten())
                width = in_ch * spatial * spatial
            elif layer.kind == "dense":
                if width is None:
                    raise ArchitectureError("dense layer before flatten")
                mods.append(nn.Linear(width, layer.units))
                width = layer.units
            elif layer.kind == "softmax":
                mods.append(nn.Identity())
        self.blocks = nn.ModuleList(mods)
        for i, layer in enumerate(spec.layers):
            if layer.frozen:
                for p in self.blocks[i].parameters():
                    p.requires_grad_(False)
                if isinstance(self.blocks[i], (nn.BatchNorm2d, nn.Dropout)):
                    self._frozen_eval.append(i)

    def train(self, mode: bool = True) -> "_SpecNet":
        super().train(mode)
        for i in self._frozen_eval:
            self.blocks[i].eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def build_module(spec: ArchitectureSpec, seed: int = 0) -> nn.Module:
    """Compile a spec to a torch module with seed-deterministic initialization."""
    torch.manual_seed(seed)
    return _SpecNet(spec)


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def _copy_inherited(target: nn.Module, base: TrainedModel, n_layers: int) -> None:
    for i in range(n_layers):
        src = base.module.blocks[i]
        dst = target.blocks[i]
        try:
            dst.load_state_dict(src.state_dict())
        except RuntimeError as exc:
            raise ArchitectureError(
                f"cannot inherit weights for layer {i}: {exc}"
            ) from exc


def _to_batch_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)


def _train_batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Contiguous batches; a trailing singleton is merged into the previous
    batch because batchnorm cannot normalize a single value per channel."""
    batches = [perm[i: i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _encode_labels(manifest: DatasetManifest,
                   class_order: Sequence[GenderLabel]) -> np.ndarray:
    index = {label: i for i, label in enumerate(class_order)}
    encoded = []
    for rec in manifest.records:
        if rec.gender not in index:
            raise TrainingError(
                f"label {rec.gender.value!r} is outside the model's class set "
                f"({', '.join(l.value for l in class_order)})"
            )
        encoded.append(index[rec.gender])
    return np.asarray(encoded, dtype=np.int64)


# Past this size the training loop re-reads images per batch instead of
# holding the whole split in memory.
_PRELOAD_BUDGET_BYTES = 1_500_000_000


class _ImageStore:
    def __init__(self, manifest: DatasetManifest, side: int):
        self.records = manifest.records
        self.side = side
        nbytes = len(self.records) * side * side * 3 * 4
        self._cache = load_images(self.records, side) if nbytes <= _PRELOAD_BUDGET_BYTES else None

    def take(self, indices: np.ndarray) -> np.ndarray:
        if self._cache is not None:
            return self._cache[indices]
        return load_images([self.records[int(i)] for i in indices], self.side)


def _eval_pass(module: nn.Module, store: _ImageStore, labels: np.ndarray,
               batch_size: int) -> tuple[float, float]:
    module.eval()
    total_loss, correct = 0.0, 0
    n = len(labels)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            x = _to_batch_tensor(store.take(idx))
            y = torch.from_numpy(labels[idx])
            logits = module(x)
            total_loss += F.cross_entropy(logits, y, reduction="sum").item()
            correct += int((logits.argmax(dim=1) == y).sum())
    return total_loss / n, correct / n


def train(
    spec: ArchitectureSpec,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainingConfig,
    init_from: TrainedModel | None = None,
) -> tuple[TrainedModel, TrainingHistory]:
    """Train a spec and return the model plus per-epoch learning curves.

    Deterministic under cfg.seed on a fixed hardware class (CPU thread count
    included). Frozen layers receive no optimizer updates and frozen batchnorm
    statistics never move. Early stopping (patience on validation loss)
    truncates the history and restores the best-validation weights.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise TrainingError("train and validation manifests must be nonempty")
    class_order = tuple(CLASS_ORDER[: spec.n_classes])
    y_train = _encode_labels(train_manifest, class_order)
    y_val = _encode_labels(val_manifest, class_order)

    torch.manual_seed(cfg.seed)
    module = build_module(spec, cfg.seed)
    if init_from is not None and spec.inherited_layers:
        _copy_inherited(module, init_from, spec.inherited_layers)

    trainable = [p for p in module.parameters() if p.requires_grad]
    if not trainable:
        raise TrainingError("architecture has no trainable parameters")
    if cfg.optimizer == "adam":
        optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    else:
        optimizer = torch.optim.SGD(trainable, lr=cfg.learning_rate, momentum=0.9)

    train_store = _ImageStore(train_manifest, spec.input_side)
    val_store = _ImageStore(val_manifest, spec.input_side)
    rng = np.random.default_rng(cfg.seed)
    history = TrainingHistory()
    best_val = float("inf")
    best_state: dict | None = None
    stale = 0

    for epoch in range(cfg.epochs):
        module.train()
        epoch_loss, correct = 0.0, 0
        for batch in _train_batches(rng.permutation(len(y_train)), cfg.batch_size):
            x = _to_batch_tensor(train_store.take(batch))
            y = torch.from_numpy(y_train[batch])
            optimizer.zero_grad()
            logits = module(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {batch[0]}: "
                    f"loss={loss.item()!r}, lr={cfg.learning_rate}; "
                    f"lower the learning rate or inspect the input data"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
            correct += int((logits.argmax(dim=1) == y).sum())
        val_loss, val_acc = _eval_pass(module, val_store, y_val, max(cfg.batch_size, 32))
        history.train_loss.append(epoch_loss / len(y_train))
        history.train_accuracy.append(correct / len(y_train))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)

        if cfg.early_stop_patience is not None:
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_state = copy.deepcopy(module.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break

    if best_state is not None:
        module.load_state_dict(best_state)
    module.eval()
    return TrainedModel(spec=spec, module=module, class_order=class_order), history


def predict_proba(model: TrainedModel, images: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of (N, side, side, 3) images in [0, 1].

    Rows are softmax outputs: nonnegative, summing to 1 within 1e-6.
    """
    side = model.spec.input_side
    expected = (side, side, model.spec.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise PredictionError(
            f"expected image batch of shape (N, {side}, {side}, {model.spec.channels}), "
            f"got {tuple(images.shape)}"
        )
    model.module.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), 128):
            x = _to_batch_tensor(images[start: start + 128].astype(np.float32))
            logits = model.module(x).double()
            rows.append(torch.softmax(logits, dim=1).numpy())
    if not rows:
        return np.zeros((0, model.spec.n_classes))
    return np.concatenate(rows, axis=0)


def save_model(model: TrainedModel, bundle_dir: str | Path,
               history: TrainingHistory | None = None) -> Path:
    """Write the model bundle: architecture.json, weights.bin, classes.txt,
    and history.csv when a history is given."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    (bundle_dir / "architecture.json").write_text(model.spec.to_json(), encoding="utf-8")
    torch.save(model.module.state_dict(), bundle_dir / "weights.bin")
    (bundle_dir / "classes.txt").write_text(
        "".join(f"{label.value}\n" for label in model.class_order), encoding="utf-8"
    )
    if history is not None:
        history.save_csv(bundle_dir / "history.csv")
    return bundle_dir


def load_model(bundle_dir: str | Path) -> TrainedModel:
    bundle_dir = Path(bundle_dir)
    spec = ArchitectureSpec.from_json(
        (bundle_dir / "architecture.json").read_text(encoding="utf-8")
    )
    module = build_module(spec, seed=0)
    state = torch.load(bundle_dir / "weights.bin", map_location="cpu", weights_only=True)
    module.load_state_dict(state)
    module.eval()
    classes = tuple(
        GenderLabel(line)
        for line in (bundle_dir / "classes.txt").read_text(encoding="utf-8").splitlines()
        if line
    )
    return TrainedModel(spec=spec, module=module, class_order=classes)
