"""fairvision: gender classification pipelines with disparate-impact auditing."""

__version__ = "0.1.0"

from .dataset import (
    CLASS_ORDER,
    DatasetManifest,
    GenderLabel,
    GroupKey,
    ImageRecord,
    Origin,
    SkinTone,
    Split,
    fitzpatrick_to_tone,
    group_distribution,
    load_image,
    load_manifest,
    save_manifest,
    split_dataset,
)

__all__ = [
    "CLASS_ORDER",
    "DatasetManifest",
    "GenderLabel",
    "GroupKey",
    "ImageRecord",
    "Origin",
    "SkinTone",
    "Split",
    "fitzpatrick_to_tone",
    "group_distribution",
    "load_image",
    "load_manifest",
    "save_manifest",
    "split_dataset",
    "__version__",
]
