"""Gland and contour segmentation of H&E histology images."""

from ._core import (
    Error,
    InputError,
    Model,
    NumericalError,
    ShapeError,
    derive_targets,
    fuse,
    main,
    merge,
    object_dice,
    object_f1,
    pixel_dice,
    split,
    synthetic_sample,
)

__all__ = [
    "Error",
    "InputError",
    "Model",
    "NumericalError",
    "ShapeError",
    "derive_targets",
    "fuse",
    "main",
    "merge",
    "object_dice",
    "object_f1",
    "pixel_dice",
    "split",
    "synthetic_sample",
]
