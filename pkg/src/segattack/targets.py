"""Adversarial target construction: heart symbols, resizing, composition.

A target label map is derived from a basis segmentation (ground truth or the
network's clean prediction) by replacing one structure's region with a new
shape placed at the structure's center of mass: a rasterized heart symbol, a
rescaled copy of the region itself, or a user-supplied raw mask. Composition
either rewrites the full label map (attack_all) or emits a single-class plane
whose loss ignores every other class (class_only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .autodiff import ShapeError
from .metrics import ClassScope, SCOPE_STRUCTURES

SHAPE_SOURCES = ("heart_symbol", "resized", "mask")
TARGET_SCOPES = ("attack_all", "class_only")
TARGET_BASES = ("ground_truth", "clean_prediction")

# The symbol is the implicit sextic curve (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0.
# Its filled interior spans 2.235 units vertically (tip at y = -1, lobes up
# to y ~ 1.2365) and has its area centroid at (0, 0.2935); "size" scales that
# vertical span to the requested pixel count.
HEART_CURVE_HEIGHT = 2.235
HEART_CENTROID_Y = 0.2935


def heart_symbol_mask(canvas_shape, center, size: float) -> np.ndarray:
    """Rasterize a heart symbol of the given pixel height onto a canvas.

    The symbol points downward in image coordinates (tip at the largest row)
    and is positioned so the mask's area centroid lands on ``center``
    (row, col) to within a pixel; parts falling outside the canvas are
    clipped. ``size`` is the nominal vertical extent in pixels and must be at
    least 4 for the raster to resolve the shape.
    """
    h, w = canvas_shape
    if size < 4:
        raise ValueError(f"heart symbol size must be >= 4 px, got {size}")
    cr, cc = float(center[0]), float(center[1])
    if not (0 <= cr < h and 0 <= cc < w):
        raise ValueError(f"symbol center {center} outside {h}x{w} canvas")
    scale = HEART_CURVE_HEIGHT / float(size)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    # row grows downward while curve y grows upward; anchor the area centroid
    # (0, HEART_CENTROID_Y) of the curve at the requested center pixel
    yn = (cr - rows)[:, None] * scale + HEART_CENTROID_Y
    xn = (cols - cc)[None, :] * scale
    return (xn**2 + yn**2 - 1.0) ** 3 - xn**2 * yn**3 <= 0.0


def _nearest_toward_center(src: np.ndarray, center: float) -> np.ndarray:
    """Round sampling coordinates to nearest integers, breaking exact .5
    ties toward ``center`` so the pattern stays mirror-symmetric about it.
    Plain half-up rounding drifts the result by half a pixel whenever the
    scale factor puts source coordinates exactly between pixels (e.g. any
    integer coefficient about an integer center of mass)."""
    return np.where(src >= center, np.ceil(src - 0.5), np.floor(src + 0.5)).astype(np.int64)


def resize_mask(mask: np.ndarray, coefficient: float) -> np.ndarray:
    """Scale a binary mask about its own center of mass.

    Inverse-map nearest-neighbor sampling: output pixel p takes the input
    value at com + (p - com)/coefficient, so the center of mass stays put
    (within a pixel) and anything mapped outside the canvas is clipped.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got shape {mask.shape}")
    if not 0.0 < coefficient <= 4.0:
        raise ValueError(f"resize coefficient must be in (0, 4], got {coefficient}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("cannot resize an empty mask")
    h, w = mask.shape
    cr, cc = rows.mean(), cols.mean()
    rr, ccg = np.meshgrid(np.arange(h, dtype=np.float64),
                          np.arange(w, dtype=np.float64), indexing="ij")
    src_r = _nearest_toward_center(cr + (rr - cr) / coefficient, cr)
    src_c = _nearest_toward_center(cc + (ccg - cc) / coefficient, cc)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros((h, w), dtype=bool)
    out[valid] = mask[src_r[valid], src_c[valid]] != 0
    return out


@dataclass(frozen=True)
class TargetSpec:
    """What to put in place of one structure, and how the attack sees it.

    shape selects the source: "heart_symbol" (size_fraction = symbol height
    as a fraction of the canvas side), "resized" (coefficient = linear scale
    factor applied to the structure's own region), or "mask" (a raw binary
    mask used verbatim). scope "attack_all" rewrites the whole label map and
    the attack optimizes all five structures; "class_only" emits just the
    target class plane and the loss ignores the rest. basis records whether
    the composition starts from ground truth or from the network's clean
    prediction.
    """

    target_class: int
    shape: str
    size_fraction: float | None = None
    coefficient: float | None = None
    mask: np.ndarray | None = None
    scope: str = "attack_all"
    basis: str = "ground_truth"

    def validate(self) -> None:
        if self.target_class not in data_mod.STRUCTURE_CLASSES:
            raise ValueError(
                f"target_class must be a structure class "
                f"{data_mod.STRUCTURE_CLASSES}, got {self.target_class}"
            )
        if self.shape not in SHAPE_SOURCES:
            raise ValueError(f"shape must be one of {SHAPE_SOURCES}, got {self.shape!r}")
        if self.scope not in TARGET_SCOPES:
            raise ValueError(f"scope must be one of {TARGET_SCOPES}, got {self.scope!r}")
        if self.basis not in TARGET_BASES:
            raise ValueError(f"basis must be one of {TARGET_BASES}, got {self.basis!r}")
        if self.shape == "heart_symbol":
            if self.size_fraction is None or not 0.0 < self.size_fraction <= 1.0:
                raise ValueError(
                    f"heart_symbol needs size_fraction in (0, 1], got {self.size_fraction}"
                )
        elif self.shape == "resized":
            if self.coefficient is None or not 0.0 < self.coefficient <= 4.0:
                raise ValueError(
                    f"resized needs coefficient in (0, 4], got {self.coefficient}"
                )
        else:
            if self.mask is None or np.asarray(self.mask).ndim != 2:
                raise ValueError("shape 'mask' needs a 2-d binary mask array")


@dataclass(frozen=True)
class ComposedTarget:
    """A ready-to-attack target: label map plus the loss scope to use.

    For attack_all the labels are the full rewritten map and plane is None;
    for class_only the labels contain only {0, target class} and plane holds
    the emitted single-class mask.
    """

    labels: np.ndarray
    scope: ClassScope
    plane: np.ndarray | None = None


def compose_target(basis_labels: np.ndarray, spec: TargetSpec) -> ComposedTarget:
    """Build the adversarial target segmentation for one image.

    The new shape is placed at the center of mass of the basis region of the
    target class. Under attack_all, every other structure keeps its basis
    mask, pixels the new shape overlaps are reassigned to the target class
    (the new shape wins), and pixels the old region vacates become
    background. Under class_only only the target class plane is produced.
    """
    spec.validate()
    basis_labels = np.asarray(basis_labels)
    if basis_labels.ndim != 2:
        raise ShapeError(f"basis label map must be 2-d, got {basis_labels.shape}")
    c = spec.target_class
    structure = basis_labels == c
    if not structure.any():
        raise ValueError(
            f"structure {data_mod.CLASS_NAMES[c]!r} (class {c}) absent from basis"
        )

    if spec.shape == "heart_symbol":
        rows, cols = np.nonzero(structure)
        center = (rows.mean(), cols.mean())
        size = spec.size_fraction * basis_labels.shape[0]
        new_mask = heart_symbol_mask(basis_labels.shape, center, size)
    elif spec.shape == "resized":
        new_mask = resize_mask(structure, spec.coefficient)
    else:
        new_mask = np.asarray(spec.mask) != 0
        if new_mask.shape != basis_labels.shape:
            raise ShapeError(
                f"raw mask shape {new_mask.shape} does not match "
                f"label map {basis_labels.shape}"
            )

    if spec.scope == "class_only":
        labels = np.where(new_mask, np.int64(c), np.int64(0))
        return ComposedTarget(labels=labels, scope=ClassScope((c,)), plane=new_mask)

    out = basis_labels.copy()
    out[structure] = 0
    out[new_mask] = c
    return ComposedTarget(labels=out, scope=SCOPE_STRUCTURES)


def target_to_pgm(path, labels: np.ndarray) -> None:
    """Write a target label map as an 8-bit PGM for visual inspection."""
    data_mod.write_pgm(path, np.asarray(labels, dtype=np.int64), 255)
