"""FGSM and PGD attack engines with L-infinity projection and region masks.

Attacks perturb images within an L-infinity ball of radius epsilon on the
[-1, 1] intensity scale. The untargeted mode ascends the segmentation loss
against the ground truth; the targeted mode descends the loss against an
attacker-chosen target segmentation. Perturbation support can be restricted
to a structure's bounding box or to its receptive-field neighborhood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import data as data_mod
from .autodiff import Tensor, ShapeError
from .metrics import ClassScope, SCOPE_STRUCTURES, one_hot, soft_iou_per_sample
from .model import Network, forward

logger = logging.getLogger(__name__)

MODES = ("untargeted", "targeted")
NOISE_REGIONS = ("full", "bbox", "receptive_field")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    iterations: int
    mode: str = "untargeted"
    scope: ClassScope = SCOPE_STRUCTURES
    noise_region: str = "full"
    region_class: int | None = None
    seed: int = 0  # reserved for randomized starts; the default start is x itself

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise_region not in NOISE_REGIONS:
            raise ValueError(
                f"noise_region must be one of {NOISE_REGIONS}, got {self.noise_region!r}"
            )
        if self.noise_region != "full" and self.region_class is None:
            raise ValueError(f"noise_region {self.noise_region!r} needs region_class")


def make_noise_mask(region: str, gt: np.ndarray, cls: int | None = None,
                    rf: int | None = None) -> np.ndarray:
    """Binary (H, W) mask of pixels where perturbation is permitted.

    full: everything. bbox: tight axis-aligned box around {gt == cls}.
    receptive_field: every pixel within Chebyshev distance rf//2 of the
    structure, i.e. every pixel whose perturbation can influence the network
    output on the structure.
    """
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise ShapeError(f"ground-truth label map must be 2-d, got {gt.shape}")
    if region == "full":
        return np.ones(gt.shape, dtype=np.float64)
    if region not in NOISE_REGIONS:
        raise ValueError(f"unknown noise region {region!r}")
    if cls is None:
        raise ValueError(f"noise region {region!r} needs a structure class")
    structure = gt == cls
    if not structure.any():
        name = data_mod.CLASS_NAMES[cls] if 0 <= cls < len(data_mod.CLASS_NAMES) else str(cls)
        raise ValueError(f"structure {name!r} (class {cls}) absent from ground truth")
    if region == "bbox":
        rows = np.flatnonzero(structure.any(axis=1))
        cols = np.flatnonzero(structure.any(axis=0))
        mask = np.zeros(gt.shape, dtype=np.float64)
        mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1.0
        return mask
    if rf is None or rf < 1:
        raise ValueError(f"receptive_field region needs rf >= 1, got {rf}")
    radius = rf // 2
    dilated = maximum_filter(structure.astype(np.uint8), size=2 * radius + 1,
                             mode="constant", cval=0)
    return dilated.astype(np.float64)


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected image batch (N, 1, H, W), got {x.shape}")
    return x


def _mask_batch(mask, n: int, hw) -> np.ndarray:
    if mask is None:
        return np.ones((n, 1) + hw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask[None, None], (n, 1) + hw)
    elif mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape != (n, 1) + hw:
        raise ShapeError(f"mask shape {mask.shape} does not fit batch {(n, 1) + hw}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("noise mask must be binary")
    return mask


def pgd(net: Network, x: np.ndarray, reference_labels: np.ndarray,
        config: AttackConfig, mask: np.ndarray | None = None):
    """Projected gradient descent in the L-infinity ball around x.

    reference_labels is the ground truth (untargeted, gradient ascent) or the
    attack target (targeted, gradient descent). Each step moves alpha times
    the gradient sign inside the mask, then projects onto the epsilon-ball
    around x intersected with [-1, 1]. The start is x itself. Returns the
    adversarial batch and the per-iteration per-image loss trace (T, N).

    Batching note: images in the batch are attacked independently; the summed
    per-image losses give each image exactly its own gradient because
    eval-mode inference has no cross-image coupling.
    """
    config.validate()
    x = _as_batch(x)
    if x.min() < -1.0 or x.max() > 1.0:
        raise ValueError("input image outside [-1, 1]")
    n = x.shape[0]
    hw = x.shape[2:]
    labels = np.asarray(reference_labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n,) + hw:
        raise ShapeError(f"labels shape {labels.shape} does not fit batch {x.shape}")
    mask = _mask_batch(mask, n, hw)
    if config.iterations * config.alpha < config.epsilon:
        logger.warning(
            "PGD cannot reach the ball boundary: T*alpha = %.4g < epsilon = %.4g",
            config.iterations * config.alpha, config.epsilon,
        )

    target = one_hot(labels, net.spec.num_classes)
    step_sign = 1.0 if config.mode == "untargeted" else -1.0
    lo = np.maximum(x - config.epsilon, -1.0)
    hi = np.minimum(x + config.epsilon, 1.0)

    was_training = net.training
    grad_flags = {name: p.requires_grad for name, p in net.params.items()}
    net.training = False
    net.set_requires_grad(False)
    try:
        x_adv = x.copy()
        trace = np.empty((config.iterations, n))
        for it in range(config.iterations):
            xt = Tensor(x_adv, requires_grad=True)
            losses = soft_iou_per_sample(forward(net, xt), target, config.scope)
            trace[it] = losses.data
            losses.sum().backward()
            step = config.alpha * np.sign(xt.grad) * mask
            x_adv = np.clip(x_adv + step_sign * step, lo, hi)
        return x_adv, trace
    finally:
        net.training = was_training
        for name, p in net.params.items():
            p.requires_grad = grad_flags[name]


def fgsm(net: Network, x: np.ndarray, reference_labels: np.ndarray, epsilon: float,
         mode: str = "untargeted", scope: ClassScope = SCOPE_STRUCTURES) -> np.ndarray:
    """Single-step sign attack; by definition pgd with T=1 and alpha=epsilon."""
    if epsilon == 0.0:
        return _as_batch(x).copy()
    config = AttackConfig(epsilon=epsilon, alpha=epsilon, iterations=1,
                          mode=mode, scope=scope)
    x_adv, _ = pgd(net, x, reference_labels, config)
    return x_adv


# -- inspection exports -------------------------------------------------------


def adversarial_to_pgm(path, x_adv: np.ndarray) -> None:
    """Write one adversarial image ([-1,1], shape (H,W)) as 16-bit PGM."""
    data_mod.write_pgm(path, data_mod.quantize_image(x_adv), 65535)


def noise_to_pgm(path, noise: np.ndarray) -> None:
    """Write a noise image x' - x with symmetric scaling: zero maps to the
    mid level, +/- max|noise| to the extremes; an all-zero noise is flat."""
    m = float(np.abs(noise).max())
    scaled = noise / m if m > 0 else np.zeros_like(noise)
    data_mod.write_pgm(path, data_mod.quantize_image(scaled), 65535)
