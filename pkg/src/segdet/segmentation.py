"""Segmentation branch trained by adversarial masking against an image classifier.

Per-class soft maps try to cover complete object regions: the region a map
keeps must classify as exactly that class, and the complement must lose the
class, so a map that hides only a discriminative part is penalized through
the still-recognizable remainder. A response-constraint term pins maps of
absent classes to zero. The classifier is trained on its own turn to keep
recognizing images whose claimed regions were erased.

Channel convention: foreground classes are 0..N-1, channel N is background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ClassifierFn = Callable[[Tensor], Tensor]  # image (C, H, W) -> class probabilities (N,)


def seg_forward(features: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Two-conv head with per-channel sigmoid -> (N+1, h, w) soft maps."""
    hidden = ad.tanh(ad.conv2d(features, params["seg.c1.w"], params["seg.c1.b"]))
    logits = ad.conv2d(hidden, params["seg.c2.w"], params["seg.c2.b"])
    return ad.sigmoid(logits)


def apply_mask(image: Tensor, s_k: Tensor) -> Tensor:
    """Pixel-wise product of an image with a map upsampled to image size."""
    h = image.shape[-2]
    mh = s_k.shape[0]
    if h % mh != 0:
        raise ValueError(f"image height {h} not a multiple of map height {mh}")
    factor = h // mh
    mask = ad.upsample_nearest(s_k, factor) if factor > 1 else s_k
    return image * mask


def adversarial_targets(y: np.ndarray, k: int, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Target pair (kept-region target, erased-region target) for channel k.

    Foreground channel: the kept region should be exactly class k and the
    erased image should lose class k but keep the other labels. Background
    channel: the kept region should be nothing and the erased image should
    still show every label.
    """
    y = np.asarray(y, dtype=np.float64)
    if k == n_classes:  # background channel
        return np.zeros(n_classes), y.copy()
    keep = np.zeros(n_classes)
    keep[k] = 1.0
    erased = y.copy()
    erased[k] = 0.0
    return keep, erased


def seg_adv_loss(
    s_k: Tensor,
    image: Tensor,
    classifier: ClassifierFn,
    y: np.ndarray,
    k: int,
) -> Tensor:
    """Masked-classification loss for one channel; the classifier must be frozen.

    Valid for positive foreground channels and for the background channel
    (which applies on every image).
    """
    n_classes = np.asarray(y).size
    if k < n_classes and not y[k]:
        raise ValueError(f"adversarial loss on negative foreground class {k}")
    keep_target, erased_target = adversarial_targets(y, k, n_classes)
    kept = ad.bce(classifier(apply_mask(image, s_k)), keep_target)
    erased = ad.bce(classifier(apply_mask(image, 1.0 - s_k)), erased_target)
    return kept + erased


def seg_cls_loss(s_k: Tensor, target: float, fraction: float = 0.2) -> Tensor:
    """Response constraint: mean of the top responses against the channel label."""
    return ad.bce(ad.topk_avg_pool(s_k, fraction), target)


@dataclass
class SegBranchLoss:
    """Total branch loss plus a record of how each channel was supervised."""

    total: Tensor
    adv_channels: list[int] = field(default_factory=list)
    cls_targets: dict[int, float] = field(default_factory=dict)


def seg_branch_loss(
    seg_map: Tensor,
    image: Tensor,
    classifier: ClassifierFn,
    y: np.ndarray,
    lambda_adv: float = 1.0,
    lambda_cls: float = 0.1,
    fraction: float = 0.2,
) -> SegBranchLoss:
    """Adversarial terms over positive channels plus background, and response
    constraints over every channel (background always targets 1)."""
    y = np.asarray(y)
    n_classes = y.size
    record = SegBranchLoss(total=Tensor(0.0))
    adv = Tensor(0.0)
    for k in list(np.flatnonzero(y)) + [n_classes]:
        k = int(k)
        adv = adv + seg_adv_loss(seg_map[k], image, classifier, y, k)
        record.adv_channels.append(k)
    cls = Tensor(0.0)
    for k in range(n_classes + 1):
        target = 1.0 if k == n_classes else float(y[k])
        cls = cls + seg_cls_loss(seg_map[k], target, fraction)
        record.cls_targets[k] = target
    record.total = adv * lambda_adv + cls * lambda_cls
    return record


def classifier_loss(
    image: Tensor,
    seg_map: Tensor,
    classifier: ClassifierFn,
    y: np.ndarray,
) -> Tensor:
    """Classifier objective: recognize the image, and keep recognizing it after
    each positive channel's region is erased. Maps are detached so no gradient
    reaches the segmentation head."""
    y = np.asarray(y, dtype=np.float64)
    total = ad.bce(classifier(image), y)
    frozen_map = seg_map.detach()
    for k in np.flatnonzero(y):
        masked = apply_mask(image, 1.0 - frozen_map[int(k)])
        total = total + ad.bce(classifier(masked), y)
    return total
