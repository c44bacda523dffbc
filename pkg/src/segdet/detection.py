"""Detection branch: two-stream instance scoring, pseudo-label conversion,
and a chain of three refinement classifiers.

The instance scorer rates every proposal per class as the product of a
classification softmax (over classes, per proposal) and a selection softmax
(over proposals, per class). Its score matrix seeds one-hot pseudo labels
that supervise the refinement heads, each head instructed by its predecessor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BBox, ProposalSet, box_iou_many, scale_box

BACKGROUND = -1  # sentinel for "label = class count" in docs; actual index is n_classes


def pooling_matrix(
    proposals: ProposalSet, image_size: tuple[int, int], map_size: tuple[int, int]
) -> np.ndarray:
    """(B, h*w) mean-pooling operator from a feature map to per-proposal vectors.

    Row i averages the feature-map pixels covered by proposal i after scaling
    it into the map frame. Proposals must lie inside the image.
    """
    iw, ih = image_size
    mw, mh = map_size
    mat = np.zeros((len(proposals), mh * mw))
    for i, box in enumerate(proposals):
        if box.x0 < 0 or box.y0 < 0 or box.x1 > iw or box.y1 > ih:
            raise ValueError(f"proposal {box} outside image extent {image_size}")
        sb = scale_box(box, (iw, ih), (mw, mh))
        region = np.zeros((mh, mw))
        region[sb.y0 : sb.y1, sb.x0 : sb.x1] = 1.0 / sb.area
        mat[i] = region.ravel()
    return mat


def pool_proposals(features: Tensor, pool_mat: np.ndarray) -> Tensor:
    """Apply a precomputed pooling matrix to a (C, h, w) feature map -> (B, C)."""
    c = features.shape[0]
    flat = ad.reshape(features, (c, -1))  # (C, h*w)
    return Tensor(pool_mat) @ ad.transpose(flat)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


@dataclass
class MidnOutput:
    """Instance scores and the two streams they factor into."""

    dm: Tensor  # (B, N), entries in [0, 1]
    cls_probs: Tensor  # softmax over classes, rows sum to 1
    sel_probs: Tensor  # softmax over proposals, columns sum to 1


def midn_forward(pooled: Tensor, params: dict[str, Tensor]) -> MidnOutput:
    """Two-stream scorer over per-proposal pooled features (B, C)."""
    cls_logits = _linear(pooled, params["det.cls.w"], params["det.cls.b"])
    sel_logits = _linear(pooled, params["det.sel.w"], params["det.sel.b"])
    cls_probs = ad.softmax(cls_logits, axis=1)
    sel_probs = ad.softmax(sel_logits, axis=0)
    return MidnOutput(dm=cls_probs * sel_probs, cls_probs=cls_probs, sel_probs=sel_probs)


@dataclass
class RefineOutput:
    """Per-head row-stochastic score matrices and their average."""

    heads: list[Tensor]  # each (B, N+1)
    mean: Tensor  # (B, N+1)


def refine_forward(pooled: Tensor, params: dict[str, Tensor]) -> RefineOutput:
    heads = [
        ad.softmax(_linear(pooled, params[f"det.r{k}.w"], params[f"det.r{k}.b"]), axis=1)
        for k in (1, 2, 3)
    ]
    mean = (heads[0] + heads[1] + heads[2]) * (1.0 / 3.0)
    return RefineOutput(heads=heads, mean=mean)


def mil_loss(dm: Tensor, y: np.ndarray) -> Tensor:
    """Image-level multi-label loss: per-class proposal sums against labels."""
    phi = ad.tsum(dm, axis=0)
    return ad.bce(phi, np.asarray(y, dtype=np.float64))


@dataclass
class PseudoLabels:
    """One-hot proposal labels (background = n_classes) with seed weights."""

    labels: np.ndarray  # (B,) int, values in 0..n_classes
    weights: np.ndarray  # (B,) float
    n_classes: int

    def matrix(self) -> np.ndarray:
        """(B, N+1) binary matrix with exactly one 1 per row."""
        out = np.zeros((self.labels.size, self.n_classes + 1))
        out[np.arange(self.labels.size), self.labels] = 1.0
        return out


def kappa_labels(
    scores: np.ndarray,
    y: np.ndarray,
    proposals: ProposalSet,
    iou_thresh: float = 0.5,
) -> PseudoLabels:
    """Convert soft proposal scores (B, N) into one-hot labels.

    For every positive class the top-scoring proposal becomes a seed; it and
    all proposals overlapping it at IoU >= iou_thresh take that class label
    with the seed's score as weight. Conflicts go to the higher-scoring seed
    (ties to the lower class index). Everything unclaimed is background and
    inherits the maximum seed weight.
    """
    scores = np.asarray(scores, dtype=np.float64)
    b, n = scores.shape
    positives = [k for k in range(n) if y[k]]
    if not positives:
        raise ValueError("pseudo labels need at least one positive class")
    coords = proposals.coords()
    labels = np.full(b, n, dtype=np.int64)
    weights = np.zeros(b)
    claim = np.full(b, -np.inf)
    best_seed = 0.0
    for k in positives:
        i_star = int(np.argmax(scores[:, k]))  # first max: lowest index on ties
        seed_score = scores[i_star, k]
        best_seed = max(best_seed, seed_score)
        hit = box_iou_many(proposals[i_star], coords) >= iou_thresh
        take = hit & (seed_score > claim)
        labels[take] = k
        weights[take] = seed_score
        claim[take] = seed_score
    weights[labels == n] = best_seed
    return PseudoLabels(labels=labels, weights=weights, n_classes=n)


def refinement_loss(head: Tensor, pl: PseudoLabels) -> Tensor:
    """Weighted cross entropy of one refinement head against its labels,
    normalized by the proposal count."""
    b = pl.labels.size
    picked = ad.clamp_guard(head[np.arange(b), pl.labels], ad.EPS, 1.0)
    return ad.tsum(-ad.log(picked) * Tensor(pl.weights)) * (1.0 / b)


def chain_labels(
    dm_values: np.ndarray,
    head_values: list[np.ndarray],
    y: np.ndarray,
    proposals: ProposalSet,
    iou_thresh: float = 0.5,
) -> list[PseudoLabels]:
    """Pseudo labels for the three heads: head 1 from the instance scorer,
    each later head from its predecessor's foreground scores."""
    n = dm_values.shape[1]
    labels = [kappa_labels(dm_values, y, proposals, iou_thresh)]
    for hv in head_values[:-1]:
        labels.append(kappa_labels(hv[:, :n], y, proposals, iou_thresh))
    return labels


def branch_loss(mil: Tensor, refine: Tensor, lambda_mil: float = 1.0, lambda_ref: float = 1.0):
    """Weighted combination of the image-level and refinement losses."""
    return mil * lambda_mil + refine * lambda_ref
