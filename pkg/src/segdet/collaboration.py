"""The bidirectional instruction loop between the two branches.

One direction turns segmentation maps into per-proposal spatial priors that
re-weight the instance scores; the other accumulates proposal scores into a
per-class pixel heatmap whose confident pixels supervise the segmentation.
Both derived quantities are values, not gradients: they are generated before
the backward pass and held constant within an iteration.

Channel convention matches the rest of the package: foreground classes
0..N-1, background channel N. IGNORE pixels carry the label -1.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import BinaryMask, ProposalSet, connected_components, scale_box

IGNORE = -1


def scale_boxes_to_map(
    proposals: ProposalSet, image_size: tuple[int, int], map_size: tuple[int, int]
) -> np.ndarray:
    """(B, 4) proposal corners in the map frame; cacheable per proposal grid."""
    return np.array(
        [
            (b.x0, b.y0, b.x1, b.y1)
            for b in (scale_box(box, image_size, map_size) for box in proposals)
        ],
        dtype=np.int64,
    )


def _component_box_ious(comp_bits: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of one component against (B, 4) map-frame boxes via integral image."""
    h, w = comp_bits.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = comp_bits.cumsum(axis=0).cumsum(axis=1)
    x0, y0, x1, y1 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    inter = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
    areas = (x1 - x0) * (y1 - y0)
    return inter / (comp_bits.sum() + areas - inter)


def build_dseg(
    seg_values: np.ndarray,
    proposals: ProposalSet,
    y: np.ndarray,
    image_size: tuple[int, int],
    tau0: float = 0.5,
    bin_thresh: float = 0.5,
    map_boxes: np.ndarray | None = None,
) -> np.ndarray:
    """Per-(proposal, class) prior from segmentation connected components.

    For each positive class the channel is binarized, its components
    extracted, and every proposal scored as the best component IoU plus the
    fault-tolerance constant; the column is then normalized by its maximum.
    A channel with no components yields a neutral all-ones column, and
    negative classes stay zero. `map_boxes` may carry precomputed map-frame
    corners for the proposal grid.
    """
    y = np.asarray(y)
    n_classes = y.size
    b = len(proposals)
    h, w = seg_values.shape[-2:]
    prior = np.zeros((b, n_classes))
    if map_boxes is None:
        map_boxes = scale_boxes_to_map(proposals, image_size, (w, h))
    for k in np.flatnonzero(y):
        comps = connected_components(BinaryMask(seg_values[int(k)] > bin_thresh))
        if not comps:
            prior[:, k] = 1.0
            continue
        best = _component_box_ious(comps[0].bits, map_boxes)
        for comp in comps[1:]:
            best = np.maximum(best, _component_box_ious(comp.bits, map_boxes))
        col = best + tau0
        prior[:, k] = col / col.max()
    return prior


def reweight(dm: Tensor, dseg: np.ndarray) -> Tensor:
    """Re-weight instance scores by the segmentation prior (held constant)."""
    if dm.shape != dseg.shape:
        raise ValueError(f"shape mismatch: scores {dm.shape}, prior {dseg.shape}")
    return dm * Tensor(dseg)


def proposal_pixel_masks(
    proposals: ProposalSet, image_size: tuple[int, int], map_size: tuple[int, int]
) -> np.ndarray:
    """(B, h*w) 0/1 coverage of each proposal on the map grid; cacheable."""
    w, h = map_size
    masks = np.zeros((len(proposals), h * w))
    for i, corners in enumerate(scale_boxes_to_map(proposals, image_size, map_size)):
        x0, y0, x1, y1 = corners
        grid = np.zeros((h, w))
        grid[y0:y1, x0:x1] = 1.0
        masks[i] = grid.ravel()
    return masks


def build_sdet(
    d_values: np.ndarray,
    proposals: ProposalSet,
    y: np.ndarray,
    map_size: tuple[int, int],
    image_size: tuple[int, int],
    box_masks: np.ndarray | None = None,
) -> np.ndarray:
    """Detection heatmap (N+1, h, w): every proposal adds its class score to
    the pixels it covers; positive channels are max-normalized and the
    background channel is the complement of the foreground maximum.
    `box_masks` may carry precomputed pixel coverage for the proposal grid."""
    y = np.asarray(y)
    n_classes = y.size
    w, h = map_size
    if box_masks is None:
        box_masks = proposal_pixel_masks(proposals, image_size, map_size)
    heat = np.zeros((n_classes + 1, h, w))
    for k in np.flatnonzero(y):
        k = int(k)
        channel = (box_masks.T @ d_values[:, k]).reshape(h, w)
        peak = channel.max()
        heat[k] = channel / peak if peak > 0 else channel
    heat[n_classes] = 1.0 - heat[:n_classes].max(axis=0)
    return heat


def psi_labels(sdet: np.ndarray, keep_fraction: float = 0.10) -> np.ndarray:
    """Discretize a heatmap into sparse per-pixel labels.

    Each pixel first goes to its argmax channel (lowest channel on ties);
    within each channel's claimed set only the top floor(keep_fraction*h*w)
    pixels by heatmap value survive (at least one when the set is nonempty),
    the rest become IGNORE.
    """
    n_chan, h, w = sdet.shape
    winner = sdet.argmax(axis=0)
    budget = max(1, int(keep_fraction * h * w))
    labels = np.full((h, w), IGNORE, dtype=np.int64)
    flat_winner = winner.ravel()
    for k in range(n_chan):
        claimed = np.flatnonzero(flat_winner == k)
        if claimed.size == 0:
            continue
        vals = sdet[k].ravel()[claimed]
        order = np.argsort(-vals, kind="stable")  # ties: lowest flat index first
        keep = claimed[order[:budget]]
        labels.ravel()[keep] = k
    return labels


def seg_from_det_loss(seg_map: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of the segmentation map against pixel labels.

    The per-pixel class distribution is the channel softmax of the map's
    pre-sigmoid logits (recovered through the logit transform); IGNORE
    pixels contribute nothing.
    """
    ys, xs = np.nonzero(labels != IGNORE)
    if ys.size == 0:
        return Tensor(0.0)
    picked = labels[ys, xs]
    clamped = ad.clamp_guard(seg_map, ad.EPS, 1.0 - ad.EPS)
    logits = ad.log(clamped) - ad.log(1.0 - clamped)  # (N+1, h, w)
    pixel_logits = ad.transpose(logits[:, ys, xs])  # (P, N+1)
    log_probs = pixel_logits - ad.logsumexp(pixel_logits, axis=1)
    chosen = log_probs[np.arange(ys.size), picked]
    return -ad.tmean(chosen)


def total_objective(
    det_loss: Tensor,
    seg_loss: Tensor | None,
    seg_from_det: Tensor | None,
    lambda_seg: float = 0.1,
) -> Tensor:
    """Combined objective: detection branch plus segmentation branch plus the
    weighted detection-to-segmentation instruction term."""
    total = det_loss
    if seg_loss is not None:
        total = total + seg_loss
    if seg_from_det is not None:
        total = total + seg_from_det * lambda_seg
    return total
