"""Three-stage training schedule and the per-iteration collaboration loop.

Stage 1 trains the adversary classifier alone at a fixed learning rate.
Stage 2 pretrains the detection and segmentation branches without any
collaboration terms. Stage 3 couples them: each iteration forwards all
modules, generates the exchange variables (segmentation prior, detection
heatmap, pseudo labels) as constants, backprops the combined objective into
the shared trunk, and then gives the classifier its own adversarial step.

Testing uses only the extractor and the refinement heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import collaboration as col
from . import detection as det
from . import networks as nets
from . import segmentation as segm
from .autodiff import Tensor
from .datasynth import Sample
from .evaluation import Detection
from .geometry import ProposalSet, generate_proposals, nms


class TrainingDivergence(RuntimeError):
    """Raised when a loss goes non-finite; carries the iteration context."""

    def __init__(self, stage: str, iteration: int, losses: dict):
        super().__init__(f"non-finite loss at {stage} iteration {iteration}: {losses}")
        self.stage = stage
        self.iteration = iteration
        self.losses = losses


@dataclass
class Switches:
    """Ablation switches mirroring the four strategy rows."""

    seg_branch: bool = True
    collab_s2d: bool = True
    collab_d2s: bool = True

    def row_name(self) -> str:
        if not self.seg_branch:
            return "detection_only"
        if self.collab_s2d and self.collab_d2s:
            return "full_collaboration"
        if self.collab_s2d:
            return "seg_instructs_det"
        return "multi_task"


@dataclass
class TrainConfig:
    """All knobs of the run; defaults follow the reference regime where one exists."""

    # loss weights
    lambda_adv: float = 1.0
    lambda_cls: float = 0.1
    lambda_seg: float = 0.1
    lambda_mil: float = 1.0
    lambda_ref: float = 1.0
    # collaboration constants
    tau0: float = 0.5
    bin_thresh: float = 0.5
    kappa_iou: float = 0.5
    topk_fraction: float = 0.2
    keep_fraction: float = 0.10
    # proposals
    proposal_scales: tuple[int, ...] = (5, 8, 11, 14, 18)
    aspect_ratios: tuple[float, ...] = (1.0,)
    proposal_stride: float = 0.45
    # architecture
    channels: int = 8
    seg_channels: int = 8
    cls_channels: int = 8
    # schedule
    momentum: float = 0.9
    classifier_lr: float = 0.03
    classifier_iters: int = 1200
    plateau_tol: float = 1e-3
    pretrain_iters: int = 600
    lr_phase1: float = 0.05
    iters_phase1: int = 2000
    lr_phase2: float = 0.005
    iters_phase2: int = 1500
    # inference
    score_thresh: float = 0.1
    nms_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_cls", "lambda_seg", "lambda_mil", "lambda_ref"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("topk_fraction", "keep_fraction", "proposal_stride"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        for name in ("classifier_lr", "lr_phase1", "lr_phase2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("classifier_iters", "pretrain_iters", "iters_phase1", "iters_phase2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainLog:
    """Per-step records plus the SDCN/classifier alternation order."""

    steps: list[dict] = field(default_factory=list)
    step_order: list[str] = field(default_factory=list)

    def record(self, kind: str, stage: str, iteration: int, losses: dict):
        self.step_order.append(kind)
        self.steps.append({"kind": kind, "stage": stage, "iteration": iteration, **losses})


class MomentumSgd:
    """Plain SGD with momentum over a named parameter dict."""

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for name, grad in grads.items():
            v = self.velocities.get(name)
            v = grad if v is None else self.momentum * v + grad
            self.velocities[name] = v
            arrays[name] = arrays[name] - lr * v


class Trainer:
    """Owns the parameter store, optimizer state, and the iteration loop."""

    def __init__(self, train_samples: list[Sample], config: TrainConfig, switches: Switches):
        if not train_samples:
            raise ValueError("empty training set")
        self.samples = train_samples
        self.config = config
        self.switches = switches
        size = train_samples[0].image.shape[0]
        self.image_size = size
        self.map_size = size // 2
        self.n_classes = train_samples[0].y.size
        self.proposals = generate_proposals(
            size, size, list(config.proposal_scales), list(config.aspect_ratios),
            config.proposal_stride,
        )
        self.pool_mat = det.pooling_matrix(
            self.proposals, (size, size), (self.map_size, self.map_size)
        )
        self.map_boxes = col.scale_boxes_to_map(
            self.proposals, (size, size), (self.map_size, self.map_size)
        )
        self.box_masks = col.proposal_pixel_masks(
            self.proposals, (size, size), (self.map_size, self.map_size)
        )
        self.arrays = nets.init_params(
            self.n_classes,
            channels=config.channels,
            seg_channels=config.seg_channels,
            cls_channels=config.cls_channels,
            seed=config.seed,
        )
        self.sdcn_opt = MomentumSgd(config.momentum)
        self.cls_opt = MomentumSgd(config.momentum)
        self.log = TrainLog()
        self.iteration = 0  # global SDCN-stage iteration counter (stages 2 and 3)

    # ----- stage 1: classifier ---------------------------------------------

    def classifier_stage(self) -> None:
        """Train the adversary on plain image classification until the loss
        plateaus (epoch-mean comparison) or the iteration cap."""
        cfg = self.config
        recent: list[float] = []
        epoch = len(self.samples)
        for it in range(cfg.classifier_iters):
            sample = self.samples[it % epoch]
            params = nets.lift(self.arrays, trainable_prefixes=(nets.CLASSIFIER_PREFIX,))
            image = Tensor(sample.image[None, :, :])
            loss = ad.bce(nets.classifier_forward(image, params), sample.y.astype(float))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence("classifier", it, {"bce": value})
            loss.backward()
            self._apply(self.cls_opt, params, cfg.classifier_lr, nets.CLASSIFIER_PREFIX)
            self.log.record("classifier_pretrain", "classifier", it, {"loss": value})
            recent.append(value)
            # compare whole epochs so both windows cover the same samples
            if len(recent) >= 2 * epoch and (it + 1) % epoch == 0:
                if np.mean(recent[-epoch:]) > np.mean(recent[-2 * epoch : -epoch]) - cfg.plateau_tol:
                    break

    # ----- stages 2/3: branch training --------------------------------------

    def branch_stage(self, iters: int, lr: float, stage: str, collaborate: bool) -> None:
        """Run the detection/segmentation alternation for `iters` iterations.

        `collaborate` gates both instruction directions; the configured
        switches decide which of them actually fire.
        """
        sw = self.switches
        s2d = collaborate and sw.seg_branch and sw.collab_s2d
        d2s = collaborate and sw.seg_branch and sw.collab_d2s
        for _ in range(iters):
            sample = self.samples[self.iteration % len(self.samples)]
            losses, seg_values = self._sdcn_step(sample, lr, stage, s2d=s2d, d2s=d2s)
            self.log.record("sdcn", stage, self.iteration, losses)
            if sw.seg_branch:
                cls_loss = self._classifier_step(sample, seg_values, stage)
                self.log.record("classifier", stage, self.iteration, {"loss": cls_loss})
            self.iteration += 1

    def _sdcn_step(self, sample: Sample, lr: float, stage: str, s2d: bool, d2s: bool):
        cfg = self.config
        sw = self.switches
        params = nets.lift(self.arrays, trainable_prefixes=nets.SDCN_PREFIXES)
        frozen_cls = nets.lift(self.arrays)  # adversary constant in this pass
        image = Tensor(sample.image[None, :, :])
        y = sample.y

        feats = nets.extractor_forward(image, params)
        pooled = det.pool_proposals(feats, self.pool_mat)
        midn = det.midn_forward(pooled, params)

        seg_map = None
        if sw.seg_branch:
            seg_map = segm.seg_forward(feats, params)

        if s2d:
            dseg = col.build_dseg(
                seg_map.values, self.proposals, y,
                (self.image_size, self.image_size), cfg.tau0, cfg.bin_thresh,
                map_boxes=self.map_boxes,
            )
            dm = col.reweight(midn.dm, dseg)
        else:
            dm = midn.dm
        mil = det.mil_loss(dm, y)

        losses = {"mil": mil.item()}
        if cfg.lambda_ref > 0:
            refine = det.refine_forward(pooled, params)
            chain = det.chain_labels(
                dm.values, [h.values for h in refine.heads], y, self.proposals, cfg.kappa_iou
            )
            ref = det.refinement_loss(refine.heads[0], chain[0])
            for head, labels in zip(refine.heads[1:], chain[1:]):
                ref = ref + det.refinement_loss(head, labels)
            det_total = det.branch_loss(mil, ref, cfg.lambda_mil, cfg.lambda_ref)
            losses["ref"] = ref.item()
        else:
            refine = None
            det_total = mil * cfg.lambda_mil

        seg_total = None
        seg_from_det = None
        if sw.seg_branch:
            record = segm.seg_branch_loss(
                seg_map, image, nets.make_classifier_fn(frozen_cls), y,
                cfg.lambda_adv, cfg.lambda_cls, cfg.topk_fraction,
            )
            seg_total = record.total
            losses["seg"] = seg_total.item()
            if d2s and refine is not None:
                sdet = col.build_sdet(
                    refine.mean.values, self.proposals, y,
                    (self.map_size, self.map_size), (self.image_size, self.image_size),
                    box_masks=self.box_masks,
                )
                pixel_labels = col.psi_labels(sdet, cfg.keep_fraction)
                seg_from_det = col.seg_from_det_loss(seg_map, pixel_labels)
                losses["seg_from_det"] = seg_from_det.item()

        total = col.total_objective(det_total, seg_total, seg_from_det, cfg.lambda_seg)
        value = total.item()
        losses["total"] = value
        if not np.isfinite(value):
            raise TrainingDivergence(stage, self.iteration, losses)
        total.backward()
        self._apply(self.sdcn_opt, params, lr, nets.SDCN_PREFIXES)
        return losses, None if seg_map is None else seg_map.values

    def _classifier_step(self, sample: Sample, seg_values: np.ndarray, stage: str) -> float:
        """Adversary turn: uses the maps from this iteration's forward pass."""
        params = nets.lift(self.arrays, trainable_prefixes=(nets.CLASSIFIER_PREFIX,))
        image = Tensor(sample.image[None, :, :])
        loss = segm.classifier_loss(
            image, Tensor(seg_values), nets.make_classifier_fn(params), sample.y
        )
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergence(stage, self.iteration, {"classifier": value})
        loss.backward()
        self._apply(self.cls_opt, params, self.config.classifier_lr, nets.CLASSIFIER_PREFIX)
        return value

    def _apply(self, opt: MomentumSgd, params: dict[str, Tensor], lr: float, prefixes) -> None:
        grads = {}
        for name, tensor in params.items():
            if not name.startswith(prefixes):
                continue
            grads[name] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
        opt.step(self.arrays, grads, lr)
        for arr in grads:
            if not np.isfinite(self.arrays[arr]).all():
                raise TrainingDivergence("update", self.iteration, {"param": arr})


# ----- spec-level stage entry points ----------------------------------------


def train_classifier_stage(samples: list[Sample], config: TrainConfig, switches: Switches | None = None) -> Trainer:
    trainer = Trainer(samples, config, switches or Switches())
    if trainer.switches.seg_branch:
        trainer.classifier_stage()
    return trainer


def pretrain_branches(trainer: Trainer) -> Trainer:
    trainer.branch_stage(
        trainer.config.pretrain_iters, trainer.config.lr_phase1, "pretrain", collaborate=False
    )
    return trainer


def train_collaborative(trainer: Trainer) -> Trainer:
    trainer.branch_stage(
        trainer.config.iters_phase1, trainer.config.lr_phase1, "collab", collaborate=True
    )
    trainer.branch_stage(
        trainer.config.iters_phase2, trainer.config.lr_phase2, "collab", collaborate=True
    )
    return trainer


def run_full_training(samples: list[Sample], config: TrainConfig, switches: Switches) -> Trainer:
    """The three-step schedule, honoring the ablation switches."""
    trainer = train_classifier_stage(samples, config, switches)
    pretrain_branches(trainer)
    train_collaborative(trainer)
    return trainer


# ----- inference -------------------------------------------------------------


def infer(
    image: np.ndarray,
    arrays: dict[str, np.ndarray],
    config: TrainConfig,
    proposals: ProposalSet,
    pool_mat: np.ndarray,
    image_id: int = 0,
) -> list[Detection]:
    """Score proposals with the refinement-head average, threshold, and NMS.

    Touches only extractor and refinement parameters; the instance scorer,
    segmentation head, and classifier take no part in testing.
    """
    needed = [f"ext.c{i}.{p}" for i in (1, 2, 3) for p in ("w", "b")]
    needed += [f"det.r{k}.{p}" for k in (1, 2, 3) for p in ("w", "b")]
    params = {name: Tensor(arrays[name]) for name in needed}
    feats = nets.extractor_forward(Tensor(image[None, :, :]), params)
    pooled = det.pool_proposals(feats, pool_mat)
    mean_scores = det.refine_forward(pooled, params).mean.values
    n = mean_scores.shape[1] - 1
    detections: list[Detection] = []
    for k in range(n):
        scores = mean_scores[:, k]
        picked = np.flatnonzero(scores >= config.score_thresh)
        if picked.size == 0:
            continue
        boxes = [proposals[int(i)] for i in picked]
        keep = nms(boxes, scores[picked], config.nms_iou)
        for j in keep:
            idx = int(picked[j])
            detections.append(
                Detection(
                    image_id=image_id,
                    box=proposals[idx],
                    class_id=k,
                    score=float(min(scores[idx], 1.0)),
                )
            )
    return detections


def build_infer_context(config: TrainConfig, image_size: int):
    """Proposal grid and pooling operator for checkpoint-only inference."""
    proposals = generate_proposals(
        image_size, image_size, list(config.proposal_scales),
        list(config.aspect_ratios), config.proposal_stride,
    )
    pool_mat = det.pooling_matrix(
        proposals, (image_size, image_size), (image_size // 2, image_size // 2)
    )
    return proposals, pool_mat


def evaluate_detector(
    samples: list[Sample],
    arrays: dict[str, np.ndarray],
    config: TrainConfig,
    proposals: ProposalSet,
    pool_mat: np.ndarray,
) -> list[Detection]:
    """Run inference over a split; detection image ids are sample indices."""
    out: list[Detection] = []
    for s in samples:
        out.extend(infer(s.image, arrays, config, proposals, pool_mat, image_id=s.index))
    return out
