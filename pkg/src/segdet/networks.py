"""Toy network definitions, parameter initialization, and checkpoint I/O.

Four components share one flat parameter store keyed by dotted names:
  ext.*  feature extractor, three 3x3 convs with one stride-2 step
  det.*  detection streams and three refinement heads (single linears)
  seg.*  segmentation head, two convs + sigmoid
  cls.*  adversary image classifier, two convs + GAP + linear + sigmoid
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1

SDCN_PREFIXES = ("ext.", "det.", "seg.")
CLASSIFIER_PREFIX = "cls."


def _conv_init(rng, cout: int, cin: int, k: int = 3) -> np.ndarray:
    return rng.normal(size=(cout, cin, k, k)) / np.sqrt(cin * k * k)


def _linear_init(rng, cin: int, cout: int) -> np.ndarray:
    return rng.normal(size=(cin, cout)) / np.sqrt(cin)


def init_params(
    n_classes: int,
    channels: int = 8,
    seg_channels: int = 8,
    cls_channels: int = 8,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Fresh parameter arrays; each component draws from its own seed stream
    so a component's initialization is independent of which others exist."""
    c, cs, cc, n = channels, seg_channels, cls_channels, n_classes
    ext_rng = np.random.default_rng([seed, 1])
    det_rng = np.random.default_rng([seed, 2])
    seg_rng = np.random.default_rng([seed, 3])
    cls_rng = np.random.default_rng([seed, 4])
    params: dict[str, np.ndarray] = {
        "ext.c1.w": _conv_init(ext_rng, c, 1),
        "ext.c1.b": np.zeros(c),
        "ext.c2.w": _conv_init(ext_rng, c, c),
        "ext.c2.b": np.zeros(c),
        "ext.c3.w": _conv_init(ext_rng, c, c),
        "ext.c3.b": np.zeros(c),
        "det.cls.w": _linear_init(det_rng, c, n),
        "det.cls.b": np.zeros(n),
        "det.sel.w": _linear_init(det_rng, c, n),
        "det.sel.b": np.zeros(n),
        "seg.c1.w": _conv_init(seg_rng, cs, c),
        "seg.c1.b": np.zeros(cs),
        "seg.c2.w": _conv_init(seg_rng, n + 1, cs),
        "seg.c2.b": np.zeros(n + 1),
        "cls.c1.w": _conv_init(cls_rng, cc, 1),
        "cls.c1.b": np.zeros(cc),
        "cls.c2.w": _conv_init(cls_rng, cc, cc),
        "cls.c2.b": np.zeros(cc),
        "cls.fc.w": _linear_init(cls_rng, cc, n),
        "cls.fc.b": np.zeros(n),
    }
    for k in (1, 2, 3):
        params[f"det.r{k}.w"] = _linear_init(det_rng, c, n + 1)
        params[f"det.r{k}.b"] = np.zeros(n + 1)
    return params


def lift(
    arrays: dict[str, np.ndarray],
    trainable_prefixes: tuple[str, ...] = (),
) -> dict[str, Tensor]:
    """Wrap arrays as graph leaves; only matching prefixes require gradients."""
    return {
        name: Tensor(arr, requires_grad=name.startswith(trainable_prefixes))
        for name, arr in arrays.items()
    }


def extractor_forward(image: Tensor, params) -> Tensor:
    """(1, H, W) image -> (C, H/2, W/2) feature map."""
    h = ad.tanh(ad.conv2d(image, params["ext.c1.w"], params["ext.c1.b"]))
    h = ad.tanh(ad.conv2d(h, params["ext.c2.w"], params["ext.c2.b"], stride=2))
    return ad.tanh(ad.conv2d(h, params["ext.c3.w"], params["ext.c3.b"]))


def classifier_forward(image: Tensor, params) -> Tensor:
    """(1, H, W) image -> (N,) independent class probabilities."""
    h = ad.tanh(ad.conv2d(image, params["cls.c1.w"], params["cls.c1.b"], stride=2))
    h = ad.tanh(ad.conv2d(h, params["cls.c2.w"], params["cls.c2.b"]))
    pooled = ad.reshape(ad.tmean(h, axis=(1, 2)), (1, -1))
    logits = pooled @ params["cls.fc.w"] + params["cls.fc.b"]
    return ad.reshape(ad.sigmoid(logits), (-1,))


def make_classifier_fn(params):
    """Callable image -> probabilities over the given parameter tensors."""

    def classify(image: Tensor) -> Tensor:
        return classifier_forward(image, params)

    return classify


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned npz container; float64 arrays round-trip bit-exactly."""
    payload: dict[str, np.ndarray] = {f"param/{k}": v for k, v in arrays.items()}
    if velocities:
        payload.update({f"vel/{k}": v for k, v in velocities.items()})
    header = {"version": CHECKPOINT_VERSION}
    header.update(meta or {})
    payload["meta"] = np.array(json.dumps(header, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path: str | Path):
    """Returns (arrays, velocities, meta)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        velocities = {}
        for key in data.files:
            if key.startswith("param/"):
                arrays[key[len("param/") :]] = data[key]
            elif key.startswith("vel/"):
                velocities[key[len("vel/") :]] = data[key]
    return arrays, velocities, meta
