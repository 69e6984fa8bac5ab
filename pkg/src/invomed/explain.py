"""Explainability exports: involution kernel maps and Grad-CAM.

Both produce a :class:`Heatmap` whose values are min-max normalized to
[0, 1] (constant maps collapse to all zeros) and bilinearly upsampled
to the source image size. Writers emit 8-bit PGM (gray) or PPM
(palette) files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as M
from .autodiff import Tape, backward
from .data import resize_bilinear
from .models import Model
from .ops import mul, tsum

__all__ = ["Heatmap", "grad_cam", "involution_kernel_map", "write_heatmap"]


@dataclass
class Heatmap:
    values: np.ndarray  # [H,W] in [0,1]
    provenance: tuple   # (model kind, layer name, input id)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def _as_batch(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3:
        raise ValueError("image must be [H,W,C]")
    return image[None]


def involution_kernel_map(model: Model, image: np.ndarray, layer_name: str,
                          reduction: str = "center_tap",
                          input_id: str = "input") -> Heatmap:
    """Collapse the per-position generated kernels to a 2-D response map.

    ``center_tap`` takes the kernel value at the spatial center (group
    mean); ``l2_norm`` the Euclidean norm over the full K x K x G block.
    """
    spec = model.layer(layer_name)
    if spec.kind != "involution":
        raise ValueError(f"layer '{layer_name}' is {spec.kind}, not involution")
    if reduction not in ("center_tap", "l2_norm"):
        raise ValueError(f"unknown reduction '{reduction}'")
    tape = Tape()
    M.forward(model, tape.leaf(_as_batch(image)), mode="infer")
    kernels = tape.nodes[tape.find(layer_name).nid].ctx["kernels"][0]
    k = spec.cfg["kernel_size"]
    if reduction == "center_tap":
        values = kernels[:, :, k // 2, k // 2, :].mean(axis=-1)
    else:
        values = np.sqrt((kernels ** 2).sum(axis=(2, 3, 4)))
    h, w = image.shape[:2]
    values = resize_bilinear(values[..., None], h, w)[..., 0]
    return Heatmap(minmax_normalize(values), (model.kind, layer_name, input_id))


def grad_cam(model: Model, image: np.ndarray, target, layer_name: str,
             input_id: str = "input") -> Heatmap:
    """Gradient-weighted class activation map over one layer's output.

    ``target`` is a class index for classifiers; for segmentation
    models it is a binary mask array (or None for the predicted mask)
    and the score is the mean pre-sigmoid logit inside that region.
    Channel weights are the spatial means of d(score)/d(activation);
    the weighted activation sum is ReLU'd, upsampled and normalized.
    """
    spec = model.layer(layer_name)  # raises KeyError for unknown layers
    tape = Tape()
    out = M.forward(model, tape.leaf(_as_batch(image)), mode="infer")
    act = tape.find(layer_name)
    if np.ndim(act.value) != 4:
        raise ValueError(f"layer '{layer_name}' output is not a spatial feature map")
    if model.kind in ("medic-cls", "cnn", "inn"):
        logits = tape.find("classifier")
        num_classes = logits.value.shape[1]
        idx = int(target)
        if not 0 <= idx < num_classes:
            raise ValueError(f"class index {idx} out of range")
        onehot = np.zeros_like(logits.value)
        onehot[0, idx] = 1.0
        score = tsum(mul(logits, onehot))
    elif model.kind == "medic-seg":
        logits = tape.find("head_logits")
        if target is None:
            region = (np.asarray(out.value) >= 0.5).astype(np.float64)
        else:
            region = np.asarray(target, dtype=np.float64).reshape(logits.value.shape)
        count = max(float(region.sum()), 1.0)
        score = tsum(mul(logits, region / count))
    else:
        raise ValueError(f"unsupported model kind '{model.kind}'")
    grads = backward(tape, score)
    g = grads.get(act.nid)
    if g is None:
        raise ValueError(f"layer '{layer_name}' does not influence the score")
    alpha = g[0].mean(axis=(0, 1))  # [c]
    cam = np.maximum(act.value[0] @ alpha, 0.0)
    h, w = image.shape[:2]
    cam = resize_bilinear(cam[..., None], h, w)[..., 0]
    return Heatmap(minmax_normalize(cam), (model.kind, layer_name, input_id))


# viridis-like anchors (dark purple -> teal -> yellow)
_PALETTE_ANCHORS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=np.float64)


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)  # round half up


def write_heatmap(heatmap: Heatmap, path: str, palette: str = "gray") -> None:
    """Write a normalized heatmap as 8-bit PGM (gray) or PPM (palette)."""
    from .data import write_pnm

    v = np.asarray(heatmap.values, dtype=np.float64)
    if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
        raise ValueError("heatmap must be normalized to [0, 1]")
    if palette == "gray":
        write_pnm(path, _quantize(v))
    elif palette == "viridis-like":
        pos = np.clip(v, 0.0, 1.0) * (len(_PALETTE_ANCHORS) - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, len(_PALETTE_ANCHORS) - 1)
        frac = (pos - lo)[..., None]
        rgb = _PALETTE_ANCHORS[lo] * (1 - frac) + _PALETTE_ANCHORS[hi] * frac
        write_pnm(path, np.floor(rgb + 0.5).astype(np.uint8))
    else:
        raise ValueError(f"unknown palette '{palette}'")
