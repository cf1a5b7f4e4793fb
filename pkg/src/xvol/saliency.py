"""Saliency heatmaps from forward-pass taps.

Two sources:

* channel-attention relevance: mean over the channels of an attention
  block's output, rectified and max-normalized — differentiable end to
  end, so it can participate in a training loss;
* 3D Grad-CAM: channel weights from the spatial mean of the class-score
  gradient at a conv tap, rectified weighted sum, max-normalized. The
  channel weights are treated as constants so no second-order gradients
  are needed; gradients still flow through the activations.

Export writes heatmaps as volume files plus mid-slice PGM images and
optional overlays for review.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import VolumeRecord, write_volume
from .errors import ConfigError, ShapeError
from .model import ForwardTrace
from .tensor import (
    Tensor,
    add,
    backward,
    concat_axis,
    div,
    mul,
    reduce_max,
    relu,
    reshape,
    split_axis,
    tmean,
    trilinear_upsample,
    tsum,
    zero_grads,
)

EPSILON = 1e-8


@dataclass
class Heatmap:
    """One [D,H,W] relevance volume in [0,1], still attached to the graph."""

    values: Tensor
    source: str  # "CARE" | "GradCAM"
    source_layer: str
    target_dims: tuple | None = None


def _normalize_item(x: Tensor, epsilon: float) -> Tensor:
    """relu then divide by (max + epsilon); per volume, graph-attached."""
    r = relu(x)
    return div(r, add(reduce_max(r), epsilon))


def _per_item(batched: Tensor, epsilon: float) -> Tensor:
    """Max-normalize each batch item of a [B,d,h,w] tensor independently."""
    items = split_axis(batched, 0, batched.shape[0])
    return concat_axis([_normalize_item(it, epsilon) for it in items], 0)


def care_map(ca0: Tensor, epsilon: float = EPSILON) -> Tensor:
    """Channel-mean relevance of an attention tap, as a [B,d,h,w] tensor."""
    if ca0.data.ndim != 5:
        raise ShapeError(f"attention tap must be [B,C,d,h,w], got {ca0.shape}")
    return _per_item(tmean(ca0, axis=1), epsilon)


def care(ca0: Tensor, target_dims=None, epsilon: float = EPSILON, source_layer: str = "") -> list:
    """Per-item channel-attention heatmaps, optionally upsampled for review."""
    maps = care_map(ca0, epsilon)
    return _wrap(maps, "CARE", source_layer, target_dims)


def gradcam_weights(trace: ForwardTrace, class_c, layer: str) -> np.ndarray:
    """Spatial-mean gradient of the class logit at a tap, as [B,C] constants.

    ``class_c`` is 0, 1, or "pred" (each item's argmax logit). Runs its own
    backward pass over the trace graph and clears the gradients afterwards,
    so it can precede a training backward on the same graph.
    """
    if layer not in trace.taps:
        raise ConfigError(
            f"no tap named {layer!r} in this trace; available: {sorted(trace.taps)}"
        )
    logits = trace.logits
    b = logits.shape[0]
    if class_c == "pred":
        idx = np.argmax(logits.data, axis=1)
    else:
        idx = np.full(b, int(class_c))
    mask = np.zeros_like(logits.data)
    mask[np.arange(b), idx] = 1.0
    zero_grads(logits)
    backward(tsum(mul(logits, Tensor(mask))))
    tap = trace.taps[layer]
    if tap.grad is None:
        raise ConfigError(
            f"tap {layer!r} received no gradient; run forward with taps attached to the class score"
        )
    weights = tap.grad.mean(axis=(2, 3, 4)).copy()
    zero_grads(logits)
    return weights


def gradcam_map(tap: Tensor, weights: np.ndarray, epsilon: float = EPSILON) -> Tensor:
    """Weighted-sum relevance of a conv tap, [B,d,h,w], graph-attached.

    ``weights`` enters as a constant [B,C] array, so gradients flow only
    through the tap activations.
    """
    b, c = tap.shape[:2]
    if weights.shape != (b, c):
        raise ShapeError(f"weights shape {weights.shape} does not match tap {tap.shape}")
    weighted = mul(tap, Tensor(weights.reshape(b, c, 1, 1, 1)))
    return _per_item(tsum(weighted, axis=1), epsilon)


def gradcam3d(trace: ForwardTrace, class_c=1, layer: str = "conv5",
              target_dims=None, epsilon: float = EPSILON) -> list:
    """Per-item 3D Grad-CAM heatmaps for one class from a conv tap."""
    weights = gradcam_weights(trace, class_c, layer)
    maps = gradcam_map(trace.taps[layer], weights, epsilon)
    return _wrap(maps, "GradCAM", layer, target_dims)


def _wrap(maps: Tensor, source: str, layer: str, target_dims) -> list:
    out = []
    for item in split_axis(maps, 0, maps.shape[0]):
        if target_dims is not None:
            item5 = reshape(item, (1, 1, *item.shape[1:]))
            item = reshape(trilinear_upsample(item5, tuple(target_dims)), (1, *target_dims))
        out.append(Heatmap(values=reshape(item, item.shape[1:]), source=source,
                           source_layer=layer, target_dims=target_dims))
    return out


def align_grids(h_care: Tensor, h_cam: Tensor) -> tuple:
    """Resample the channel-attention map onto the Grad-CAM grid if the
    two taps differ in spatial shape."""
    if h_care.shape == h_cam.shape:
        return h_care, h_cam
    b = h_care.shape[0]
    target = h_cam.shape[1:]
    care5 = reshape(h_care, (b, 1, *h_care.shape[1:]))
    return reshape(trilinear_upsample(care5, target), (b, *target)), h_cam


# ---------------------------------------------------------------------------
# export


def _binary_morphology(values: np.ndarray, mode: str) -> np.ndarray:
    """One 6-neighborhood round of erosion or dilation on the support mask,
    applied multiplicatively. Visualization-only."""
    mask = values > 0
    shifted = [mask]
    for axis in range(3):
        for step in (1, -1):
            shifted.append(np.roll(mask, step, axis=axis))
    stack = np.stack(shifted)
    new_mask = stack.all(axis=0) if mode == "erode" else stack.any(axis=0)
    if mode == "dilate":
        # fill newly exposed voxels with the local maximum of their neighbors
        vals = np.stack([values] + [np.roll(values, s, axis=a) for a in range(3) for s in (1, -1)])
        return np.where(new_mask, vals.max(axis=0), 0.0)
    return np.where(new_mask, values, 0.0)


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM from a [rows, cols] array in [0,1]."""
    quant = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{quant.shape[1]} {quant.shape[0]}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w) / 255.0


def export_heatmap(heatmap: Heatmap, path, volume: VolumeRecord | None = None,
                   morphology: bool = False, slice_index: tuple | None = None) -> list:
    """Write a heatmap volume plus axial/coronal mid-slice PGMs.

    Returns the written paths. With a source volume, also writes overlay
    slices (heatmap alpha-blended at 0.5 over the min-max-scaled volume).
    ``morphology`` applies one round of erosion (channel-attention maps) or
    dilation (Grad-CAM maps) to the exported images only.
    """
    path = Path(path)
    stem = path.with_suffix("")
    values = np.asarray(heatmap.values.data, dtype=float)
    written = []
    write_volume(VolumeRecord(values=values[None], label=0), path)
    written.append(path)

    display = values
    if morphology:
        display = _binary_morphology(values, "erode" if heatmap.source == "CARE" else "dilate")
    d, h, _w = display.shape
    ax, co = slice_index if slice_index is not None else (d // 2, h // 2)
    slices = {"axial": display[ax], "coronal": display[:, co]}
    for name, img in slices.items():
        p = Path(f"{stem}.{name}.pgm")
        write_pgm(img, p)
        written.append(p)
    if volume is not None:
        vol = np.asarray(volume.values[0], dtype=float)
        lo, hi = vol.min(), vol.max()
        scaled = (vol - lo) / (hi - lo) if hi > lo else np.zeros_like(vol)
        for name, (hm_img, vol_img) in {
            "axial": (display[ax], scaled[ax]),
            "coronal": (display[:, co], scaled[:, co]),
        }.items():
            p = Path(f"{stem}.overlay.{name}.pgm")
            # per-pixel alpha 0.5*heatmap: zero heatmap leaves the volume as-is
            alpha = 0.5 * hm_img
            write_pgm(alpha + (1.0 - alpha) * vol_img, p)
            written.append(p)
    return written
