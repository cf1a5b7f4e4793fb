"""Anatomically paired channel-wise cross-attention.

Three variants operate on a feature volume [B,C,D,H,W]:

* hemiretinal: depth-axis halves (superior/inferior),
* nerve/macula: width-axis halves,
* combined: depth x width quarters with two pairings (within-hemiretina
  and within-ONH/macula half), summed with the input skip.

Attention is channel-token attention: each region is flattened to [B,C,N]
and the C x C score matrix softmaxed over the key-channel axis, scaled by
1/sqrt(N). One (Q,K,V) projection set is shared by both directions of a
pair, so identical halves give identical directional outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import config
from .errors import ShapeError
from .tensor import (
    Tensor,
    add,
    concat_axis,
    conv3d,
    dropout3d,
    matmul_batched,
    maxpool3d,
    reshape,
    softmax_axis,
    split_axis,
    transpose,
)

VARIANTS = ("H", "NA", "H_NA")


@dataclass
class AttentionWeights:
    """1x1x1 projection parameters for one pairing; all map C -> C channels."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_refine: Tensor | None = None
    b_refine: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for key in ("q", "k", "v"):
            out[f"{prefix}.w_{key}"] = getattr(self, f"w_{key}")
            out[f"{prefix}.b_{key}"] = getattr(self, f"b_{key}")
        if self.w_refine is not None:
            out[f"{prefix}.w_refine"] = self.w_refine
            out[f"{prefix}.b_refine"] = self.b_refine
        return out


def init_attention_weights(channels: int, rng: np.random.Generator, refine: bool = True) -> AttentionWeights:
    """Kaiming-uniform 1x1x1 projections (fan-in = channels)."""
    bound = float(np.sqrt(6.0 / channels))
    dt = config.dtype()

    def w():
        return Tensor(rng.uniform(-bound, bound, size=(channels, channels, 1, 1, 1)).astype(dt), requires_grad=True)

    def b():
        return Tensor(rng.uniform(-bound, bound, size=channels).astype(dt), requires_grad=True)

    kwargs = {}
    if refine:
        kwargs = {"w_refine": w(), "b_refine": b()}
    return AttentionWeights(w_q=w(), b_q=b(), w_k=w(), b_k=b(), w_v=w(), b_v=b(), **kwargs)


@dataclass
class AttentionVariant:
    kind: str  # "H" | "NA" | "H_NA"

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ShapeError(f"unknown attention variant {self.kind!r}, expected one of {VARIANTS}")

    def check_dims(self, shape: tuple) -> None:
        _, _, d, _, w = shape
        if self.kind in ("H", "H_NA") and d % 2:
            raise ShapeError(f"variant {self.kind} needs an even depth axis, got extent {d}")
        if self.kind in ("NA", "H_NA") and w % 2:
            raise ShapeError(f"variant {self.kind} needs an even width axis, got extent {w}")


@dataclass
class AttentionOutput:
    fused: Tensor
    directional: dict[str, Tensor] = field(default_factory=dict)
    post_block: Tensor | None = None


def _flatten(x: Tensor) -> Tensor:
    b, c = x.shape[0], x.shape[1]
    return reshape(x, (b, c, -1))


def channel_cross_attention(a: Tensor, b: Tensor, weights: AttentionWeights) -> tuple[Tensor, Tensor]:
    """Bidirectional channel attention between two same-shape regions.

    Returns (A_ab, A_ba): A_ab uses queries from ``a`` against keys/values
    from ``b``; A_ba reverses the roles with the same projection weights.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cross-attention regions differ in shape: {a.shape} vs {b.shape}")
    n = int(np.prod(a.shape[2:]))
    scale = 1.0 / float(np.sqrt(n))

    def one_direction(q_src: Tensor, kv_src: Tensor) -> Tensor:
        q = _flatten(conv3d(q_src, weights.w_q, weights.b_q, stride=1, padding=0))
        k = _flatten(conv3d(kv_src, weights.w_k, weights.b_k, stride=1, padding=0))
        v = _flatten(conv3d(kv_src, weights.w_v, weights.b_v, stride=1, padding=0))
        score = matmul_batched(q, transpose(k, (0, 2, 1))) * scale
        attn = softmax_axis(score, 2)
        return reshape(matmul_batched(attn, v), q_src.shape)

    return one_direction(a, b), one_direction(b, a)


def ca_pair_split(iv: Tensor, axis: int, weights: AttentionWeights, labels: tuple[str, str]) -> AttentionOutput:
    """Split along one axis, cross-attend the halves, reassemble, add skip."""
    extent = iv.shape[axis]
    if extent % 2:
        axis_name = {2: "depth", 4: "width"}.get(axis, str(axis))
        raise ShapeError(f"{axis_name} axis extent {extent} must be even to split into halves")
    first, second = split_axis(iv, axis, 2)
    a_fs, a_sf = channel_cross_attention(first, second, weights)
    fused = add(concat_axis([a_fs, a_sf], axis), iv)
    return AttentionOutput(fused=fused, directional={labels[0]: a_fs, labels[1]: a_sf})


def ca_h(iv: Tensor, weights: AttentionWeights) -> AttentionOutput:
    """Hemiretinal cross-attention: superior/inferior depth halves."""
    return ca_pair_split(iv, 2, weights, ("SI", "IS"))


def ca_na(iv: Tensor, weights: AttentionWeights) -> AttentionOutput:
    """ONH/macula cross-attention: width halves."""
    return ca_pair_split(iv, 4, weights, ("OM", "MO"))


def ca_hna(iv: Tensor, weights_supinf: AttentionWeights, weights_maconh: AttentionWeights) -> AttentionOutput:
    """Four-way quarter-volume cross-attention with two pairings.

    Quarters: SO (superior/ONH), SM, IO, IM; ONH is the first width half.
    Pairing one attends within each hemiretina (SO<->SM, IO<->IM), pairing
    two within each width half (SO<->IO, SM<->IM). The two reassembled
    pairing volumes and the input are summed.
    """
    _, _, d, _, w = iv.shape
    if d % 2 or w % 2:
        raise ShapeError(f"four-way split needs even depth and width, got extents {d} and {w}")
    sup, inf = split_axis(iv, 2, 2)
    so, sm = split_axis(sup, 4, 2)
    io, im = split_axis(inf, 4, 2)

    a_so_sm, a_sm_so = channel_cross_attention(so, sm, weights_supinf)
    a_io_im, a_im_io = channel_cross_attention(io, im, weights_supinf)
    supinf = concat_axis(
        [concat_axis([a_so_sm, a_sm_so], 4), concat_axis([a_io_im, a_im_io], 4)], 2
    )

    a_so_io, a_io_so = channel_cross_attention(so, io, weights_maconh)
    a_sm_im, a_im_sm = channel_cross_attention(sm, im, weights_maconh)
    maconh = concat_axis(
        [concat_axis([a_so_io, a_sm_im], 4), concat_axis([a_io_so, a_im_sm], 4)], 2
    )

    fused = add(add(supinf, maconh), iv)
    directional = {
        "SO_SM": a_so_sm, "SM_SO": a_sm_so, "IO_IM": a_io_im, "IM_IO": a_im_io,
        "SO_IO": a_so_io, "IO_SO": a_io_so, "SM_IM": a_sm_im, "IM_SM": a_im_sm,
    }
    return AttentionOutput(fused=fused, directional=directional)


def attention_block(
    iv: Tensor,
    variant: AttentionVariant,
    weights: AttentionWeights | tuple[AttentionWeights, AttentionWeights],
    dropout_rate: float = 0.1,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> AttentionOutput:
    """Cross-attention block: variant attention, channel dropout, 1x1x1
    refinement conv with skip, then 2x max pooling. The pooled tensor is
    the block output used both downstream and as the saliency tap."""
    variant.check_dims(iv.shape)
    if variant.kind == "H_NA":
        w_a, w_b = weights
        out = ca_hna(iv, w_a, w_b)
        refine_w, refine_b = w_a.w_refine, w_a.b_refine
    else:
        out = ca_h(iv, weights) if variant.kind == "H" else ca_na(iv, weights)
        refine_w, refine_b = weights.w_refine, weights.b_refine
    x2 = dropout3d(out.fused, dropout_rate, rng, mode)
    x3 = add(conv3d(x2, refine_w, refine_b, stride=1, padding=0), x2)
    out.post_block = maxpool3d(x3, 2, 2)
    return out
