"""Volumetric classifier assembly: conv stack, optional cross-attention
blocks, pooled head, and a versioned on-disk container.

The network is five conv->batchnorm->relu stages (stride 2 on the first),
with cross-attention blocks optionally inserted after configured stages,
followed by global average pooling, a dense 32->2 head, and softmax.
Every stage output and attention block output is recorded as a named tap
for saliency extraction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import config
from .attention import VARIANTS, AttentionVariant, AttentionWeights, attention_block
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import (
    BatchNormStats,
    Tensor,
    batchnorm3d,
    conv3d,
    dense,
    global_avg_pool,
    relu,
    reshape,
    softmax_axis,
    split_axis,
)

MAGIC = b"XVOLMDL1"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one network in the family."""

    variant: str = "Base"
    filters: tuple = (32, 32, 32, 32, 32)
    kernels: tuple = (7, 5, 3, 3, 3)
    strides: tuple = (2, 1, 1, 1, 1)
    placement: tuple | None = None  # conv indices (1-based) followed by attention
    dropout_rate: float = 0.1
    input_dims: tuple = (128, 192, 112)
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in ("Base",) + VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not (len(self.filters) == len(self.kernels) == len(self.strides)):
            raise ConfigError("filters, kernels and strides must have equal length")
        placement = self.placement
        if placement is None:
            placement = () if self.variant == "Base" else (2, 4)
        placement = tuple(sorted(set(int(i) for i in placement)))
        if self.variant == "Base" and placement:
            raise ConfigError("Base variant takes no attention placement")
        for i in placement:
            if not 1 <= i <= len(self.filters):
                raise ConfigError(f"attention placement index {i} outside conv range 1..{len(self.filters)}")
        object.__setattr__(self, "placement", placement)
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))

    @property
    def n_convs(self) -> int:
        return len(self.filters)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "filters": list(self.filters),
            "kernels": list(self.kernels),
            "strides": list(self.strides),
            "placement": list(self.placement),
            "dropout_rate": self.dropout_rate,
            "input_dims": list(self.input_dims),
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            variant=d["variant"],
            filters=tuple(d["filters"]),
            kernels=tuple(d["kernels"]),
            strides=tuple(d["strides"]),
            placement=tuple(d["placement"]),
            dropout_rate=float(d["dropout_rate"]),
            input_dims=tuple(d["input_dims"]),
            in_channels=int(d["in_channels"]),
        )


@dataclass
class ModelState:
    """All mutable state of one model: parameters, normalization buffers,
    optimizer moments, and training progress counters."""

    spec: ArchitectureSpec
    params: "OrderedDict[str, Tensor]"
    bn_stats: "OrderedDict[str, BatchNormStats]"
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    stage: int = 1
    seed: int = 0

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def named_parameters(self):
        return self.params.items()

    def attention_weights(self, conv_index: int):
        """Assemble the projection-weight view(s) for one attention block."""
        prefix = f"attn{conv_index}"
        p = self.params

        def pick(sub: str, refine: bool) -> AttentionWeights:
            kw = {}
            if refine:
                kw = {"w_refine": p[f"{sub}.w_refine"], "b_refine": p[f"{sub}.b_refine"]}
            return AttentionWeights(
                w_q=p[f"{sub}.w_q"], b_q=p[f"{sub}.b_q"],
                w_k=p[f"{sub}.w_k"], b_k=p[f"{sub}.b_k"],
                w_v=p[f"{sub}.w_v"], b_v=p[f"{sub}.b_v"], **kw,
            )

        if self.spec.variant == "H_NA":
            return pick(f"{prefix}.supinf", True), pick(f"{prefix}.maconh", False)
        return pick(prefix, True)

    def zero_param_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


@dataclass
class ForwardTrace:
    """One forward pass: class scores plus every named intermediate tap."""

    logits: Tensor
    probs: Tensor
    p_glaucoma: Tensor
    taps: dict


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(config.dtype())


def build_model(spec: ArchitectureSpec, seed: int = 0) -> ModelState:
    """Initialize a model: Kaiming-uniform convs/dense/attention projections,
    batchnorm gamma=1 beta=0, all draws taken from one seeded generator."""
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    bn_stats: "OrderedDict[str, BatchNormStats]" = OrderedDict()

    def par(name: str, data: np.ndarray) -> None:
        params[name] = Tensor(data, requires_grad=True)

    c_in = spec.in_channels
    for i, (f, k, _s) in enumerate(zip(spec.filters, spec.kernels, spec.strides), start=1):
        fan_in = c_in * k ** 3
        par(f"conv{i}.w", _kaiming_uniform(rng, (f, c_in, k, k, k), fan_in))
        par(f"conv{i}.b", _kaiming_uniform(rng, (f,), fan_in))
        par(f"bn{i}.gamma", np.ones(f, dtype=config.dtype()))
        par(f"bn{i}.beta", np.zeros(f, dtype=config.dtype()))
        bn_stats[f"bn{i}"] = BatchNormStats(f)
        if i in spec.placement:
            _init_attention(params, rng, f"attn{i}", f, spec.variant)
        c_in = f

    par("head.w", _kaiming_uniform(rng, (2, c_in), c_in))
    par("head.b", _kaiming_uniform(rng, (2,), c_in))
    return ModelState(spec=spec, params=params, bn_stats=bn_stats, seed=seed)


def _init_attention(params: OrderedDict, rng: np.random.Generator, prefix: str, channels: int, variant: str) -> None:
    def one_set(sub: str, refine: bool) -> None:
        names = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v"]
        if refine:
            names += ["w_refine", "b_refine"]
        for name in names:
            shape = (channels, channels, 1, 1, 1) if name.startswith("w") else (channels,)
            params[f"{sub}.{name}"] = Tensor(_kaiming_uniform(rng, shape, channels), requires_grad=True)

    if variant == "H_NA":
        one_set(f"{prefix}.supinf", True)
        one_set(f"{prefix}.maconh", False)
    else:
        one_set(prefix, True)


def forward(model: ModelState, batch: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run the network on a [B,1,D,H,W] batch and record every tap.

    Train mode uses batch statistics for normalization (updating running
    buffers) and active channel dropout inside attention blocks.
    """
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 5 or batch.shape[1] != model.spec.in_channels:
        raise ShapeError(
            f"expected a [B,{model.spec.in_channels},D,H,W] batch, got shape {batch.shape}"
        )
    spec = model.spec
    p = model.params
    taps: dict = {}
    x = batch
    for i, (k, s) in enumerate(zip(spec.kernels, spec.strides), start=1):
        if min(x.shape[2:]) < 1:
            raise ShapeError(f"conv{i}: input spatial dims collapsed to {x.shape[2:]}")
        x = conv3d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=s, padding=k // 2)
        x = batchnorm3d(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], model.bn_stats[f"bn{i}"], mode)
        x = relu(x)
        taps[f"conv{i}"] = x
        if i in spec.placement:
            variant = AttentionVariant(spec.variant)
            try:
                variant.check_dims(x.shape)
            except ShapeError as e:
                raise ShapeError(f"attention block after conv{i}: {e}") from e
            out = attention_block(
                x, variant, model.attention_weights(i),
                dropout_rate=spec.dropout_rate, rng=rng, mode=mode,
            )
            x = out.post_block
            taps[f"attn{i}"] = x
    pooled = global_avg_pool(x)
    logits = dense(pooled, p["head.w"], p["head.b"])
    probs = softmax_axis(logits, 1)
    _, p1 = split_axis(probs, 1, 2)
    p_glaucoma = reshape(p1, (batch.shape[0],))
    return ForwardTrace(logits=logits, probs=probs, p_glaucoma=p_glaucoma, taps=taps)


# ---------------------------------------------------------------------------
# on-disk container


def _state_blobs(model: ModelState):
    """Deterministically ordered (name, array) pairs covering all state."""
    for name, t in model.params.items():
        yield name, t.data
    for name, st in model.bn_stats.items():
        yield f"{name}.running_mean", st.mean
        yield f"{name}.running_var", st.var
    for name in model.params:
        if name in model.opt_m:
            yield f"opt.m.{name}", model.opt_m[name]
            yield f"opt.v.{name}", model.opt_v[name]


def save_model(model: ModelState, path) -> None:
    """Write a checksummed container with spec, parameters, normalization
    buffers, optimizer moments, and progress counters."""
    prec = config.precision()
    le_dtype = "<f4" if prec == "f32" else "<f8"
    meta = {
        "spec": model.spec.to_dict(),
        "opt_step": model.opt_step,
        "epoch": model.epoch,
        "stage": model.stage,
        "seed": model.seed,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs = list(_state_blobs(model))

    parts = [MAGIC, struct.pack("<B", 4 if prec == "f32" else 8)]
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le_dtype).tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()[-8:]
    with open(path, "wb") as fh:
        fh.write(body + digest)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError("model container truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]


def load_model(path) -> ModelState:
    """Read a container written by :func:`save_model`, verifying magic,
    precision compatibility, and the trailing checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8:
        raise DataFormatError("model container truncated")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.sha256(body).digest()[-8:] != digest:
        raise DataFormatError("model container checksum mismatch (corrupt or truncated)")
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataFormatError("not a model container (bad magic)")
    width = r.unpack("<B")
    want = 4 if config.precision() == "f32" else 8
    if width != want:
        raise DataFormatError(
            f"container stores {width * 8}-bit floats but active precision is "
            f"{config.precision()}; set precision to match before loading"
        )
    meta = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    spec = ArchitectureSpec.from_dict(meta["spec"])
    le_dtype = "<f4" if width == 4 else "<f8"
    n_blobs = r.unpack("<I")
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n_blobs):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(count * width), dtype=le_dtype).reshape(shape)
        blobs[name] = np.ascontiguousarray(data, dtype=config.dtype())

    params: "OrderedDict[str, Tensor]" = OrderedDict()
    bn_stats: "OrderedDict[str, BatchNormStats]" = OrderedDict()
    opt_m: dict = {}
    opt_v: dict = {}
    for name, arr in blobs.items():
        if name.startswith("opt.m."):
            opt_m[name[len("opt.m."):]] = arr.copy()
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v."):]] = arr.copy()
        elif name.endswith(".running_mean"):
            bn_stats.setdefault(name[:-len(".running_mean")], BatchNormStats(arr.size)).mean = arr.copy()
        elif name.endswith(".running_var"):
            bn_stats.setdefault(name[:-len(".running_var")], BatchNormStats(arr.size)).var = arr.copy()
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True)
    return ModelState(
        spec=spec, params=params, bn_stats=bn_stats, opt_m=opt_m, opt_v=opt_v,
        opt_step=int(meta["opt_step"]), epoch=int(meta["epoch"]),
        stage=int(meta["stage"]), seed=int(meta["seed"]),
    )
