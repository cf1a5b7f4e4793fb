"""Symbolic complexity accounting, saliency-vs-mask alignment metrics,
and the Mann-Whitney U statistic.

Complexity convention: one FLOP per multiply and per add (2 per MAC);
batch-norm, ReLU, pooling, and softmax are counted as zero. Parameter
headlines report the conv + attention backbone; normalization affine
terms and the classifier head are separate line items.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .model import ArchitectureSpec

# published reference figures for comparison architectures (params, GFLOPs
# at 1x128x192x112); shipped for report rendering, never recomputed
BASELINE_COMPLEXITY = {
    "SEResNeXt50": (28_360_000, 72.064),
    "EPA": (25_010_000, 108.801),
    "M3T": (27_050_000, 29.90),
    "TimeSformer": (63_150_000, 1357.11),
    "ViT": (88_180_000, 135.34),
    "Med3D": (63_300_000, 745.47),
}

TABLE_PLACEMENTS = ((1, 2), (1, 3), (2, 3), (2, 4), (2, 5), (3, 4), (3, 5))


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)  # (name, params, flops)
    convention: str = "FLOP = 2 x multiply-accumulate; norm/activation/pool = 0"
    input_dims: tuple | None = None

    def add(self, name: str, params: int, flops: int = 0) -> None:
        self.layers.append((name, int(params), int(flops)))

    def _total(self, idx, predicate=None) -> int:
        return sum(row[idx] for row in self.layers
                   if predicate is None or predicate(row[0]))

    @property
    def total_params(self) -> int:
        return self._total(1)

    @property
    def backbone_params(self) -> int:
        return self._total(1, lambda n: n.startswith(("conv", "attn")))

    @property
    def total_flops(self) -> int:
        return self._total(2)

    def to_csv(self) -> str:
        lines = ["layer,params,flops"]
        lines += [f"{n},{p},{f}" for n, p, f in self.layers]
        lines.append(f"total,{self.total_params},{self.total_flops}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max([len(n) for n, _, _ in self.layers] + [8])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'flops':>16}"]
        for n, p, f in self.layers:
            lines.append(f"{n:<{width}}  {p:>10,}  {f:>16,}")
        lines.append(f"{'backbone':<{width}}  {self.backbone_params:>10,}")
        lines.append(f"{'total':<{width}}  {self.total_params:>10,}  {self.total_flops:>16,}")
        return "\n".join(lines)


def _attn_param_rows(spec: ArchitectureSpec, channels: int):
    """(sub-name, params) line items for one attention block."""
    unit = channels * channels + channels  # one 1x1x1 projection conv
    if spec.variant == "H_NA":
        return [("supinf", 4 * unit), ("maconh", 3 * unit)]
    return [("", 4 * unit)]


def count_params(spec: ArchitectureSpec) -> ComplexityReport:
    """Symbolic parameter count per layer, no model instantiation."""
    report = ComplexityReport()
    c_in = spec.in_channels
    for i, (f, k) in enumerate(zip(spec.filters, spec.kernels), start=1):
        report.add(f"conv{i}", k ** 3 * c_in * f + f)
        report.add(f"bn{i}", 2 * f)
        if i in spec.placement:
            for sub, params in _attn_param_rows(spec, f):
                name = f"attn{i}.{sub}" if sub else f"attn{i}"
                report.add(name, params)
        c_in = f
    if spec.filters:
        report.add("head", c_in * 2 + 2)
    return report


def _conv_out_dims(dims, kernel, stride):
    pad = kernel // 2
    return tuple((d + 2 * pad - kernel) // stride + 1 for d in dims)


def _attention_flops(spec: ArchitectureSpec, channels: int, dims) -> int:
    """Score/value products plus projection and refinement convs."""
    d, h, w = dims
    vol = d * h * w
    c2 = channels * channels
    if spec.variant == "H_NA":
        if d % 2 or w % 2:
            raise ShapeError(f"combined variant needs even depth/width, got {dims}")
        region = vol // 4
        directions = 8
    else:
        axis = d if spec.variant == "H" else w
        if axis % 2:
            raise ShapeError(f"variant {spec.variant} needs an even split axis, got {dims}")
        region = vol // 2
        directions = 2
    # per direction: 3 projections + score product + value product
    pair_flops = directions * 5 * 2 * c2 * region
    refine_flops = 2 * c2 * vol
    return pair_flops + refine_flops


def count_flops(spec: ArchitectureSpec, input_dims=None) -> ComplexityReport:
    """Symbolic FLOP count at a given input size (default: the spec's)."""
    dims = tuple(input_dims or spec.input_dims)
    report = ComplexityReport(input_dims=dims)
    c_in = spec.in_channels
    for i, (f, k, s) in enumerate(zip(spec.filters, spec.kernels, spec.strides), start=1):
        dims = _conv_out_dims(dims, k, s)
        if min(dims) < 1:
            raise ShapeError(f"conv{i} collapses spatial dims to {dims}")
        out_vox = int(np.prod(dims))
        report.add(f"conv{i}", k ** 3 * c_in * f + f, 2 * c_in * k ** 3 * f * out_vox)
        report.add(f"bn{i}", 2 * f, 0)
        if i in spec.placement:
            flops = _attention_flops(spec, f, dims)
            params = sum(p for _, p in _attn_param_rows(spec, f))
            report.add(f"attn{i}", params, flops)
            dims = tuple(d // 2 for d in dims)  # block ends in a 2x max pool
        c_in = f
    if spec.filters:
        report.add("head", c_in * 2 + 2, 2 * c_in * 2)
    return report


@dataclass
class AlignmentMetrics:
    mask_coverage: float
    care_coverage: float
    enrichment: float
    threshold: float


def alignment_metrics(care_values, mask, percentile: float = 75.0) -> AlignmentMetrics:
    """Coverage and enrichment of a heatmap against a binary expert mask.

    The threshold is the given percentile of the heatmap; the highlighted
    set is strictly above it. Enrichment is mean intensity inside the mask
    over mean intensity outside.
    """
    care_values = np.asarray(care_values, dtype=float)
    mask = np.asarray(mask).astype(bool)
    if care_values.shape != mask.shape:
        raise ShapeError(f"heatmap {care_values.shape} vs mask {mask.shape}")
    n_in = int(mask.sum())
    if n_in == 0:
        raise ConfigError("alignment needs a nonempty mask")
    if n_in == mask.size:
        raise ConfigError("alignment needs a nonempty mask complement")
    tau = float(np.percentile(care_values, percentile))
    hot = care_values > tau
    inter = int((hot & mask).sum())
    outside_mean = float(care_values[~mask].mean())
    inside_mean = float(care_values[mask].mean())
    enrichment = inside_mean / outside_mean if outside_mean > 0 else float("inf")
    return AlignmentMetrics(
        mask_coverage=inter / n_in,
        care_coverage=inter / int(hot.sum()) if hot.any() else 0.0,
        enrichment=enrichment,
        threshold=tau,
    )


def _u_statistic(a, b) -> float:
    """U for sample a: pairs where a outranks b, ties counted half."""
    a = np.asarray(a, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)[None, :]
    return float((a > b).sum() + 0.5 * (a == b).sum())


def mann_whitney_u(a, b) -> tuple:
    """(U, two-sided p). Exact enumeration when n_a + n_b <= 12, else a
    normal approximation with tie and continuity corrections."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("both samples must be nonempty")
    u = _u_statistic(a, b)
    if len(a) + len(b) <= 12:
        return u, _exact_p(a, b, u)
    return u, _approx_p(a, b, u)


def _exact_p(a, b, u_obs: float) -> float:
    pooled = np.concatenate([a, b])
    n_a = len(a)
    n_ab = n_a * len(b)
    d_obs = min(u_obs, n_ab - u_obs)
    total = count = 0
    idx = np.arange(len(pooled))
    for combo in itertools.combinations(idx, n_a):
        mask = np.zeros(len(pooled), dtype=bool)
        mask[list(combo)] = True
        u = _u_statistic(pooled[mask], pooled[~mask])
        if min(u, n_ab - u) <= d_obs + 1e-12:
            count += 1
        total += 1
    return count / total


def _approx_p(a, b, u: float) -> float:
    """Normal approximation with tie correction, continuity correction, and
    an Edgeworth kurtosis term (the U distribution is platykurtic at small
    n; the term vanishes as n grows)."""
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    mu = n_a * n_b / 2.0
    pooled = np.concatenate([a, b])
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts).sum())) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    u_min = min(u, n_a * n_b - u)
    z = (u_min - mu + 0.5) / math.sqrt(var)
    gamma2 = -(6.0 / 5.0) * (n_a * n_a + n_b * n_b + n_a * n_b + n) / (n_a * n_b * (n + 1))
    phi = math.exp(-z * z / 2.0) / math.sqrt(2.0 * math.pi)
    cdf = 0.5 * math.erfc(-z / math.sqrt(2.0)) - phi * gamma2 / 24.0 * (z ** 3 - 3.0 * z)
    return min(1.0, max(0.0, 2.0 * cdf))
