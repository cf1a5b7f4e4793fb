"""Losses, optimizer, augmentation, sampling, the two-stage training
protocol, and evaluation metrics.

Stage 1 trains the classifier with (optionally class-weighted) binary
cross-entropy. Stage 2 fine-tunes with a combined objective: the same
supervised loss blended with an unsupervised consistency loss that pulls
the channel-attention relevance map toward the Grad-CAM map of the
predicted class. Grad-CAM channel weights are computed by an inner
backward pass and then held constant, so one ordinary backward per step
suffices.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import config
from .data import Manifest, VolumeRecord
from .errors import ConfigError, NumericError, ShapeError
from .model import ForwardTrace, ModelState, forward
from .saliency import align_grids, care_map, gradcam_map, gradcam_weights
from .tensor import (
    Tensor,
    add,
    backward,
    clamp,
    conv3d,
    div,
    log,
    mul,
    power,
    reshape,
    sub,
    tmean,
    trilinear_upsample,
    tsum,
    zero_grads,
)

UNSUP_LOSSES = ("MSE", "SSIM", "Pearson", "GaussianPearson")
SAMPLERS = ("none", "weighted", "undersample")


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 4
    learning_rate: float = 1e-4
    patience: int = 25
    lam: float = 0.75
    unsup_loss: str = "MSE"
    sampler: str = "none"
    augment_flips: bool = True
    augment_scale: bool = True
    augment_intensity: bool = True
    seed: int = 0
    trials: int = 5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss mixing weight must lie in [0,1], got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.unsup_loss not in UNSUP_LOSSES:
            raise ConfigError(f"unsup_loss must be one of {UNSUP_LOSSES}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}")


@dataclass
class LossTerms:
    supervised: Tensor
    unsupervised: Tensor
    combined: Tensor


@dataclass
class MetricsReport:
    accuracy: float
    specificity: float
    sensitivity: float
    auroc: float
    f1: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    trial: int = 0
    seed: int = 0

    def record(self) -> dict:
        return {
            "accuracy": self.accuracy, "specificity": self.specificity,
            "sensitivity": self.sensitivity, "auroc": self.auroc,
            "f1": self.f1, "trial": self.trial, "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# losses


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 labels."""
    y = np.asarray(y, dtype=config.dtype())
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} vs labels {y.shape}")
    pc = clamp(p, 1e-7, 1.0 - 1e-7)
    terms = add(mul(Tensor(y), log(pc)), mul(Tensor(1.0 - y), log(sub(1.0, pc))))
    return mul(tmean(terms), -1.0)


def weighted_bce_loss(p: Tensor, y, counts) -> Tensor:
    """Class-weighted BCE: each class weighted by the other's prevalence."""
    n0, n1 = (int(c) for c in counts)
    if n0 <= 0 or n1 <= 0:
        raise ConfigError(f"both class counts must be positive, got {counts}")
    w0 = n1 / (n0 + n1)
    w1 = 1.0 - w0
    y = np.asarray(y, dtype=config.dtype())
    pc = clamp(p, 1e-7, 1.0 - 1e-7)
    terms = add(
        mul(Tensor(w1 * y), log(pc)),
        mul(Tensor(w0 * (1.0 - y)), log(sub(1.0, pc))),
    )
    return mul(tmean(terms), -1.0)


def consistency_loss(h_care: Tensor, h_cam: Tensor) -> Tensor:
    """Mean squared difference between two aligned heatmap tensors."""
    if h_care.shape != h_cam.shape:
        raise ShapeError(f"heatmap shapes differ after alignment: {h_care.shape} vs {h_cam.shape}")
    return tmean(power(sub(h_care, h_cam), 2.0))


def _windowed(x5: Tensor, kernel: Tensor) -> Tensor:
    return conv3d(x5, kernel, stride=1, padding=0)


def ssim_loss(a: Tensor, b: Tensor, window: int = 7) -> Tensor:
    """1 - mean structural similarity with a uniform window."""
    if a.shape != b.shape:
        raise ShapeError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    bsz = a.shape[0]
    k = min(window, *a.shape[1:])
    kern = Tensor(np.full((1, 1, k, k, k), 1.0 / k ** 3))
    a5 = reshape(a, (bsz, 1, *a.shape[1:]))
    b5 = reshape(b, (bsz, 1, *b.shape[1:]))
    mu_a, mu_b = _windowed(a5, kern), _windowed(b5, kern)
    var_a = sub(_windowed(mul(a5, a5), kern), mul(mu_a, mu_a))
    var_b = sub(_windowed(mul(b5, b5), kern), mul(mu_b, mu_b))
    cov = sub(_windowed(mul(a5, b5), kern), mul(mu_a, mu_b))
    num = mul(add(mul(mul(mu_a, mu_b), 2.0), c1), add(mul(cov, 2.0), c2))
    den = mul(add(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1), add(add(var_a, var_b), c2))
    return sub(1.0, tmean(div(num, den)))


def pearson_loss(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Negative Pearson correlation over all voxels, averaged per item."""
    if a.shape != b.shape:
        raise ShapeError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    axes = tuple(range(1, a.data.ndim))
    da = sub(a, tmean(a, axis=axes, keepdims=True))
    db = sub(b, tmean(b, axis=axes, keepdims=True))
    cov = tmean(mul(da, db), axis=axes)
    sa = power(add(tmean(mul(da, da), axis=axes), eps), 0.5)
    sb = power(add(tmean(mul(db, db), axis=axes), eps), 0.5)
    return mul(tmean(div(cov, mul(sa, sb))), -1.0)


def _gaussian_kernel(sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    k3 = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return k3[None, None]


def gaussian_pearson_loss(a: Tensor, b: Tensor, sigma: float = 1.0) -> Tensor:
    """Pearson loss after a Gaussian blur of both maps."""
    radius = 2
    if min(a.shape[1:]) <= 2 * radius:
        radius = 1
    kern = Tensor(_gaussian_kernel(sigma, radius))
    bsz = a.shape[0]

    def blur(x):
        x5 = reshape(x, (bsz, 1, *x.shape[1:]))
        out = conv3d(x5, kern, stride=1, padding=radius)
        return reshape(out, x.shape)

    return pearson_loss(blur(a), blur(b))


UNSUP_LOSS_FNS = {
    "MSE": consistency_loss,
    "SSIM": ssim_loss,
    "Pearson": pearson_loss,
    "GaussianPearson": gaussian_pearson_loss,
}


def multitask_loss(supervised: Tensor, unsupervised: Tensor, lam: float) -> LossTerms:
    """Affine blend: (1-lam) * supervised + lam * unsupervised."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"loss mixing weight must lie in [0,1], got {lam}")
    combined = add(mul(supervised, 1.0 - lam), mul(unsupervised, lam))
    return LossTerms(supervised=supervised, unsupervised=unsupervised, combined=combined)


# ---------------------------------------------------------------------------
# optimizer


def nadam_step(model: ModelState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Nesterov-accelerated Adam update over all parameters with grads.

    The step direction blends the bias-corrected first moment with the
    current gradient (the Nesterov lookahead); the first-moment correction
    uses the next step's decay power.
    """
    t = model.opt_step + 1
    c1, c1_next, c2 = 1 - beta1 ** t, 1 - beta1 ** (t + 1), 1 - beta2 ** t
    for name, p in model.params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = model.opt_m.setdefault(name, np.zeros_like(p.data))
        v = model.opt_v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / c1_next
        v_hat = v / c2
        step = (beta1 * m_hat + (1 - beta1) * g / c1) / (np.sqrt(v_hat) + eps)
        p.data -= lr * step
    model.opt_step = t


# ---------------------------------------------------------------------------
# augmentation and sampling


def augment(record: VolumeRecord, rng: np.random.Generator,
            flips: bool = True, scale: bool = True, intensity: bool = True) -> VolumeRecord:
    """Random flips across depth and width, up-to-1.25x zoom with center
    crop, and intensity gain/offset jitter. The label never changes."""
    v = record.values
    if flips:
        if rng.random() < 0.5:
            v = v[..., ::-1]
        if rng.random() < 0.5:
            v = v[:, ::-1]
    if scale:
        s = rng.uniform(1.0, 1.25)
        dims = v.shape[1:]
        target = tuple(max(d, int(round(d * s))) for d in dims)
        if target != dims:
            big = trilinear_upsample(Tensor(v[None].copy()), target).data[0]
            starts = [(tdim - d) // 2 for tdim, d in zip(target, dims)]
            v = big[:, starts[0]:starts[0] + dims[0],
                    starts[1]:starts[1] + dims[1],
                    starts[2]:starts[2] + dims[2]]
    if intensity:
        gain = rng.uniform(0.9, 1.1)
        offset = rng.uniform(-0.05, 0.05)
        v = v * gain + offset
    return replace(record, values=np.ascontiguousarray(v))


def undersample_split(items, rng: np.random.Generator):
    """Balance classes: keep all minority items plus an equal-size uniform
    sample of the majority, reshuffled. Accepts a Manifest or record list."""
    entries = items.entries if isinstance(items, Manifest) else list(items)
    pos = [e for e in entries if e.label == 1]
    neg = [e for e in entries if e.label == 0]
    if not pos or not neg:
        raise ConfigError("undersampling needs both classes present")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    picked = [majority[i] for i in rng.choice(len(majority), size=len(minority), replace=False)]
    out = minority + picked
    rng.shuffle(out)
    return Manifest(out) if isinstance(items, Manifest) else out


# ---------------------------------------------------------------------------
# metrics


def auroc_score(scores, labels) -> float:
    """Rank-based AUROC with average ranks for ties; NaN if single-class."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics_from_scores(scores, labels, threshold: float = 0.5,
                        trial: int = 0, seed: int = 0) -> MetricsReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    total = max(tp + tn + fp + fn, 1)

    def safe(num, den):
        return float(num / den) if den else float("nan")

    return MetricsReport(
        accuracy=(tp + tn) / total,
        specificity=safe(tn, tn + fp),
        sensitivity=safe(tp, tp + fn),
        auroc=auroc_score(scores, labels),
        f1=safe(2 * tp, 2 * tp + fp + fn),
        tp=tp, fp=fp, tn=tn, fn=fn, trial=trial, seed=seed,
    )


def predict_scores(model: ModelState, records, batch_size: int = 4) -> np.ndarray:
    scores = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = Tensor(np.stack([r.values for r in chunk]))
        scores.extend(forward(model, x, mode="eval").p_glaucoma.data.tolist())
    return np.asarray(scores)


def evaluate(model: ModelState, records, threshold: float = 0.5,
             batch_size: int = 4, trial: int = 0, seed: int = 0) -> MetricsReport:
    if not records:
        raise ConfigError("cannot evaluate on an empty set")
    scores = predict_scores(model, records, batch_size)
    labels = [r.label for r in records]
    return metrics_from_scores(scores, labels, threshold, trial=trial, seed=seed)


def aggregate_metrics(reports) -> dict:
    """Mean and sample standard deviation per metric across trials."""
    out = {}
    for key in ("accuracy", "specificity", "sensitivity", "auroc", "f1"):
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            out[key] = {"mean": float("nan"), "std": float("nan")}
        else:
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out[key] = {"mean": float(vals.mean()), "std": std}
    out["n_trials"] = len(reports)
    return out


def write_metrics(reports, path) -> None:
    """One JSON document per trial plus an aggregate, newline-delimited."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.record()) + "\n")
        fh.write(json.dumps({"aggregate": aggregate_metrics(reports)}) + "\n")


def format_metrics_table(reports) -> str:
    agg = aggregate_metrics(reports)
    keys = ("accuracy", "specificity", "sensitivity", "auroc", "f1")
    lines = ["trial  " + "  ".join(f"{k:>11}" for k in keys)]
    for r in reports:
        lines.append(f"{r.trial:5d}  " + "  ".join(f"{getattr(r, k):11.4f}" for k in keys))
    lines.append("mean   " + "  ".join(f"{agg[k]['mean']:11.4f}" for k in keys))
    lines.append("std    " + "  ".join(f"{agg[k]['std']:11.4f}" for k in keys))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: ModelState
    report: MetricsReport
    history: dict = field(default_factory=dict)


def _snapshot(model: ModelState) -> dict:
    return {
        "params": {n: t.data.copy() for n, t in model.params.items()},
        "bn": {n: (s.mean.copy(), s.var.copy()) for n, s in model.bn_stats.items()},
    }


def _restore(model: ModelState, snap: dict) -> None:
    for n, arr in snap["params"].items():
        model.params[n].data = arr.copy()
    for n, (mean, var) in snap["bn"].items():
        model.bn_stats[n].mean = mean.copy()
        model.bn_stats[n].var = var.copy()


def _batches(records, batch_size):
    for start in range(0, len(records), batch_size):
        yield records[start:start + batch_size]


def _prepare_batch(chunk, rng, cfg: TrainConfig):
    recs = [
        augment(r, rng, flips=cfg.augment_flips, scale=cfg.augment_scale,
                intensity=cfg.augment_intensity)
        for r in chunk
    ]
    x = Tensor(np.stack([r.values for r in recs]))
    y = np.array([r.label for r in recs], dtype=config.dtype())
    return x, y


def _supervised(trace: ForwardTrace, y, cfg: TrainConfig, class_counts) -> Tensor:
    if cfg.sampler == "weighted":
        return weighted_bce_loss(trace.p_glaucoma, y, class_counts)
    return bce_loss(trace.p_glaucoma, y)


def _val_supervised(model, records, cfg, class_counts) -> float:
    total, n = 0.0, 0
    for chunk in _batches(records, cfg.batch_size):
        x = Tensor(np.stack([r.values for r in chunk]))
        y = np.array([r.label for r in chunk], dtype=config.dtype())
        tr = forward(model, x, mode="eval")
        loss = _supervised(tr, y, cfg, class_counts)
        total += loss.item() * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def _class_counts(records):
    labels = np.array([r.label for r in records], dtype=int)
    return int((labels == 0).sum()), int((labels == 1).sum())


def _epoch_records(train_records, rng, cfg: TrainConfig):
    if cfg.sampler == "undersample":
        pool = undersample_split(train_records, rng)
    else:
        pool = list(train_records)
        rng.shuffle(pool)
    return pool


def train_stage1(model: ModelState, splits: dict, cfg: TrainConfig,
                 trial: int = 0) -> TrainResult:
    """BCE pretraining with early stopping on validation loss."""
    rng = np.random.default_rng(cfg.seed)
    counts = _class_counts(splits["train"])
    best_val, best_epoch, best_snap = np.inf, -1, _snapshot(model)
    history = {"train_loss": [], "val_loss": []}
    for epoch in range(cfg.epochs):
        pool = _epoch_records(splits["train"], rng, cfg)
        epoch_loss, seen = 0.0, 0
        for chunk in _batches(pool, cfg.batch_size):
            x, y = _prepare_batch(chunk, rng, cfg)
            trace = forward(model, x, mode="train", rng=rng)
            loss = _supervised(trace, y, cfg, counts)
            model.zero_param_grads()
            backward(loss)
            nadam_step(model, cfg.learning_rate)
            zero_grads(loss)
            epoch_loss += loss.item() * len(chunk)
            seen += len(chunk)
        model.epoch += 1
        val = _val_supervised(model, splits["val"], cfg, counts)
        history["train_loss"].append(epoch_loss / max(seen, 1))
        history["val_loss"].append(val)
        if val < best_val - 1e-12:
            best_val, best_epoch, best_snap = val, epoch, _snapshot(model)
        elif epoch - best_epoch >= cfg.patience:
            break
    _restore(model, best_snap)
    model.stage = 1
    history["best_epoch"] = best_epoch
    history["epochs_run"] = len(history["val_loss"])
    report = evaluate(model, splits["test"], batch_size=cfg.batch_size,
                      trial=trial, seed=cfg.seed)
    return TrainResult(model=model, report=report, history=history)


def saliency_pair(model: ModelState, trace: ForwardTrace):
    """Channel-attention map from the last attention tap and Grad-CAM of
    the predicted class from the last conv tap, aligned to one grid."""
    placement = model.spec.placement
    if not placement:
        raise ConfigError("consistency fine-tuning needs at least one attention block")
    attn_tap = trace.taps[f"attn{max(placement)}"]
    conv_tap_name = f"conv{model.spec.n_convs}"
    weights = gradcam_weights(trace, "pred", conv_tap_name)
    h_cam = gradcam_map(trace.taps[conv_tap_name], weights)
    h_care = care_map(attn_tap)
    return align_grids(h_care, h_cam)


def consistency_on_records(model: ModelState, records, batch_size: int = 4) -> float:
    """Mean held-out consistency loss between the two saliency maps."""
    total, n = 0.0, 0
    for chunk in _batches(records, batch_size):
        x = Tensor(np.stack([r.values for r in chunk]))
        trace = forward(model, x, mode="eval")
        h_care, h_cam = saliency_pair(model, trace)
        total += consistency_loss(h_care, h_cam).item() * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def finetune_stage2(model: ModelState, splits: dict, cfg: TrainConfig,
                    trial: int = 0, force: bool = False) -> TrainResult:
    """Multi-task fine-tuning; early stopping on validation combined loss.

    Refuses to run on a model with no completed pretraining epochs unless
    ``force`` is set, since joint training from scratch locks in early,
    meaningless saliency targets.
    """
    if model.epoch == 0 and not force:
        raise ConfigError(
            "model has no completed pretraining epochs; run stage-1 training "
            "first or pass force to override"
        )
    rng = np.random.default_rng(cfg.seed + 1)
    counts = _class_counts(splits["train"])
    unsup_fn = UNSUP_LOSS_FNS[cfg.unsup_loss]
    best_val, best_epoch, best_snap = np.inf, -1, _snapshot(model)
    history = {"train_loss": [], "val_loss": []}

    def combined_on(records, mode, step_rng=None, update=False):
        total, seen = 0.0, 0
        for chunk in _batches(records, cfg.batch_size):
            if update:
                x, y = _prepare_batch(chunk, step_rng, cfg)
            else:
                x = Tensor(np.stack([r.values for r in chunk]))
                y = np.array([r.label for r in chunk], dtype=config.dtype())
            trace = forward(model, x, mode=mode, rng=step_rng)
            sup = _supervised(trace, y, cfg, counts)
            h_care, h_cam = saliency_pair(model, trace)
            terms = multitask_loss(sup, unsup_fn(h_care, h_cam), cfg.lam)
            if update:
                model.zero_param_grads()
                backward(terms.combined)
                nadam_step(model, cfg.learning_rate)
            value = terms.combined.item()
            zero_grads(terms.combined)
            total += value * len(chunk)
            seen += len(chunk)
        return total / max(seen, 1)

    for epoch in range(cfg.epochs):
        pool = _epoch_records(splits["train"], rng, cfg)
        train_loss = combined_on(pool, "train", step_rng=rng, update=True)
        model.epoch += 1
        val = combined_on(splits["val"], "eval")
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val)
        if val < best_val - 1e-12:
            best_val, best_epoch, best_snap = val, epoch, _snapshot(model)
        elif epoch - best_epoch >= cfg.patience:
            break
    _restore(model, best_snap)
    model.stage = 2
    history["best_epoch"] = best_epoch
    history["epochs_run"] = len(history["val_loss"])
    report = evaluate(model, splits["test"], batch_size=cfg.batch_size,
                      trial=trial, seed=cfg.seed)
    return TrainResult(model=model, report=report, history=history)


def split_records(records, fractions=(0.65, 0.15, 0.20), rng=None) -> dict:
    """Patient-grouped split of in-memory records into train/val/test."""
    rng = rng or np.random.default_rng()
    groups: dict = {}
    for r in records:
        groups.setdefault(r.patient_id, []).append(r)
    if len(groups) < 3:
        raise ConfigError(f"need at least 3 patient groups, got {len(groups)}")
    keys = sorted(groups)
    rng.shuffle(keys)
    total = len(records)
    targets = [fractions[0] * total, (fractions[0] + fractions[1]) * total]
    names = ("train", "val", "test")
    out = {n: [] for n in names}
    seen, idx = 0, 0
    for key in keys:
        if idx < 2 and seen >= targets[idx] - 1e-9:
            idx += 1
        out[names[idx]].extend(groups[key])
        seen += len(groups[key])
    return out
