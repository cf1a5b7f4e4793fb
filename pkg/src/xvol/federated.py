"""Simulated federated training: per-client local training, sample-count
weighted parameter averaging, and cross-scanner volume harmonization.

Clients share one architecture. Each round every client trains locally,
the server averages parameters weighted by client sample counts (in
sorted parameter-name order, so the reduction is permutation-invariant in
client order), and the averaged weights are broadcast back with optimizer
moments reset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import VolumeRecord, resize_affine
from .errors import ConfigError, ShapeError
from .model import ModelState
from .training import TrainConfig, train_stage1


@dataclass
class ClientState:
    client_id: str
    model: ModelState
    splits: dict  # train/val/test record lists
    sample_count: int = 0

    def __post_init__(self):
        if not self.sample_count:
            self.sample_count = len(self.splits.get("train", []))


def harmonize_volume(record: VolumeRecord, onh_fraction: float = 0.5,
                     target=(64, 128, 64)) -> VolumeRecord:
    """Crop to the nerve-head side of the width axis, then resample.

    The kept side follows the record's eye field (the nerve head sits on
    opposite width ends for left and right eyes); unknown eyes keep the
    first half and warn.
    """
    if not 0.0 < onh_fraction <= 1.0:
        raise ConfigError(f"crop fraction must lie in (0,1], got {onh_fraction}")
    _, _, _, w = record.values.shape
    keep = max(1, int(round(w * onh_fraction)))
    if w < 2 and keep < w:
        raise ConfigError(f"width {w} too small to crop")
    if record.eye == "unknown" and keep < w:
        warnings.warn("eye side unknown; keeping the first width half", stacklevel=2)
    if keep >= w:
        cropped = record.values
    elif record.eye == "right":
        cropped = record.values[..., w - keep:]
    else:
        cropped = record.values[..., :keep]
    out = VolumeRecord(values=np.ascontiguousarray(cropped), label=record.label,
                       patient_id=record.patient_id, eye=record.eye, path=record.path)
    if out.dims == tuple(target):
        return out
    return resize_affine(out, target)


def average_parameters(clients) -> dict:
    """Sample-count weighted mean of client parameters, by sorted name."""
    if not clients:
        raise ConfigError("need at least one client")
    counts = np.array([max(c.sample_count, 0) for c in clients], dtype=float)
    if counts.sum() <= 0:
        raise ConfigError("total sample count must be positive")
    weights = counts / counts.sum()
    names = sorted(clients[0].model.params)
    for c in clients[1:]:
        if sorted(c.model.params) != names:
            raise ShapeError(f"client {c.client_id} parameter names differ")
    out = {}
    for name in names:
        ref_shape = clients[0].model.params[name].shape
        acc = np.zeros(ref_shape, dtype=clients[0].model.params[name].data.dtype)
        for c, wgt in sorted(zip(clients, weights), key=lambda cw: cw[0].client_id):
            p = c.model.params[name]
            if p.shape != ref_shape:
                raise ShapeError(
                    f"parameter {name!r} shape mismatch: {p.shape} vs {ref_shape}"
                )
            acc += wgt * p.data
        out[name] = acc
    return out


def broadcast(clients, averaged: dict) -> None:
    """Install averaged parameters on every client; reset optimizer moments."""
    for c in clients:
        for name, arr in averaged.items():
            c.model.params[name].data = arr.copy()
        c.model.opt_m.clear()
        c.model.opt_v.clear()
        c.model.opt_step = 0


def fedavg_round(clients, local_epochs: int, cfg: TrainConfig) -> dict:
    """One round: local training, weighted averaging, broadcast.

    Returns {"averaged": params dict, "logs": [(client_id, final train loss)]}.
    """
    if not clients:
        raise ConfigError("need at least one client")
    logs = []
    local_cfg = replace(cfg, epochs=local_epochs)
    for c in clients:
        result = train_stage1(c.model, c.splits, local_cfg)
        loss = result.history["train_loss"][-1] if result.history["train_loss"] else float("nan")
        logs.append((c.client_id, loss))
    averaged = average_parameters(clients)
    broadcast(clients, averaged)
    return {"averaged": averaged, "logs": logs}


def run_fedavg(clients, rounds: int = 5, local_epochs: int = 10,
               cfg: TrainConfig | None = None) -> list:
    """Run several rounds; returns per-round logs."""
    cfg = cfg or TrainConfig()
    history = []
    for rnd in range(rounds):
        out = fedavg_round(clients, local_epochs, cfg)
        history.append({"round": rnd, "logs": out["logs"]})
    return history
