"""Volume file I/O, dataset manifests, patient-grouped splits, affine
resizing, and a synthetic phantom generator.

The on-disk volume format ("OCTV") is a minimal header + raw 32-bit
little-endian payload; manifests are plain CSV. Phantoms are noisy
volumes with a bright band per depth half whose thinning on one side
carries the class signal, so depth-paired attention is the anatomically
matched variant.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import Tensor, trilinear_upsample

OCTV_MAGIC = b"OCTV"
OCTV_VERSION = 1
EYES = ("left", "right", "unknown")
SPLITS = ("train", "val", "test")


@dataclass
class VolumeRecord:
    """One scan: [1,D,H,W] values plus its label and provenance."""

    values: np.ndarray
    label: int
    patient_id: str = ""
    eye: str = "unknown"
    path: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=config.dtype())
        if self.values.ndim != 4 or self.values.shape[0] != 1:
            raise ShapeError(f"volume values must be [1,D,H,W], got {self.values.shape}")
        if self.label not in (0, 1):
            raise DataFormatError(f"label must be 0 or 1, got {self.label!r}")
        if self.eye not in EYES:
            raise DataFormatError(f"eye must be one of {EYES}, got {self.eye!r}")

    @property
    def dims(self) -> tuple:
        return self.values.shape[1:]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    patient_id: str
    eye: str
    split: str | None = None


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def subset(self, split: str) -> "Manifest":
        return Manifest([e for e in self.entries if e.split == split])

    def patient_groups(self) -> dict:
        groups: dict = {}
        for e in self.entries:
            groups.setdefault(e.patient_id, []).append(e)
        return groups


# ---------------------------------------------------------------------------
# OCTV read/write


def write_volume(record: VolumeRecord, path) -> None:
    """Serialize one volume; values are stored as 32-bit floats."""
    if not np.all(np.isfinite(record.values)):
        raise DataFormatError("refusing to write non-finite volume values")
    c, d, h, w = (1, *record.dims)
    header = OCTV_MAGIC + struct.pack("<HH4I", OCTV_VERSION, 0, c, d, h, w)
    payload = np.ascontiguousarray(record.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_volume(path, label: int = 0, patient_id: str = "", eye: str = "unknown") -> VolumeRecord:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != OCTV_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, _reserved, c, d, h, w = struct.unpack("<HH4I", raw[4:24])
    if version != OCTV_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expect = c * d * h * w * 4
    if len(raw) - 24 != expect:
        raise DataFormatError(
            f"{path}: header promises {c}x{d}x{h}x{w} ({expect} payload bytes) "
            f"but file carries {len(raw) - 24}"
        )
    values = np.frombuffer(raw[24:], dtype="<f4").reshape(c, d, h, w)
    return VolumeRecord(values=values.astype(config.dtype()), label=label,
                        patient_id=patient_id, eye=eye, path=str(path))


def load_record(entry: ManifestEntry, root=None) -> VolumeRecord:
    path = Path(entry.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return read_volume(path, label=entry.label, patient_id=entry.patient_id, eye=entry.eye)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        has_split = any(e.split for e in manifest.entries)
        header = ["path", "label", "patient_id", "eye"] + (["split"] if has_split else [])
        writer.writerow(header)
        for e in manifest.entries:
            row = [e.path, e.label, e.patient_id, e.eye]
            if has_split:
                row.append(e.split or "")
            writer.writerow(row)


def read_manifest(path) -> Manifest:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "label", "patient_id", "eye"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: manifest header must contain {sorted(required)}")
        for row in reader:
            try:
                label = int(row["label"])
            except ValueError as e:
                raise DataFormatError(f"{path}: non-integer label {row['label']!r}") from e
            split = row.get("split") or None
            if split is not None and split not in SPLITS:
                raise DataFormatError(f"{path}: unknown split {split!r}")
            entries.append(ManifestEntry(row["path"], label, row["patient_id"], row["eye"], split))
    return Manifest(entries)


def split_dataset(manifest: Manifest, fractions=(0.65, 0.15, 0.20), rng=None) -> Manifest:
    """Assign train/val/test keeping every patient's records together."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    rng = rng or np.random.default_rng()
    groups = manifest.patient_groups()
    if len(groups) < 3:
        raise ConfigError(f"need at least 3 patient groups to split, got {len(groups)}")
    keys = sorted(groups)
    rng.shuffle(keys)
    total = len(manifest)
    targets = [fractions[0] * total, (fractions[0] + fractions[1]) * total]
    out, seen, split_idx = [], 0, 0
    for key in keys:
        if split_idx < 2 and seen >= targets[split_idx] - 1e-9:
            split_idx += 1
        name = SPLITS[split_idx]
        for e in groups[key]:
            out.append(replace(e, split=name))
        seen += len(groups[key])
    return Manifest(out)


# ---------------------------------------------------------------------------
# resizing


def resize_affine(record: VolumeRecord, target_dims) -> VolumeRecord:
    """Uniform trilinear resample to the target (D,H,W)."""
    d, h, w = (int(t) for t in target_dims)
    if min(d, h, w) < 1:
        raise ConfigError(f"target dims must be >= 1, got {target_dims}")
    resized = trilinear_upsample(Tensor(record.values[None]), (d, h, w)).data[0]
    return replace(record, values=resized)


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomConfig:
    """Synthetic dataset geometry: one bright band per depth half; the
    positive class thins the band in the affected half by fraction delta."""

    dims: tuple = (32, 48, 28)
    n_volumes: int = 100
    balance: float = 0.5
    band_center: int | None = None  # depth row within each half; default mid-half
    band_thickness: int = 4
    delta: float = 0.5
    affected_side: str = "random"  # superior | inferior | random
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        d = int(self.dims[0])
        if d % 2:
            raise ConfigError(f"phantom depth must be even, got {d}")
        if self.band_thickness < 2:
            raise ConfigError("band thickness must be >= 2")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError(f"thinning fraction must lie in [0,1), got {self.delta}")
        if self.delta > 0 and self.delta * self.band_thickness < 1:
            raise ConfigError("delta * thickness must remove at least one voxel row")
        if self.affected_side not in ("superior", "inferior", "random"):
            raise ConfigError(f"bad affected_side {self.affected_side!r}")
        center = self.band_center if self.band_center is not None else d // 4
        start = center - self.band_thickness // 2
        if start < 0 or start + self.band_thickness > d // 2:
            raise ConfigError("band does not fit inside a depth half")
        object.__setattr__(self, "band_center", center)


def phantom_generate(cfg: PhantomConfig) -> list:
    """Generate labeled phantom volumes, one synthetic patient each."""
    d, h, w = (int(x) for x in cfg.dims)
    half = d // 2
    t = cfg.band_thickness
    start = cfg.band_center - t // 2
    thinned = t - int(round(cfg.delta * t)) if cfg.delta > 0 else t
    rng = np.random.default_rng(cfg.seed)
    n_pos = int(round(cfg.n_volumes * cfg.balance))
    labels = np.array([1] * n_pos + [0] * (cfg.n_volumes - n_pos))
    rng.shuffle(labels)
    records = []
    for i, label in enumerate(labels):
        vol = rng.normal(0.2, cfg.sigma, size=(1, d, h, w))
        side = cfg.affected_side
        if side == "random":
            side = "superior" if rng.random() < 0.5 else "inferior"
        for half_name, offset in (("superior", 0), ("inferior", half)):
            extent = thinned if (label == 1 and half_name == side) else t
            vol[:, offset + start: offset + start + extent] = 0.8
        vol = np.clip(vol, 0.0, 1.0)
        records.append(VolumeRecord(
            values=vol, label=int(label), patient_id=f"P{i:05d}",
            eye="left" if rng.random() < 0.5 else "right",
        ))
    return records


def write_phantom_dataset(cfg: PhantomConfig, out_dir) -> Manifest:
    """Materialize a phantom set as OCTV files plus a manifest CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(phantom_generate(cfg)):
        path = out_dir / f"phantom_{i:05d}.octv"
        write_volume(rec, path)
        entries.append(ManifestEntry(str(path), rec.label, rec.patient_id, rec.eye))
    manifest = Manifest(entries)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
