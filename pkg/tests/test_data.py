import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xvol import config
from xvol.data import (
    Manifest,
    ManifestEntry,
    PhantomConfig,
    VolumeRecord,
    load_record,
    phantom_generate,
    read_manifest,
    read_volume,
    resize_affine,
    split_dataset,
    write_manifest,
    write_phantom_dataset,
    write_volume,
)
from xvol.errors import ConfigError, DataFormatError, ShapeError


@pytest.fixture(autouse=True)
def f64():
    with config.precision_context("f64"):
        yield


def rec(values, label=0, **kw):
    return VolumeRecord(values=values, label=label, **kw)


# ---------------------------------------------------------------------------
# volume files

def test_volume_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(1, 3, 4, 5)).astype(np.float32)
    path = tmp_path / "v.octv"
    write_volume(rec(values, label=1), path)
    back = read_volume(path, label=1)
    np.testing.assert_array_equal(back.values.astype(np.float32), values)
    assert back.dims == (3, 4, 5)
    assert back.label == 1


def test_volume_header_errors(tmp_path):
    path = tmp_path / "v.octv"
    write_volume(rec(np.zeros((1, 2, 2, 2))), path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "m.octv"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(DataFormatError):
        read_volume(bad_magic)

    bad_version = bytearray(raw)
    bad_version[4] = 9
    (tmp_path / "ver.octv").write_bytes(bytes(bad_version))
    with pytest.raises(DataFormatError):
        read_volume(tmp_path / "ver.octv")

    (tmp_path / "short.octv").write_bytes(bytes(raw[:-4]))
    with pytest.raises(DataFormatError) as e:
        read_volume(tmp_path / "short.octv")
    assert "2x2x2" in str(e.value).replace("1x2x2x2", "2x2x2")


def test_write_rejects_non_finite(tmp_path):
    v = np.zeros((1, 2, 2, 2))
    v[0, 0, 0, 0] = np.nan
    with pytest.raises(DataFormatError):
        write_volume(rec(v), tmp_path / "x.octv")


def test_record_validation():
    with pytest.raises(ShapeError):
        VolumeRecord(values=np.zeros((2, 2, 2)), label=0)
    with pytest.raises(DataFormatError):
        VolumeRecord(values=np.zeros((1, 2, 2, 2)), label=3)
    with pytest.raises(DataFormatError):
        VolumeRecord(values=np.zeros((1, 2, 2, 2)), label=0, eye="up")


# ---------------------------------------------------------------------------
# manifests and splits

def make_manifest(n_patients, records_per_patient=1):
    entries = []
    for p in range(n_patients):
        for r in range(records_per_patient):
            entries.append(ManifestEntry(f"v{p}_{r}.octv", p % 2, f"P{p:03d}", "left"))
    return Manifest(entries)


def test_manifest_csv_round_trip(tmp_path):
    m = split_dataset(make_manifest(10), rng=np.random.default_rng(0))
    path = tmp_path / "manifest.csv"
    write_manifest(m, path)
    back = read_manifest(path)
    assert back.entries == m.entries


def test_manifest_header_and_label_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("path,label\nv.octv,0\n")
    with pytest.raises(DataFormatError):
        read_manifest(p)
    p.write_text("path,label,patient_id,eye\nv.octv,two,P1,left\n")
    with pytest.raises(DataFormatError):
        read_manifest(p)


def test_split_fractions_single_record_patients():
    m = split_dataset(make_manifest(100), rng=np.random.default_rng(1))
    counts = {s: len(m.subset(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 65, "val": 15, "test": 20}


def test_split_keeps_patient_groups_together():
    base = make_manifest(12, records_per_patient=5)
    m = split_dataset(base, rng=np.random.default_rng(2))
    for pid, entries in m.patient_groups().items():
        assert len({e.split for e in entries}) == 1, pid


@settings(max_examples=25, deadline=None)
@given(n=st.integers(3, 40), per=st.integers(1, 4), seed=st.integers(0, 100))
def test_split_property_grouping_and_coverage(n, per, seed):
    m = split_dataset(make_manifest(n, per), rng=np.random.default_rng(seed))
    assert len(m) == n * per
    for entries in m.patient_groups().values():
        assert len({e.split for e in entries}) == 1
    assert {e.split for e in m.entries} <= {"train", "val", "test"}


def test_split_same_seed_identical():
    base = make_manifest(30, 2)
    a = split_dataset(base, rng=np.random.default_rng(5))
    b = split_dataset(base, rng=np.random.default_rng(5))
    assert a.entries == b.entries


def test_split_errors():
    with pytest.raises(ConfigError):
        split_dataset(make_manifest(10), fractions=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        split_dataset(make_manifest(2))


# ---------------------------------------------------------------------------
# resizing

def test_resize_identity_and_constant():
    rng = np.random.default_rng(3)
    r = rec(rng.normal(size=(1, 4, 5, 6)))
    same = resize_affine(r, (4, 5, 6))
    np.testing.assert_allclose(same.values, r.values, atol=1e-12)
    const = resize_affine(rec(np.full((1, 4, 5, 6), 0.7)), (3, 9, 2))
    assert const.values.shape == (1, 3, 9, 2)
    np.testing.assert_allclose(const.values, 0.7, atol=1e-12)


def test_resize_downsample_shape():
    r = rec(np.zeros((1, 16, 40, 32)))
    out = resize_affine(r, (8, 12, 7))
    assert out.values.shape == (1, 8, 12, 7)
    assert out.label == r.label


# ---------------------------------------------------------------------------
# phantoms

def test_phantom_determinism_and_balance():
    cfg = PhantomConfig(dims=(8, 6, 4), n_volumes=20, sigma=0.05, seed=11)
    a = phantom_generate(cfg)
    b = phantom_generate(cfg)
    assert len(a) == 20
    assert sum(r.label for r in a) == 10
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.values, rb.values)
        assert ra.label == rb.label


def test_phantom_noise_free_geometry():
    # sigma=0: band voxel counts give the exact hemiretina means
    cfg = PhantomConfig(dims=(8, 6, 4), n_volumes=6, band_thickness=2, delta=0.5,
                        sigma=0.0, affected_side="superior", seed=0)
    d_half, t = 4, 2
    for r in phantom_generate(cfg):
        sup = r.values[0, :4]
        inf = r.values[0, 4:]
        mean_full = (0.8 * t + 0.2 * (d_half - t)) / d_half
        np.testing.assert_allclose(inf.mean(), mean_full, atol=1e-12)
        if r.label == 1:
            thinned = t - 1  # delta 0.5 of thickness 2
            want = (0.8 * thinned + 0.2 * (d_half - thinned)) / d_half
            np.testing.assert_allclose(sup.mean(), want, atol=1e-12)
            assert sup.mean() < inf.mean()
        else:
            np.testing.assert_allclose(sup.mean(), mean_full, atol=1e-12)


def test_phantom_values_clamped():
    cfg = PhantomConfig(dims=(8, 6, 4), n_volumes=4, sigma=2.0, seed=1)
    for r in phantom_generate(cfg):
        assert r.values.min() >= 0.0 and r.values.max() <= 1.0


def test_phantom_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(dims=(7, 6, 4))
    with pytest.raises(ConfigError):
        PhantomConfig(band_thickness=1)
    with pytest.raises(ConfigError):
        PhantomConfig(delta=1.0)
    with pytest.raises(ConfigError):
        PhantomConfig(band_thickness=4, delta=0.1)
    with pytest.raises(ConfigError):
        PhantomConfig(dims=(8, 6, 4), band_center=0, band_thickness=4)


def test_write_phantom_dataset_round_trip(tmp_path):
    cfg = PhantomConfig(dims=(8, 6, 4), n_volumes=5, seed=2)
    manifest = write_phantom_dataset(cfg, tmp_path / "set")
    assert len(manifest) == 5
    back = read_manifest(tmp_path / "set" / "manifest.csv")
    assert len(back) == 5
    regenerated = phantom_generate(cfg)
    for entry, want in zip(back.entries, regenerated):
        got = load_record(entry)
        np.testing.assert_allclose(got.values, want.values, atol=1e-7)
        assert got.label == want.label
