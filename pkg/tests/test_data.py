import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqssl.data import (LABEL_INDEX, PLANES, SEQUENCE_LABELS, PhantomSpec, SliceRecord, SplitManifest, Volume,
                         build_slice_table, central_range, extract_central_slices, generate_phantom_dataset,
                         ingest, largest_remainder, load_slice_table, normalize_intensity, parse_planes,
                         prepare_slices, read_volume, resample_slice, split_by_patient, write_volume)
from seqssl.errors import ValidationError

from oracles import largest_remainder_exact, nearest_class_mean_accuracy, round_half_up


def make_records(n_patients, per_patient=3):
    recs = []
    for p in range(n_patients):
        for k in range(per_patient):
            recs.append(SliceRecord(f"P{p}", f"P{p}-S{k}", SEQUENCE_LABELS[k % 9], "axial", k, np.zeros((4, 4))))
    return recs


# phantom -------------------------------------------------------------------


def test_phantom_one_study_per_class():
    vols = generate_phantom_dataset(PhantomSpec(1, (8, 10, 12), 0.1, 7))
    assert sorted(v.sequence_label for v in vols) == sorted(SEQUENCE_LABELS)
    assert all(v.voxels.shape == (8, 10, 12) for v in vols)


def test_phantom_is_deterministic():
    a = generate_phantom_dataset(PhantomSpec(2, (12, 12, 12), 0.2, 7))
    b = generate_phantom_dataset(PhantomSpec(2, (12, 12, 12), 0.2, 7))
    assert all(np.array_equal(x.voxels, y.voxels) for x, y in zip(a, b))
    c = generate_phantom_dataset(PhantomSpec(2, (12, 12, 12), 0.2, 8))
    assert not np.array_equal(a[0].voxels, c[0].voxels)


@pytest.mark.parametrize("spec", [PhantomSpec(0), PhantomSpec(1, (0, 4, 4)), PhantomSpec(1, noise_level=-0.1)])
def test_phantom_rejects_invalid_spec(spec):
    with pytest.raises(ValidationError):
        generate_phantom_dataset(spec)


@pytest.mark.parametrize("noise, shape", [(0.0, (32, 32, 32)), (0.1, (32, 32, 32)), (0.1, (64, 64, 64))])
def test_phantom_separable_by_nearest_class_mean(noise, shape):
    vols = generate_phantom_dataset(PhantomSpec(20, shape, noise, 0))
    x, y, g = [], [], []
    for v in vols:
        (rec,) = extract_central_slices(v, 1e-9, ["axial"])
        x.append(normalize_intensity(rec.pixels))
        y.append(LABEL_INDEX[v.sequence_label])
        g.append(v.patient_id)
    assert nearest_class_mean_accuracy(x, y, g) >= 0.8


def test_phantom_is_not_trivial_at_high_noise():
    vols = generate_phantom_dataset(PhantomSpec(20, (32, 32, 32), 0.3, 0))
    x, y, g = [], [], []
    for v in vols:
        (rec,) = extract_central_slices(v, 1e-9, ["axial"])
        x.append(normalize_intensity(rec.pixels))
        y.append(LABEL_INDEX[v.sequence_label])
        g.append(v.patient_id)
    assert nearest_class_mean_accuracy(x, y, g) < 0.95


# slices --------------------------------------------------------------------


def test_central_slices_example():
    vol = Volume("p", "s", "T1", np.zeros((100, 5, 5), dtype=np.float32))
    recs = extract_central_slices(vol, 0.3, ["axial"])
    assert [r.slice_index for r in recs] == list(range(35, 65))


def test_central_slices_full_and_three_planes():
    vol = Volume("p", "s", "T1", np.random.default_rng(0).random((100, 100, 100)).astype(np.float32))
    assert len(extract_central_slices(vol, 0.3, PLANES)) == 90
    small = Volume("p", "s", "T1", np.zeros((6, 7, 8), dtype=np.float32))
    recs = extract_central_slices(small, 1.0, PLANES)
    assert len(recs) == 6 + 7 + 8
    axial = [r for r in recs if r.plane == "axial"]
    assert axial[0].pixels.shape == (7, 8)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.floats(1e-6, 1.0))
def test_slice_count_law(length, fraction):
    k = max(1, round_half_up(fraction * length))
    r = central_range(length, fraction)
    assert len(r) == k
    assert r.start == (length - k) // 2


def test_extract_rejects_bad_fraction():
    vol = Volume("p", "s", "T1", np.zeros((4, 4, 4), dtype=np.float32))
    for f in (0.0, 1.5):
        with pytest.raises(ValidationError):
            extract_central_slices(vol, f, ["axial"])
    with pytest.raises(ValidationError):
        Volume("p", "s", "T1", np.zeros((0, 4, 4)))
    with pytest.raises(ValidationError):
        Volume("p", "s", "T7", np.zeros((4, 4, 4)))


def test_parse_planes_short_names():
    assert parse_planes("sag,cor,ax") == ("sagittal", "coronal", "axial")
    with pytest.raises(ValidationError):
        parse_planes("oblique")


def test_resample_shapes_and_identity():
    rng = np.random.default_rng(1)
    img = rng.random((256, 256))
    assert resample_slice(img, (84, 84)).shape == (84, 84)
    assert resample_slice(img, (80, 80)).shape == (80, 80)
    small = rng.random((84, 84))
    assert np.max(np.abs(resample_slice(small, (84, 84)) - small)) <= 1e-6
    assert np.all(resample_slice(np.full((37, 51), 5.0), (84, 84)) == 5.0)


def test_resample_corner_alignment():
    img = np.arange(12, dtype=float).reshape(3, 4)
    out = resample_slice(img, (5, 7))
    assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]
    assert out[0, -1] == img[0, -1] and out[-1, 0] == img[-1, 0]
    # a linear ramp is reproduced exactly by bilinear interpolation
    np.testing.assert_allclose(out[2, :], np.linspace(4, 7, 7))


def test_resample_rejects_nonfinite():
    img = np.ones((4, 4))
    img[1, 1] = np.nan
    with pytest.raises(ValidationError):
        resample_slice(img, (8, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 50), st.integers(1, 50), st.integers(0, 10**6))
def test_resample_preserves_range(h, w, th, tw, seed):
    img = np.random.default_rng(seed).normal(size=(h, w)) * 100
    out = resample_slice(img, (th, tw))
    assert out.shape == (th, tw)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


def test_normalize():
    img = np.linspace(10, 110, 20).reshape(4, 5)
    out = normalize_intensity(img)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(normalize_intensity(np.full((3, 3), 4.2)) == 0)
    np.testing.assert_array_equal(normalize_intensity(out), out)


def test_empty_slices_dropped():
    vox = np.zeros((10, 10, 10), dtype=np.float32)
    vox[5, 3:6, 3:6] = 1.0
    recs = prepare_slices([Volume("p", "s", "T1", vox)], 1.0, ["axial"], 8)
    assert [r.slice_index for r in recs] == [5]


# splits --------------------------------------------------------------------


def test_largest_remainder_examples():
    assert largest_remainder(10, (0.7, 0.1, 0.2)) == [7, 1, 2]
    assert largest_remainder(8, (0.7, 0.1, 0.2)) == [6, 1, 1]
    assert largest_remainder(1, (1.0, 0.0, 0.0)) == [1, 0, 0]


@given(st.integers(1, 5000), st.sampled_from([(0.7, 0.1, 0.2), (0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.34, 0.33, 0.33)]))
def test_largest_remainder_matches_exact(n, ratios):
    assert largest_remainder(n, ratios) == largest_remainder_exact(n, ratios)


def test_split_ten_patients():
    m = split_by_patient(make_records(10), seed=3)
    assert [len(m.patients(s)) for s in ("train", "val", "test")] == [7, 1, 2]


def test_single_patient_all_train():
    m = split_by_patient(make_records(1), (1.0, 0.0, 0.0), seed=0)
    assert {e.split for e in m.entries} == {"train"}


def test_split_errors():
    with pytest.raises(ValidationError):
        split_by_patient(make_records(2), seed=0)
    with pytest.raises(ValidationError):
        split_by_patient(make_records(5), (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ValidationError):
        split_by_patient([], seed=0)


def test_split_deterministic_bytes():
    a = split_by_patient(make_records(12), seed=11).to_jsonl()
    b = split_by_patient(make_records(12), seed=11).to_jsonl()
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 60), st.integers(0, 2**32 - 1))
def test_split_patient_disjoint(n_patients, seed):
    m = split_by_patient(make_records(n_patients, 2), seed=seed)
    tr, va, te = (m.patients(s) for s in ("train", "val", "test"))
    assert not (tr & va) and not (tr & te) and not (va & te)
    assert [len(tr), len(va), len(te)] == largest_remainder(n_patients, (0.7, 0.1, 0.2))


def test_manifest_roundtrip(tmp_path):
    m = split_by_patient(make_records(10), seed=2)
    path = m.write(tmp_path / "manifest.jsonl")
    back = SplitManifest.read(path)
    assert back.to_jsonl() == m.to_jsonl()
    assert back.seed == 2 and back.ratios == (0.7, 0.1, 0.2)
    first = path.read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"path", "patient_id", "study_id", "label", "plane",
                                                    "slice_index", "split"}


# containers ----------------------------------------------------------------


def test_volume_container_roundtrip(tmp_path):
    (vol,) = generate_phantom_dataset(PhantomSpec(1, (6, 7, 8), 0.1, 1))[:1]
    header = write_volume(vol, tmp_path)
    raw = header.with_suffix(".raw").read_bytes()
    assert len(raw) == 6 * 7 * 8 * 4
    assert np.array_equal(np.frombuffer(raw, dtype="<f4").reshape(6, 7, 8), vol.voxels)
    back = read_volume(header)
    assert back.study_id == vol.study_id and np.array_equal(back.voxels, vol.voxels)


def test_ingest_and_reload(tmp_path):
    for v in generate_phantom_dataset(PhantomSpec(3, (12, 12, 12), 0.1, 0)):
        write_volume(v, tmp_path / "vols")
    table = ingest(tmp_path / "vols", tmp_path / "out", 0.3, "sag,cor,ax", 40, seed=1)
    assert table.pixels.shape[1:] == (40, 40)
    # 27 volumes, round(0.3 * 12) = 4 slices per plane, 3 planes
    assert len(table) == 27 * 4 * 3
    loaded = load_slice_table(tmp_path / "out" / "manifest.jsonl")
    assert np.array_equal(loaded.pixels, table.pixels)
    assert loaded.manifest.to_jsonl() == table.manifest.to_jsonl()


def test_slice_table_views():
    table = build_slice_table(generate_phantom_dataset(PhantomSpec(10, (12, 12, 12), 0.1, 0)), 0.3, PLANES, 32)
    assert sum(len(table.split(s)) for s in ("train", "val", "test")) == len(table)
    assert set(table.split("train").labels) == set(range(9))
    assert table.at_resolution(40).pixels.shape[1:] == (40, 40)
    unl = table.split("train").unlabeled()
    assert not hasattr(unl, "labels")
