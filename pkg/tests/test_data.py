import json

import numpy as np
import pytest

from mmgl.data import (
    MIN_VOLUME_DIM,
    N_CLASSES,
    SLICE_SIZE,
    VIEWS,
    DatasetSplit,
    InvalidInputError,
    LabelVolume,
    ManifestEntry,
    ShapeMismatchError,
    SliceSample,
    Volume,
    VolumeFormatError,
    check_view,
    derive_seed,
    downsample_labels,
    load_manifest_volumes,
    normalize_minmax,
    prepare_slice,
    read_manifest,
    resize_slice,
    slice_bank,
    slice_volume,
    split_dataset,
    write_manifest,
)

from oracles import downsample_oracle


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seen = {derive_seed(a, b) for a in range(6) for b in range(6)}
    assert len(seen) == 36
    assert all(0 <= s < 2**32 for s in seen)
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_check_view_aliases():
    assert check_view("t") == "transaxial"
    assert check_view("coronal") == "coronal"
    with pytest.raises(ValueError):
        check_view("oblique")


def test_volume_validation(rng):
    Volume(voxels=rng.random((8, 9, 10)), id="ok")
    with pytest.raises(InvalidInputError):
        Volume(voxels=rng.random((8, 8)), id="flat")
    with pytest.raises(InvalidInputError):
        Volume(voxels=rng.random((4, 8, 8)), id="thin")
    bad = rng.random((8, 8, 8))
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        Volume(voxels=bad, id="nan")
    assert MIN_VOLUME_DIM == 8


def test_label_volume_validation(rng):
    LabelVolume(labels=rng.integers(0, N_CLASSES, size=(8, 8, 8)))
    with pytest.raises(InvalidInputError):
        LabelVolume(labels=np.full((8, 8, 8), N_CLASSES))
    with pytest.raises(InvalidInputError):
        LabelVolume(labels=np.full((8, 8, 8), -1))


def test_slice_volume_partitions(rng):
    vox = rng.random((8, 10, 12)).astype(np.float32)
    lab = rng.integers(0, 3, size=(8, 10, 12))
    vol = Volume(voxels=vox, id="v")
    labels = LabelVolume(labels=lab)
    for view, axis, count in (("transaxial", 0, 8), ("coronal", 1, 10), ("sagittal", 2, 12)):
        slices = slice_volume(vol, labels, view)
        assert len(slices) == count
        stacked = np.stack([s.image for s in slices], axis=axis)
        assert np.array_equal(stacked, vox)
        masks = np.stack([s.mask for s in slices], axis=axis)
        assert np.array_equal(masks, lab)
        assert all(s.view == view and s.volume_id == "v" for s in slices)
        assert [s.slice_index for s in slices] == list(range(count))


def test_slice_volume_shape_mismatch(rng):
    vol = Volume(voxels=rng.random((8, 8, 8)), id="v")
    labels = LabelVolume(labels=np.zeros((8, 8, 9), dtype=int))
    with pytest.raises(ShapeMismatchError):
        slice_volume(vol, labels, "transaxial")


def test_normalize_minmax(rng):
    x = rng.random((12, 12)) * 40.0 - 17.0
    y = normalize_minmax(x)
    assert y.min() == 0.0 and y.max() == 1.0
    assert np.allclose(normalize_minmax(y), y, atol=1e-7)
    assert np.array_equal(normalize_minmax(np.full((5, 5), 3.3)), np.zeros((5, 5)))
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(InvalidInputError):
        normalize_minmax(bad)


def test_resize_slice(rng):
    img = rng.random((40, 40)).astype(np.float32)
    out = resize_slice(img, 160)
    assert out.shape == (160, 160)
    same = resize_slice(img, 40)
    assert np.array_equal(same, img)
    assert same is not img  # defensive copy on the identity path
    mask = rng.integers(0, 8, size=(40, 40))
    up = resize_slice(mask, 160, is_mask=True)
    assert up.dtype == mask.dtype
    assert set(np.unique(up)) <= set(np.unique(mask))


def test_prepare_slice(labeled_slice):
    assert labeled_slice.image.shape == (SLICE_SIZE, SLICE_SIZE)
    assert labeled_slice.mask.shape == (SLICE_SIZE, SLICE_SIZE)
    assert 0.0 <= labeled_slice.image.min() and labeled_slice.image.max() <= 1.0
    assert labeled_slice.mask.max() > 0


def test_downsample_labels_matches_oracle(rng):
    for stride in (1, 2, 4, 8):
        mask = rng.integers(0, 8, size=(16, 16))
        assert np.array_equal(downsample_labels(mask, stride), downsample_oracle(mask, stride))
    assert np.array_equal(downsample_labels(mask, 1), mask)
    with pytest.raises(ValueError):
        downsample_labels(rng.integers(0, 2, size=(15, 16)), 2)
    with pytest.raises(ValueError):
        downsample_labels(mask, 0)


def test_downsample_class_subset(rng):
    mask = rng.integers(0, 8, size=(160, 160))
    down = downsample_labels(mask, 16)
    assert down.shape == (10, 10)
    assert set(np.unique(down)) <= set(np.unique(mask))


def test_split_sizes_and_disjointness():
    ids = [f"v{i:02d}" for i in range(10)]
    split = split_dataset(ids, labeled_fraction=0.2, seed=3)
    assert len(split.train_ids) == 6
    assert len(split.val_ids) == 2
    assert len(split.test_ids) == 2
    assert sorted(split.all_ids) == sorted(ids)
    assert set(split.labeled_ids) <= set(split.train_ids)
    # ceil(0.2 * 6) = 2
    assert len(split.labeled_ids) == 2
    assert split.labeled_fraction == pytest.approx(2 / 6)


def test_split_determinism():
    ids = [f"v{i}" for i in range(8)]
    a = split_dataset(ids, 0.5, seed=9)
    b = split_dataset(ids, 0.5, seed=9)
    assert a == b
    c = split_dataset(ids, 0.5, seed=10)
    assert a != c


def test_split_validation():
    with pytest.raises(ValueError):
        split_dataset(["a", "b", "c"], 0.5, seed=0)
    with pytest.raises(ValueError):
        split_dataset(["a", "b", "c", "d"], 0.0, seed=0)
    with pytest.raises(ValueError):
        split_dataset(["a", "b", "c", "d"], 1.5, seed=0)
    with pytest.raises(ValueError):
        DatasetSplit(train_ids=["a"], val_ids=["a"], test_ids=["b"], labeled_ids=["a"], seed=0)
    with pytest.raises(ValueError):
        DatasetSplit(train_ids=["a"], val_ids=["b"], test_ids=["c"], labeled_ids=["b"], seed=0)


def test_split_save_load_round_trip(tmp_path):
    split = split_dataset([f"v{i}" for i in range(12)], 0.25, seed=4)
    path = tmp_path / "split.json"
    split.save(path)
    loaded = DatasetSplit.load(path)
    assert loaded == split
    payload = json.loads(path.read_text())
    assert set(payload) == {"train", "val", "test", "labeled", "seed"}


def test_manifest_round_trip(tmp_path):
    entries = [
        ManifestEntry(image="a.nii.gz", label="a_label.nii.gz", id="a"),
        ManifestEntry(image="b.nii.gz"),
    ]
    path = tmp_path / "manifest.json"
    write_manifest(path, entries)
    back = read_manifest(path)
    assert back == entries


def test_manifest_errors(tmp_path):
    path = tmp_path / "manifest.json"
    with pytest.raises(FileNotFoundError):
        read_manifest(path)
    path.write_text("{not json")
    with pytest.raises(VolumeFormatError):
        read_manifest(path)
    path.write_text(json.dumps({"image": "a.nii"}))
    with pytest.raises(VolumeFormatError):
        read_manifest(path)
    path.write_text(json.dumps([{"image": "a.nii", "extra": 1}]))
    with pytest.raises(VolumeFormatError):
        read_manifest(path)
    path.write_text(json.dumps([{"label": "a.nii"}]))
    with pytest.raises(VolumeFormatError):
        read_manifest(path)


def test_load_manifest_volumes(tiny_ds_dir):
    pairs = load_manifest_volumes(tiny_ds_dir / "manifest.json")
    assert len(pairs) == 4
    for vol, lab in pairs:
        assert lab is not None
        assert vol.shape == lab.shape == (32, 32, 32)
    ids = [v.id for v, _ in pairs]
    some = load_manifest_volumes(tiny_ds_dir / "manifest.json", ids=ids[:2])
    assert [v.id for v, _ in some] == ids[:2]


def test_slice_bank_counts_and_shape(tiny_volumes):
    bank = slice_bank(tiny_volumes[:2], VIEWS, slice_step=8)
    # 2 volumes x 3 views x ceil(32/8) slices
    assert len(bank) == 2 * 3 * 4
    for s in bank:
        assert s.image.shape == (SLICE_SIZE, SLICE_SIZE)
        assert s.mask is not None and s.mask.shape == (SLICE_SIZE, SLICE_SIZE)


def test_slice_bank_drop_empty(tiny_volumes):
    full = slice_bank(tiny_volumes[:1], ("transaxial",), slice_step=1)
    kept = slice_bank(tiny_volumes[:1], ("transaxial",), slice_step=1, drop_empty=True)
    assert 0 < len(kept) < len(full)
    assert all(s.mask.any() for s in kept)


def test_slice_sample_holds_view_metadata(labeled_slice):
    assert labeled_slice.view == "transaxial"
    assert isinstance(labeled_slice.volume_id, str)
    assert isinstance(labeled_slice.slice_index, int)
    assert isinstance(labeled_slice, SliceSample)
