import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundus_restore.data import (DegradationSpec, FLIPS, apply_transform, augment_pair,
                                 crop_coords, crop_patch_pair, draw_transform, item_rng,
                                 kfold_split, load_dataset, make_fixture_pair, read_image,
                                 read_manifest, retina_image, synth_degrade, write_fixture_tree,
                                 write_image)
from fundus_restore.errors import (ConfigError, DataError, DimensionMismatchError,
                                   MissingCounterpartError, UnreadableFileError)
from fundus_restore.evaluation import psnr


def _tiny_tree(root, n_train, n_test, size=8):
    img = np.zeros((size, size, 3))
    for split, n, offset in (("train", n_train, 0), ("test", n_test, n_train)):
        for d in ("lq", "hq"):
            (root / split / d).mkdir(parents=True)
        for i in range(n):
            for d in ("lq", "hq"):
                write_image(root / split / d / f"img{offset + i:03d}.png", img)
    return root


# -- loading -------------------------------------------------------------------


def test_fixture_tree_has_six_records(fixture_tree):
    ds = load_dataset(fixture_tree.root)
    assert len(ds) == 6
    assert len(set(ds.ids)) == 6
    lq, hq = ds.pairs[0].load()
    assert lq.shape == hq.shape and lq.dtype == np.float32
    assert 0 <= lq.min() and lq.max() <= 1


def test_missing_counterpart_names_file(tmp_path):
    root = _tiny_tree(tmp_path / "ds", 2, 1)
    (root / "train" / "hq" / "img001.png").unlink()
    with pytest.raises(MissingCounterpartError, match="img001"):
        load_dataset(root)


def test_dimension_mismatch_names_id(tmp_path):
    root = _tiny_tree(tmp_path / "ds", 2, 1)
    write_image(root / "test" / "hq" / "img002.png", np.zeros((9, 8, 3)))
    with pytest.raises(DimensionMismatchError, match="img002"):
        load_dataset(root)


def test_unreadable_file_names_path(tmp_path):
    root = _tiny_tree(tmp_path / "ds", 1, 1)
    (root / "train" / "lq" / "img000.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableFileError, match="img000"):
        load_dataset(root)


def test_id_in_both_splits_rejected(tmp_path):
    root = _tiny_tree(tmp_path / "ds", 2, 1)
    for d in ("lq", "hq"):
        write_image(root / "test" / d / "img000.png", np.zeros((8, 8, 3)))
    with pytest.raises(DataError, match="img000"):
        load_dataset(root)


def test_ninety_thirty_layout_is_three_to_one(tmp_path):
    ds = load_dataset(_tiny_tree(tmp_path / "rf", 90, 30))
    n_train, n_test = len(ds.split("train")), len(ds.split("test"))
    assert n_train + n_test == 120
    assert n_train == 3 * n_test


def test_sixteen_bit_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_image(tmp_path / "a.png", img, bits=16)
    back = read_image(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12


def test_manifest_records(fixture_tree):
    recs = read_manifest(fixture_tree.root / "manifest.jsonl")
    assert len(recs) == 6
    assert {"id", "split", "lq", "hq", "height", "width", "lq_sha256", "hq_sha256"} <= set(recs[0])


# -- cropping ------------------------------------------------------------------


def test_crop_full_size_is_whole_image():
    lq, hq = make_fixture_pair(32, 0)
    a, b = crop_patch_pair(lq, hq, 32, np.random.default_rng(0))
    assert np.array_equal(a, lq) and np.array_equal(b, hq)


def test_crop_deterministic():
    coords = [crop_coords(300, 200, 128, item_rng(7, 2, 5)) for _ in range(3)]
    assert coords[0] == coords[1] == coords[2]
    assert crop_coords(300, 200, 128, item_rng(7, 2, 6)) != coords[0] or \
        crop_coords(300, 200, 128, item_rng(7, 3, 5)) != coords[0]


def test_thousand_crops_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        top, left = crop_coords(2560, 2560, 128, rng)
        assert 0 <= top and top + 128 <= 2560
        assert 0 <= left and left + 128 <= 2560


def test_crop_too_large():
    with pytest.raises(DataError):
        crop_coords(64, 100, 65, np.random.default_rng(0))


def _coordinate_image(h, w):
    """Channels hold (row, col, row*w+col) so every pixel is identifiable."""
    r, c = np.mgrid[0:h, 0:w]
    return np.stack([r, c, r * w + c], axis=-1).astype(np.float64)


def test_crop_preserves_registration():
    lq = _coordinate_image(40, 50)
    hq = lq * 2 + 1
    for s in range(20):
        a, b = crop_patch_pair(lq, hq, 16, np.random.default_rng(s))
        assert np.array_equal(b, a * 2 + 1)


# -- augmentation --------------------------------------------------------------


def test_identity_transform():
    img = _coordinate_image(5, 6)
    assert np.array_equal(apply_transform(img, "none", 0), img)


def test_rotation_group_law():
    img = _coordinate_image(5, 6)
    twice = apply_transform(apply_transform(img, "none", 1), "none", 1)
    assert np.array_equal(twice, apply_transform(img, "none", 2))
    assert np.array_equal(apply_transform(apply_transform(img, "none", 3), "none", 1), img)


def test_all_twelve_transforms_are_distinct_maps():
    img = _coordinate_image(4, 4)
    outs = {apply_transform(img, f, r).tobytes() for f in FLIPS for r in range(4)}
    # h-flip then 180 == v-flip, so the 12 draws realise the 8 symmetries of the square.
    assert len(outs) == 8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_preserves_registration(seed):
    lq = _coordinate_image(6, 9)
    hq = lq * 3 - 2
    a, b = augment_pair(lq, hq, np.random.default_rng(seed))
    assert np.array_equal(b, a * 3 - 2)
    flip, rot = draw_transform(np.random.default_rng(seed))
    assert np.array_equal(a, apply_transform(lq, flip, rot))


# -- k-fold --------------------------------------------------------------------


@pytest.mark.parametrize("k,size", [(5, 24), (10, 12)])
def test_kfold_sizes(k, size):
    ids = [f"id{i:03d}" for i in range(120)]
    folds = kfold_split(ids, k, seed=3)
    assert len(folds) == k
    assert all(len(valid) == size and len(train) == 120 - size for train, valid in folds)


def test_kfold_partition_and_determinism():
    ids = [f"id{i}" for i in range(23)]
    folds = kfold_split(ids, 4, seed=1)
    valid = [v for _, v in folds]
    assert sorted(sum(valid, [])) == sorted(ids)
    assert max(map(len, valid)) - min(map(len, valid)) <= 1
    for train, v in folds:
        assert not set(train) & set(v) and set(train) | set(v) == set(ids)
    assert kfold_split(ids, 4, seed=1) == folds
    assert kfold_split(ids, 4, seed=2) != folds


def test_kfold_range():
    with pytest.raises(ConfigError):
        kfold_split(["a", "b"], 3)
    with pytest.raises(ConfigError):
        kfold_split(["a", "b"], 1)


# -- synthetic degradation -------------------------------------------------------


def test_identity_degradation():
    img = retina_image(48, 0)
    assert np.array_equal(synth_degrade(img, DegradationSpec()), img)


def test_gaussian_blur_keeps_constant_mean():
    img = np.full((20, 24, 3), 0.37)
    out = synth_degrade(img, DegradationSpec(strength=3.0))
    assert out.mean() == pytest.approx(0.37, abs=1e-12)


@pytest.mark.parametrize("kind", ["gaussian", "motion", "defocus"])
def test_blur_monotone_psnr(kind):
    clean = retina_image(128, 0)
    scores = [psnr(synth_degrade(clean, DegradationSpec(blur=kind, strength=s)), clean)
              for s in (1.0, 2.0, 4.0)]
    assert scores[0] > scores[1] > scores[2]


def test_degradation_deterministic_and_clipped():
    img = retina_image(32, 1)
    spec = DegradationSpec(blur="motion", strength=5, angle=30, gain=1.5, bias=0.1,
                           noise_sigma=0.05, seed=4)
    a, b = synth_degrade(img, spec), synth_degrade(img, spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    other = synth_degrade(img, DegradationSpec(**{**spec.__dict__, "seed": 5}))
    assert not np.array_equal(a, other)


@pytest.mark.parametrize("kwargs", [{"blur": "fog"}, {"strength": -1}, {"gain": 0},
                                    {"bias": 2}, {"noise_sigma": -0.1}])
def test_degradation_validation(kwargs):
    with pytest.raises(ConfigError):
        synth_degrade(np.zeros((8, 8, 3)), DegradationSpec(**kwargs))


def test_fixture_tree_deterministic(tmp_path):
    a = write_fixture_tree(tmp_path / "a", n=4, seed=2, size=32)
    b = write_fixture_tree(tmp_path / "b", n=4, seed=2, size=32)
    for pa, pb in zip(a.pairs, b.pairs):
        assert pa.lq_path.read_bytes() == pb.lq_path.read_bytes()
        assert pa.hq_path.read_bytes() == pb.hq_path.read_bytes()
