import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segsr.data import (
    DatasetManifest,
    PairedSample,
    apply_dihedral,
    augment,
    bicubic_resize,
    degrade_tree,
    load_image,
    make_pair,
    mod_crop,
    resize_weights,
    sample_batch,
    save_image,
    split_dataset,
)


def _touch_tree(root, sizes):
    for c, n in enumerate(sizes):
        d = root / f"c{c:02d}"
        d.mkdir(parents=True)
        for i in range(n):
            (d / f"{i:04d}.jpg").touch()
    return root


# ---------------------------------------------------------------- bicubic

def _keys(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def _scalar_resize_1d(row, n_out):
    n_in = len(row)
    scale = n_in / n_out
    support = max(scale, 1.0)
    out = []
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        acc = norm = 0.0
        j = math.floor(center - 2 * support)
        while j <= math.ceil(center + 2 * support):
            w = _keys((j - center) / support)
            acc += w * row[min(max(j, 0), n_in - 1)]
            norm += w
            j += 1
        out.append(acc / norm)
    return out


def _scalar_resize(img, out_hw):
    rows = [_scalar_resize_1d(list(r), out_hw[1]) for r in img]
    cols = [_scalar_resize_1d([rows[y][x] for y in range(len(rows))], out_hw[0]) for x in range(out_hw[1])]
    return np.array([[cols[x][y] for x in range(out_hw[1])] for y in range(out_hw[0])])


def test_identity_size():
    img = np.random.default_rng(0).random((3, 7, 9)).astype(np.float32)
    np.testing.assert_allclose(bicubic_resize(img, (7, 9)), img, atol=1e-6)


@pytest.mark.parametrize("out", [(3, 5), (16, 11), (1, 1)])
def test_constant_preserved(out):
    img = np.full((3, 8, 8), 0.37)
    np.testing.assert_allclose(bicubic_resize(img, out), 0.37, atol=1e-12)


def test_ramp_downscale_scalar_oracle():
    ramp = np.add.outer(np.arange(8.0), 2 * np.arange(8.0)) / 24
    np.testing.assert_allclose(bicubic_resize(ramp, (4, 4)), _scalar_resize(ramp, (4, 4)), atol=1e-12)


@pytest.mark.parametrize("out", [(13, 5), (3, 17), (4, 4)])
def test_random_scalar_oracle(out):
    img = np.random.default_rng(1).random((6, 9))
    np.testing.assert_allclose(bicubic_resize(img, out), _scalar_resize(img, out), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n_in=st.integers(1, 40), n_out=st.integers(1, 40))
def test_weight_rows_sum_to_one(n_in, n_out):
    assert np.abs(resize_weights(n_in, n_out).sum(axis=1) - 1).max() <= 1e-9


def test_dtype_preserved_and_unclamped():
    img = np.zeros((1, 8, 8), np.float32)
    img[0, :, 4:] = 1
    up = bicubic_resize(img, (16, 16))
    assert up.dtype == np.float32
    assert up.max() > 1 and up.min() < 0  # Catmull-Rom overshoot is kept


def test_bad_size():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4)), (0, 2))


# ---------------------------------------------------------------- split

def test_ucmerced_layout(tmp_path):
    m = split_dataset(_touch_tree(tmp_path, [100] * 21), (3, 1), seed=0)
    counts = m.counts()
    assert all(c == (75, 25) for c in counts.values())
    assert sum(a for a, _ in counts.values()) == 1575
    assert sum(b for _, b in counts.values()) == 525


def test_aid_layout(tmp_path):
    sizes = [300] * 10 + [340] * 10 + [360] * 10
    m = split_dataset(_touch_tree(tmp_path, sizes), (4, 1), seed=0)
    assert sum(a for a, _ in m.counts().values()) == 8000
    assert sum(b for _, b in m.counts().values()) == 2000


def test_floor_rounding_and_partition(tmp_path):
    m = split_dataset(_touch_tree(tmp_path, [7, 5, 1]), (3, 1), seed=4)
    assert list(m.counts().values()) == [(5, 2), (3, 2), (0, 1)]
    for name, parts in m.classes.items():
        assert not set(parts["train"]) & set(parts["test"])
        assert len(set(parts["train"]) | set(parts["test"])) == len(list((tmp_path / name).iterdir()))


def test_split_deterministic(tmp_path):
    root = _touch_tree(tmp_path / "d", [9, 9])
    a, b = split_dataset(root, seed=7), split_dataset(root, seed=7)
    assert a.to_json() == b.to_json()
    assert split_dataset(root, seed=8).to_json() != a.to_json()


def test_empty_class_named(tmp_path):
    _touch_tree(tmp_path, [3])
    (tmp_path / "harbor").mkdir()
    with pytest.raises(ValueError, match="harbor"):
        split_dataset(tmp_path)


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        split_dataset(tmp_path / "absent")


def test_manifest_roundtrip(tmp_path):
    m = split_dataset(_touch_tree(tmp_path / "d", [4, 4]), seed=1, scale=4)
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.to_json() == m.to_json()
    with pytest.raises(ValueError, match="valid classes: c00, c01"):
        back.paths("test", ["c07"])


# ---------------------------------------------------------------- augmentation

def _pair():
    rng = np.random.default_rng(0)
    return PairedSample(rng.random((3, 8, 8)), rng.random((3, 4, 4)))


def test_identity_transform():
    p = _pair()
    assert np.array_equal(apply_dihedral(p.hr, 0), p.hr)


def test_flip_involution():
    p = _pair()
    assert np.array_equal(apply_dihedral(apply_dihedral(p.lr, 4), 4), p.lr)


def test_all_eight_distinct():
    img = np.arange(9.0).reshape(1, 3, 3)
    assert len({apply_dihedral(img, t).tobytes() for t in range(8)}) == 8


def test_augment_frequencies():
    rng = np.random.default_rng(2024)
    p = PairedSample(np.zeros((1, 2, 2)), np.zeros((1, 1, 1)))
    counts = Counter(augment(p, rng).transform for _ in range(8000))
    assert set(counts) == set(range(8))
    assert all(abs(c / 8000 - 0.125) <= 0.02 for c in counts.values())


def test_augment_consistent_pairs():
    rng = np.random.default_rng(0)
    hr = rng.random((3, 8, 8))
    pair = make_pair(hr, 2)
    out = augment(pair, rng)
    np.testing.assert_allclose(bicubic_resize(out.hr, (4, 4)), out.lr, atol=1e-12)


def test_non_square_rotation_rejected():
    with pytest.raises(ValueError, match="square"):
        augment(PairedSample(np.zeros((3, 4, 8)), np.zeros((3, 2, 4))), np.random.default_rng(0))
    out = augment(PairedSample(np.zeros((3, 4, 8)), np.zeros((3, 2, 4))), np.random.default_rng(0), rotations=False)
    assert out.hr.shape == (3, 4, 8)


# ---------------------------------------------------------------- sampling

def test_published_batch_shapes(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "d" / "cls"
    for i in range(2):
        save_image(d / f"{i}.png", rng.random((3, 260, 270)))
    m = split_dataset(tmp_path / "d", (1, 0))
    batch = sample_batch(m, 64, 4, np.random.default_rng(1), scale=4)
    assert len(batch) == 4
    for p in batch:
        assert p.hr.shape == (3, 256, 256) and p.lr.shape == (3, 64, 64)


def test_pairing_bit_exact(scene_root):
    m = split_dataset(scene_root, (1, 0))
    for p in sample_batch(m, 8, 6, np.random.default_rng(3), scale=4, do_augment=False):
        assert np.array_equal(bicubic_resize(p.hr, (8, 8)), p.lr)


def test_full_image_crop(scene_root):
    m = split_dataset(scene_root, (1, 0))
    (p,) = sample_batch(m, 16, 1, np.random.default_rng(0), scale=4, do_augment=False)
    assert np.array_equal(p.hr, load_image(p.path))


def test_sampling_deterministic(scene_root):
    m = split_dataset(scene_root, (1, 0))
    a = sample_batch(m, 8, 3, np.random.default_rng(9), scale=2)
    b = sample_batch(m, 8, 3, np.random.default_rng(9), scale=2)
    assert all(np.array_equal(x.hr, y.hr) and x.transform == y.transform for x, y in zip(a, b))


def test_small_images_skipped(tmp_path, caplog):
    rng = np.random.default_rng(0)
    save_image(tmp_path / "d" / "a" / "small.png", rng.random((3, 16, 16)))
    save_image(tmp_path / "d" / "a" / "big.png", rng.random((3, 40, 40)))
    m = split_dataset(tmp_path / "d", (1, 0))
    batch = sample_batch(m, 8, 5, np.random.default_rng(0), scale=4)
    assert all(p.path.endswith("big.png") for p in batch)
    assert "skipping" in caplog.text
    only_small = split_dataset(tmp_path / "d", (1, 0))
    only_small.classes["a"]["train"] = ["a/small.png"]
    with pytest.raises(ValueError, match="at least 32x32"):
        sample_batch(only_small, 8, 1, np.random.default_rng(0), scale=4, max_attempts=5)


# ---------------------------------------------------------------- io / degrade

def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 6)) / 255.0
    save_image(tmp_path / "x.png", img)
    np.testing.assert_allclose(load_image(tmp_path / "x.png"), img, atol=1e-7)


def test_degrade_tree(scene_root, tmp_path):
    n = degrade_tree(scene_root, tmp_path / "lr", 4)
    assert n == 8
    out = load_image(tmp_path / "lr" / "class00" / "img000.png")
    assert out.shape == (3, 16, 16)
    assert mod_crop(np.zeros((3, 10, 13)), 4).shape == (3, 8, 12)
