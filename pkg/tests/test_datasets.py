import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.stats import spearmanr

from uqdepth.datasets import (
    BLACK_THRESHOLD,
    AugmentationConfig,
    DatasetLayout,
    Sample,
    augment,
    black_border_box,
    crop_black_border,
    generate_toy_colon,
    load_dataset,
    permute_channels,
    rotate,
    sample_rng,
    toy_depth,
    vflip,
    write_dataset,
)


def _sample(h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.random((3, h, w)), rng.uniform(0.1, 1.0, (1, h, w)), f"s{seed}")


def _brute_force_box(image, thr):
    """Scan every sub-rectangle, keep the largest whose four edges are bright."""
    gray = image.mean(axis=0)
    h, w = gray.shape
    best, best_area = None, -1
    for t in range(h):
        for b in range(t + 1, h + 1):
            for l in range(w):
                for r in range(l + 1, w + 1):
                    sub = gray[t:b, l:r]
                    edges = (sub[0].mean(), sub[-1].mean(), sub[:, 0].mean(), sub[:, -1].mean())
                    if min(edges) >= thr and (b - t) * (r - l) > best_area:
                        best, best_area = (t, b, l, r), (b - t) * (r - l)
    return best


def test_crop_identity_without_border():
    img = np.full((3, 10, 12), 0.5)
    s = crop_black_border(img)
    assert np.array_equal(s.image, img)


def test_crop_260_frame():
    img = np.random.default_rng(0).uniform(0.2, 1.0, (3, 260, 260))
    img[:, :2, :] = 0
    img[:, -2:, :] = 0
    img[:, :, :2] = 0
    img[:, :, -2:] = 0
    depth = np.random.default_rng(1).uniform(0.1, 1, (1, 260, 260))
    s = crop_black_border(img, depth)
    assert s.image.shape == (3, 256, 256)
    np.testing.assert_array_equal(s.image, img[:, 2:-2, 2:-2].astype(np.float32))
    np.testing.assert_array_equal(s.depth, depth[:, 2:-2, 2:-2].astype(np.float32))


def test_crop_matches_bruteforce_on_small_frames():
    rng = np.random.default_rng(3)
    for _ in range(5):
        img = rng.uniform(0.2, 1.0, (3, 9, 8))
        t, b, l, r = rng.integers(0, 3, size=4)
        img[:, :t] = 0
        img[:, img.shape[1] - b:] = 0
        img[:, :, :l] = 0
        img[:, :, img.shape[2] - r:] = 0
        assert black_border_box(img) == _brute_force_box(img, BLACK_THRESHOLD)


def test_crop_all_black():
    with pytest.raises(ValueError, match="all-black image"):
        crop_black_border(np.zeros((3, 5, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_crop_idempotent(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 12, 12)) * rng.random((1, 12, 1)) * rng.random((1, 1, 12))
    try:
        once = crop_black_border(img)
    except ValueError:
        return
    twice = crop_black_border(once.image)
    assert np.array_equal(once.image, twice.image)


def test_augment_identity_when_disabled():
    s = _sample()
    out = augment(s, AugmentationConfig(0, 0, 0), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.depth, s.depth)


def test_vflip_involution_and_rotations():
    s = _sample()
    assert np.array_equal(vflip(vflip(s)).image, s.image)
    r = s
    for _ in range(4):
        r = rotate(r, 90)
    assert np.array_equal(r.depth, s.depth)


def test_channel_permutation_preserves_values():
    s = _sample()
    out = permute_channels(s, [2, 0, 1])
    assert np.array_equal(np.sort(out.image.ravel()), np.sort(s.image.ravel()))
    assert out.depth is s.depth


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(8, 8), (6, 10)]))
def test_geometric_transforms_move_image_and_depth_together(seed, hw):
    s = _sample(*hw, seed=seed % 7)
    # tag each pixel so its image value identifies its depth value
    s.image[0] = s.depth[0]
    out = augment(s, AugmentationConfig(0.5, 0.5, 0.0), np.random.default_rng(seed))
    assert out.image.shape == s.image.shape and out.depth.shape == s.depth.shape
    assert np.array_equal(out.image[0], out.depth[0])


def test_augment_requires_depth():
    with pytest.raises(ValueError):
        augment(Sample(np.zeros((3, 4, 4))), AugmentationConfig(), np.random.default_rng(0))


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(p_vflip=1.5)
    with pytest.raises(ValueError):
        AugmentationConfig(rotation_angles=(45,))


def test_toy_determinism_and_bounds():
    a = generate_toy_colon(4, 32, seed=7)
    b = generate_toy_colon(4, 32, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.depth, y.depth)
        assert x.depth.min() >= 0.1 - 1e-6 and x.depth.max() <= 1.0
        assert x.image.min() >= 0 and x.image.max() <= 1
    c = generate_toy_colon(4, 32, seed=8)
    assert not np.array_equal(a[0].image, c[0].image)


def test_toy_depth_formula():
    d = toy_depth(32, (10.0, 20.0))
    assert d[20, 10] == 1.0
    assert d.min() >= 0.1


def test_toy_intensity_anticorrelates_with_depth():
    samples, blobs = generate_toy_colon(5, 48, seed=3, with_masks=True)
    for s, blob in zip(samples, blobs):
        free = blob < 1e-3
        rho = spearmanr(s.image.mean(axis=0)[free], s.depth[0][free])[0]
        assert rho < -0.5


def test_toy_argument_checks():
    with pytest.raises(ValueError):
        generate_toy_colon(1, 8, 0)


def test_sample_rng_streams():
    assert sample_rng(1, 2, 3).random() == sample_rng(1, 2, 3).random()
    assert sample_rng(1, 2, 3).random() != sample_rng(1, 3, 3).random()


def test_dataset_roundtrip(tmp_path):
    samples = generate_toy_colon(3, 32, seed=1)
    write_dataset(samples, tmp_path, d_max=1.0)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["d_max"] == 1.0
    loaded = list(load_dataset(tmp_path, DatasetLayout(size=32)))
    assert [s.source_id for s in loaded] == sorted(s.source_id for s in samples)
    for a, b in zip(samples, loaded):
        np.testing.assert_allclose(a.depth, b.depth, atol=meta["depth_scale"])
        np.testing.assert_allclose(a.image, b.image, atol=1 / 255)


def test_empty_dataset(tmp_path):
    assert list(load_dataset(tmp_path)) == []


def test_resize_on_load(tmp_path):
    (tmp_path / "rgb").mkdir()
    (tmp_path / "depth").mkdir()
    Image.fromarray(np.full((320, 320, 3), 128, np.uint8)).save(tmp_path / "rgb" / "a.png")
    depth = np.zeros((320, 320), np.uint16)
    depth[:, 160:] = 1000
    depth[:, :160] = 2000
    Image.fromarray(depth).save(tmp_path / "depth" / "a.png")
    (tmp_path / "meta.json").write_text(json.dumps({"depth_scale": 0.001, "d_max": 65.535}))
    (s,) = load_dataset(tmp_path, DatasetLayout(size=256))
    assert s.image.shape == (3, 256, 256) and s.depth.shape == (1, 256, 256)
    # nearest-neighbour keeps only the original depth levels
    assert set(np.unique(np.round(s.depth, 6))) == {1.0, 2.0}


def test_missing_depth_named(tmp_path):
    write_dataset(generate_toy_colon(2, 32, seed=0), tmp_path)
    (tmp_path / "depth" / "toy_00001.png").unlink()
    with pytest.raises(FileNotFoundError, match="toy_00001"):
        list(load_dataset(tmp_path, DatasetLayout(size=32)))
    assert len(list(load_dataset(tmp_path, DatasetLayout(size=32, require_depth=False)))) == 2


def test_unreadable_file_named(tmp_path):
    write_dataset(generate_toy_colon(1, 32, seed=0), tmp_path)
    (tmp_path / "rgb" / "toy_00000.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="toy_00000"):
        list(load_dataset(tmp_path, DatasetLayout(size=32)))
