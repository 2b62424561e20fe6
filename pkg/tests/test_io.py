import numpy as np
import pytest
from PIL import Image

from uqdepth import io as uio


def test_sigma_grid_roundtrip(tmp_path):
    sigma = np.random.default_rng(0).random((1, 7, 5)).astype(np.float32)
    uio.write_sigma_grid(tmp_path / "s.uqdp", sigma)
    raw = (tmp_path / "s.uqdp").read_bytes()
    assert raw[:4] == b"UQDP" and len(raw) == 8 + 4 * 35
    np.testing.assert_array_equal(uio.read_sigma_grid(tmp_path / "s.uqdp"), sigma[0])


def test_sigma_grid_rejects_garbage(tmp_path):
    (tmp_path / "bad.uqdp").write_bytes(b"XXXX\x01\x00\x01\x00abcd")
    with pytest.raises(ValueError, match="magic"):
        uio.read_sigma_grid(tmp_path / "bad.uqdp")
    (tmp_path / "short.uqdp").write_bytes(b"UQDP\x02\x00\x02\x00abcd")
    with pytest.raises(ValueError):
        uio.read_sigma_grid(tmp_path / "short.uqdp")


def test_fused_depth_roundtrip(tmp_path):
    d_max = 2.5
    depth = np.random.default_rng(1).uniform(0.01, d_max, (1, 6, 9))
    uio.write_fused_depth(tmp_path / "d.png", depth, d_max)
    with Image.open(tmp_path / "d.png") as im:
        assert np.asarray(im).dtype == np.uint16 or im.mode.startswith("I")
    back = uio.read_fused_depth(tmp_path / "d.png", d_max)
    np.testing.assert_allclose(back.reshape(depth.shape), depth, atol=d_max / 65535)


def test_visualization(tmp_path):
    rng = np.random.default_rng(2)
    img, d = rng.random((3, 8, 8)), rng.random((1, 8, 8))
    uio.write_visualization(tmp_path / "v.png", img, d, d, d, gt=d)
    with Image.open(tmp_path / "v.png") as im:
        assert im.size == (8 * 5, 8)
