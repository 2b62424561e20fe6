"""Prediction output files: 16-bit depth PNGs, raw sigma grids, previews."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import DEPTH_PNG_MAX, read_depth_png, write_depth_png

SIGMA_MAGIC = b"UQDP"
_SIGMA_HEADER = struct.Struct("<4sHH")


def write_sigma_grid(path, sigma) -> None:
    """8-byte header (magic, u16 height, u16 width) then float32 row-major."""
    arr = np.asarray(sigma, dtype="<f4")
    arr = arr.reshape(arr.shape[-2:])
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_SIGMA_HEADER.pack(SIGMA_MAGIC, h, w))
        fh.write(arr.tobytes(order="C"))


def read_sigma_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _SIGMA_HEADER.size:
        raise ValueError(f"{path}: truncated sigma grid")
    magic, h, w = _SIGMA_HEADER.unpack_from(data)
    if magic != SIGMA_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_SIGMA_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


def write_fused_depth(path, depth, d_max: float) -> None:
    write_depth_png(path, depth, d_max / DEPTH_PNG_MAX)


def read_fused_depth(path, d_max: float) -> np.ndarray:
    return read_depth_png(path, d_max / DEPTH_PNG_MAX)


def _colorize(x, cmap, vmin=None, vmax=None):
    from matplotlib import colormaps

    x = np.asarray(x, dtype=np.float64)
    vmin = float(np.min(x)) if vmin is None else vmin
    vmax = float(np.max(x)) if vmax is None else vmax
    norm = (x - vmin) / max(vmax - vmin, 1e-12)
    rgba = colormaps[cmap](np.clip(norm, 0, 1))
    return (rgba[..., :3] * 255).astype(np.uint8)


def write_visualization(path, image, depth, sigma_local=None, sigma_global=None, gt=None) -> None:
    """Side-by-side strip: input | [gt] | fused depth | [sigma local] | [sigma global]."""
    rgb = (np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    depth = np.asarray(depth).reshape(rgb.shape[:2])
    lo, hi = float(depth.min()), float(depth.max())
    panels = [rgb]
    if gt is not None:
        g = np.asarray(gt).reshape(rgb.shape[:2])
        lo, hi = min(lo, float(g.min())), max(hi, float(g.max()))
        panels.append(_colorize(g, "magma", lo, hi))
    panels.append(_colorize(depth, "magma", lo, hi))
    for s in (sigma_local, sigma_global):
        if s is not None:
            panels.append(_colorize(np.asarray(s).reshape(rgb.shape[:2]), "viridis"))
    Image.fromarray(np.concatenate(panels, axis=1)).save(path)
