"""Pinhole back-projection of depth maps and ASCII PLY export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def default_for(cls, height: int, width: int) -> "CameraIntrinsics":
        # roughly 53 degree horizontal field of view
        return cls(fx=float(width), fy=float(width), cx=width / 2.0, cy=height / 2.0)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")

    def __len__(self) -> int:
        return len(self.points)


def backproject(depth, image, k: CameraIntrinsics) -> PointCloud:
    """Lift every pixel (u=column, v=row) to camera coordinates.

    ``depth`` is [H, W] or [1, H, W]; ``image`` is [3, H, W] in [0, 1].
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[0]
    image = np.asarray(image, dtype=np.float64)
    h, w = depth.shape
    if image.shape[1:] != (h, w):
        raise ValueError(f"image {image.shape} and depth {depth.shape} differ in size")

    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    z = depth
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    points = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    colors = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    colors = colors.reshape(3, -1).T
    return PointCloud(points, colors)


def write_ply(cloud: PointCloud, path) -> None:
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for (x, y, z), (r, g, b) in zip(cloud.points.tolist(), cloud.colors.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {r} {g} {b}\n")


def read_ply(path) -> PointCloud:
    """Parse the ASCII PLY files written by :func:`write_ply`."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: missing vertex element")
        rows = [fh.readline().split() for _ in range(count)]
    if count == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8))
    arr = np.array(rows, dtype=object)
    points = arr[:, :3].astype(np.float64)
    colors = arr[:, 3:6].astype(np.int64).astype(np.uint8)
    return PointCloud(points, colors)
