"""Sample containers, border cropping, colonoscopy augmentation, toy data and
the on-disk dataset layout.

Images are float32 arrays shaped [3, H, W] in [0, 1]; depth maps are float32
arrays shaped [1, H, W] with strictly positive values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

BLACK_THRESHOLD = 10.0 / 255.0
D_NEAR = 0.1
D_FAR = 1.0
DEPTH_PNG_MAX = 65535


@dataclass
class Sample:
    image: np.ndarray
    depth: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
            if self.depth.ndim == 2:
                self.depth = self.depth[None]
            if self.depth.shape != (1,) + self.image.shape[1:]:
                raise ValueError(
                    f"depth {self.depth.shape} does not match image {self.image.shape}"
                )

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got {image.shape}")
    if np.any(image < 0) or np.any(image > 1):
        raise ValueError("image intensities must lie in [0, 1]")


def validate_depth(depth: np.ndarray) -> None:
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")


# ---------------------------------------------------------------------------
# black border cropping


def black_border_box(image: np.ndarray, threshold: float = BLACK_THRESHOLD) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) bounds (bottom/right exclusive)."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    top, bottom, left, right = 0, gray.shape[0], 0, gray.shape[1]
    changed = True
    while changed:
        changed = False
        if top >= bottom or left >= right:
            raise ValueError("all-black image")
        if gray[top, left:right].mean() < threshold:
            top += 1
            changed = True
        elif gray[bottom - 1, left:right].mean() < threshold:
            bottom -= 1
            changed = True
        elif gray[top:bottom, left].mean() < threshold:
            left += 1
            changed = True
        elif gray[top:bottom, right - 1].mean() < threshold:
            right -= 1
            changed = True
    return top, bottom, left, right


def crop_black_border(image: np.ndarray, depth: np.ndarray | None = None,
                      threshold: float = BLACK_THRESHOLD, source_id: str = "") -> Sample:
    """Strip border rows/columns whose mean intensity is below ``threshold``.

    Rows and columns are peeled one at a time until every edge line of the
    remaining rectangle is bright enough, so the result is idempotent.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    t, b, l, r = black_border_box(image, threshold)
    img = image[:, t:b, l:r]
    dep = None if depth is None else np.asarray(depth)[..., t:b, l:r]
    return Sample(img, dep, source_id)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    p_channel_permute: float = 0.5
    rotation_angles: tuple[int, ...] = (90, 180, 270)

    def __post_init__(self):
        for name in ("p_vflip", "p_rotate", "p_channel_permute"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if not self.rotation_angles or not set(self.rotation_angles) <= {90, 180, 270}:
            raise ValueError("rotation_angles must be a non-empty subset of {90, 180, 270}")


def vflip(sample: Sample) -> Sample:
    depth = None if sample.depth is None else sample.depth[:, ::-1, :].copy()
    return Sample(sample.image[:, ::-1, :].copy(), depth, sample.source_id)


def rotate(sample: Sample, angle: int) -> Sample:
    k = angle // 90
    depth = None if sample.depth is None else np.rot90(sample.depth, k, axes=(1, 2)).copy()
    return Sample(np.rot90(sample.image, k, axes=(1, 2)).copy(), depth, sample.source_id)


def permute_channels(sample: Sample, perm: Sequence[int]) -> Sample:
    return Sample(sample.image[list(perm)].copy(), sample.depth, sample.source_id)


def augment(sample: Sample, config: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random vertical flip, right-angle rotation and colour channel shuffle.

    Every random draw is made regardless of whether the transform fires, so
    the rng stream consumed per sample is fixed.
    """
    if sample.depth is None:
        raise ValueError("augment expects a training sample with depth")
    out = sample
    u_flip, u_rot, u_perm = rng.random(3)
    angles = list(config.rotation_angles)
    if out.height != out.width:
        # quarter turns would swap H and W
        angles = [a for a in angles if a == 180]
    angle = angles[rng.integers(len(angles))] if angles else None
    perm = rng.permutation(3)

    if u_flip < config.p_vflip:
        out = vflip(out)
    if angle is not None and u_rot < config.p_rotate:
        out = rotate(out, angle)
    if u_perm < config.p_channel_permute:
        out = permute_channels(out, perm)
    return out


def sample_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample index, epoch)."""
    return np.random.default_rng([seed, index, epoch])


# ---------------------------------------------------------------------------
# procedural toy colon


def toy_depth(size: int, center: tuple[float, float],
              d_near: float = D_NEAR, d_far: float = D_FAR) -> np.ndarray:
    """Radial tube depth: far at ``center`` (x, y), falling linearly to d_near."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half_diag = np.hypot(size, size) / 2.0
    r = np.hypot(xx - center[0], yy - center[1]) / half_diag
    return np.clip(d_far - (d_far - d_near) * np.minimum(r, 1.0), d_near, d_far)


def _toy_sample(rng: np.random.Generator, size: int):
    lo, hi = size / 3.0, 2.0 * size / 3.0
    center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    depth = toy_depth(size, center)

    raw = 1.0 / depth**2
    k = 0.9 / np.percentile(raw, 90)
    base = np.clip(k * raw, 0.0, 1.0)
    jitter = rng.uniform(0.8, 1.2, size=3)
    image = np.clip(base[None] * jitter[:, None, None], 0.0, 1.0)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        bx, by = rng.uniform(0, size, size=2)
        s = rng.uniform(size / 40.0, size / 15.0)
        blob = np.maximum(blob, np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * s * s)))
    # amplitude > 1 so blob cores saturate
    image = np.clip(image + 1.5 * blob[None], 0.0, 1.0)
    return image.astype(np.float32), depth[None].astype(np.float32), blob


def generate_toy_colon(count: int, size: int, seed: int, with_masks: bool = False):
    """Deterministic synthetic colon-like samples.

    With ``with_masks=True`` also returns the specular blob strength per
    sample (values near 0 are blob-free).
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if size < 16:
        raise ValueError("size must be at least 16")
    samples, masks = [], []
    for i in range(count):
        image, depth, blob = _toy_sample(sample_rng(seed, i), size)
        samples.append(Sample(image, depth, f"toy_{i:05d}"))
        masks.append(blob)
    return (samples, masks) if with_masks else samples


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/rgb/<name>.png, <dir>/depth/<name>.png, <dir>/meta.json


@dataclass(frozen=True)
class DatasetLayout:
    size: int | None = 256
    rgb_dir: str = "rgb"
    depth_dir: str = "depth"
    meta_file: str = "meta.json"
    require_depth: bool = True
    crop_border: bool = True


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        return {}
    with open(path) as fh:
        return json.load(fh)


def write_dataset(samples: Sequence[Sample], directory, d_max: float = 1.0, extra_meta: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    depth_scale = d_max / DEPTH_PNG_MAX
    for s in samples:
        rgb = np.round(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(directory / "rgb" / f"{s.source_id}.png")
        if s.depth is not None:
            write_depth_png(directory / "depth" / f"{s.source_id}.png", s.depth, depth_scale)
    meta = {"depth_scale": depth_scale, "d_max": d_max}
    meta.update(extra_meta or {})
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def write_depth_png(path, depth: np.ndarray, depth_scale: float) -> None:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[0]
    q = np.clip(np.round(d / depth_scale), 0, DEPTH_PNG_MAX).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float64)
    return (arr * depth_scale)[None].astype(np.float32)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def resize_sample(sample: Sample, size: int) -> Sample:
    """Bilinear for RGB, nearest-neighbour for depth."""
    if sample.height == size and sample.width == size:
        return sample
    chans = [
        np.asarray(Image.fromarray(c.astype(np.float32)).resize((size, size), Image.BILINEAR))
        for c in sample.image
    ]
    image = np.clip(np.stack(chans), 0.0, 1.0)
    depth = None
    if sample.depth is not None:
        depth = np.asarray(
            Image.fromarray(sample.depth[0].astype(np.float32)).resize((size, size), Image.NEAREST)
        )[None]
    return Sample(image, depth, sample.source_id)


def load_dataset(directory, layout: DatasetLayout = DatasetLayout()) -> Iterator[Sample]:
    """Yield samples in lexicographic filename order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    rgb_dir = directory / layout.rgb_dir
    depth_dir = directory / layout.depth_dir
    meta = read_meta(directory)
    depth_scale = float(meta.get("depth_scale", 1.0 / DEPTH_PNG_MAX))
    names = sorted(p.name for p in rgb_dir.glob("*.png")) if rgb_dir.is_dir() else []
    for name in names:
        rgb_path = rgb_dir / name
        depth_path = depth_dir / name
        try:
            image = read_rgb(rgb_path)
        except Exception as exc:
            raise OSError(f"cannot read image {rgb_path}: {exc}") from exc
        depth = None
        if depth_path.exists():
            try:
                depth = read_depth_png(depth_path, depth_scale)
            except Exception as exc:
                raise OSError(f"cannot read depth {depth_path}: {exc}") from exc
        elif layout.require_depth:
            raise FileNotFoundError(f"no depth map paired with {rgb_path}")
        stem = Path(name).stem
        if layout.crop_border:
            sample = crop_black_border(image, depth, source_id=stem)
        else:
            sample = Sample(image, depth, stem)
        if layout.size is not None:
            sample = resize_sample(sample, layout.size)
        yield sample


@dataclass
class Batch:
    images: np.ndarray
    depths: np.ndarray | None
    ids: list[str] = field(default_factory=list)


def collate(samples: Sequence[Sample]) -> Batch:
    images = np.stack([s.image for s in samples])
    depths = None
    if all(s.depth is not None for s in samples):
        depths = np.stack([s.depth for s in samples])
    return Batch(images, depths, [s.source_id for s in samples])
