"""Occlusion augmentation: mask-based compositing plus the classic baselines.

The headline transform pastes a real-shaped occluder (an RGBA cutout) over
one of three image corners at a size drawn from 1/2..3/4 of the image area.
Tall occluders (bounding box taller than twice its width) are scaled to full
image height, everything else to full image width, so the occluder sweeps
either a vertical or a horizontal band.

A synthetic mask generator is included so the pipeline needs no external
segmentation model or downloaded cutout bank. Random-erasing and rectangle
cut-paste baselines share the bank/placement machinery for fair comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class MaskEntry:
    """One occluder: texture + boolean coverage, cropped to a tight box."""

    texture: np.ndarray   # 3 x mask_h x mask_w floats in [0, 1]
    coverage: np.ndarray  # mask_h x mask_w bools, True = occluder pixel

    def __post_init__(self):
        if self.texture.shape[1:] != self.coverage.shape:
            raise ValueError("texture and coverage extents differ")
        if not self.coverage.any():
            raise ValueError("coverage has no true pixels")
        rows = np.flatnonzero(self.coverage.any(axis=1))
        cols = np.flatnonzero(self.coverage.any(axis=0))
        tight = (
            rows[0] == 0
            and rows[-1] == self.coverage.shape[0] - 1
            and cols[0] == 0
            and cols[-1] == self.coverage.shape[1] - 1
        )
        if not tight:
            raise ValueError("bounding box is not tight")

    @property
    def mask_h(self) -> int:
        return self.coverage.shape[0]

    @property
    def mask_w(self) -> int:
        return self.coverage.shape[1]


@dataclass
class RoaParams:
    area_lo: float = 0.5
    area_hi: float = 0.75
    aspect_threshold: float = 2.0
    flip_prob: float = 0.5
    max_retries: int = 5

    def __post_init__(self):
        if not 0.0 < self.area_lo < self.area_hi <= 1.0:
            raise ValueError("need 0 < area_lo < area_hi <= 1")


@dataclass
class EraseParams:
    probability: float = 1.0
    area_lo: float = 0.02
    area_hi: float = 0.4
    aspect_lo: float = 0.3
    aspect_hi: float = 10.0 / 3.0


# ---------------------------------------------------------------------------
# Mask bank
# ---------------------------------------------------------------------------


def _crop_tight(texture: np.ndarray, coverage: np.ndarray) -> MaskEntry:
    rows = np.flatnonzero(coverage.any(axis=1))
    cols = np.flatnonzero(coverage.any(axis=0))
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    return MaskEntry(texture=texture[:, r0:r1, c0:c1].copy(), coverage=coverage[r0:r1, c0:c1].copy())


def load_mask_bank(path) -> list[MaskEntry]:
    """Load RGBA images from a directory; alpha > 0 marks occluder pixels.

    Unreadable or fully transparent files are skipped with a warning. An
    empty result is a configuration error.
    """
    root = Path(path)
    entries: list[MaskEntry] = []
    for file in sorted(root.iterdir()):
        if not file.is_file():
            continue
        try:
            img = Image.open(file).convert("RGBA")
        except Exception as err:
            warnings.warn(f"skipping unreadable mask file {file.name}: {err}")
            continue
        arr = np.asarray(img, dtype=np.float32) / 255.0   # H x W x 4
        coverage = arr[:, :, 3] > 0
        if not coverage.any():
            warnings.warn(f"skipping fully transparent mask file {file.name}")
            continue
        texture = np.transpose(arr[:, :, :3], (2, 0, 1))
        entries.append(_crop_tight(texture, coverage))
    if not entries:
        raise ValueError(f"mask bank at {root} contains no usable masks")
    return entries


def save_mask_bank(path, bank: list[MaskEntry]) -> None:
    """Write a bank as RGBA PNGs (alpha 255 on coverage, 0 elsewhere)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(bank):
        rgba = np.zeros((entry.mask_h, entry.mask_w, 4), dtype=np.uint8)
        rgba[:, :, :3] = np.transpose(np.clip(entry.texture, 0, 1) * 255, (1, 2, 0)).astype(np.uint8)
        rgba[:, :, 3] = np.where(entry.coverage, 255, 0).astype(np.uint8)
        Image.fromarray(rgba, "RGBA").save(root / f"mask_{i:05d}.png")


def synth_masks(seed: int, count: int) -> list[MaskEntry]:
    """Generate textured blob occluders deterministically from a seed.

    Shapes are unions of random ellipses inside a canvas whose target aspect
    ratio alternates between tall (h/w > 2) and squat so both placement
    branches get exercised. Textures are smooth two-color gradients with
    speckle noise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        tall = i % 3 == 0
        if tall:
            h = int(rng.integers(60, 100))
            w = int(rng.integers(12, max(13, h // 3)))
        else:
            h = int(rng.integers(20, 60))
            w = int(rng.integers(max(20, h // 2 + 1), 90))
        coverage = np.zeros((h, w), dtype=bool)
        yy, xx = np.mgrid[0:h, 0:w]
        n_blobs = int(rng.integers(2, 5))
        for _ in range(n_blobs):
            cy = rng.uniform(0.2, 0.8) * h
            cx = rng.uniform(0.2, 0.8) * w
            ry = rng.uniform(0.2, 0.55) * h
            rx = rng.uniform(0.2, 0.55) * w
            coverage |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not coverage.any():
            coverage[h // 2, w // 2] = True
        c0 = rng.uniform(0.05, 0.95, size=3)
        c1 = rng.uniform(0.05, 0.95, size=3)
        ramp = (yy / max(h - 1, 1) + xx / max(w - 1, 1)) / 2.0
        texture = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
        texture += rng.normal(0, 0.03, size=texture.shape)
        texture = np.clip(texture, 0.0, 1.0).astype(np.float32)
        entries.append(_crop_tight(texture, coverage))
    return entries


# ---------------------------------------------------------------------------
# Resizing helpers (nearest keeps coverage boolean; bilinear for texture)
# ---------------------------------------------------------------------------


def _resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    ci = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return mask[ri][:, ci]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = img.shape
    ry = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    rx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ry).astype(np.int64)
    x0 = np.floor(rx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ry - y0)[None, :, None]
    wx = (rx - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# Placement + compositing
# ---------------------------------------------------------------------------


def _draw_placement(image_h: int, image_w: int, bank: list[MaskEntry], params: RoaParams, rng):
    """Roll mask choice, scale, flip, and corner; None on degenerate extents.

    Shared by the occluder transform and the rectangle-paste baseline so that
    the two consume identical random draws.
    """
    entry = bank[int(rng.integers(len(bank)))]
    area = image_h * image_w
    random_area = rng.uniform(params.area_lo * area, params.area_hi * area)
    if entry.mask_h / entry.mask_w > params.aspect_threshold:
        resize_h = image_h
        resize_w = int(random_area / image_h)
    else:
        resize_h = int(random_area / image_w)
        resize_w = image_w
    flip = rng.random() < params.flip_prob
    corner = int(rng.integers(3))
    if resize_h < 1 or resize_w < 1:
        return None
    # Corners: top-left, bottom-left, top-right (col, row anchor reading).
    anchors = [
        (0, 0),
        (image_h - resize_h, 0),
        (0, image_w - resize_w),
    ]
    row0, col0 = anchors[corner]
    return entry, resize_h, resize_w, flip, row0, col0


def _prepare_patch(entry: MaskEntry, resize_h: int, resize_w: int, flip: bool):
    texture = _resize_bilinear(entry.texture, resize_h, resize_w)
    coverage = _resize_nearest(entry.coverage, resize_h, resize_w)
    if flip:
        texture = texture[:, :, ::-1]
        coverage = coverage[:, ::-1]
    if not coverage.any():
        # Nearest-neighbor downscale of a sparse mask can miss every pixel.
        coverage = coverage.copy()
        coverage[resize_h // 2, resize_w // 2] = True
    return texture, coverage


def roa(
    image: np.ndarray,
    bank: list[MaskEntry],
    params: RoaParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Composite one occluder over a 3xHxW image; returns (image, occlusion map).

    Only pixels inside the anchored box where the scaled coverage is true are
    replaced. Degenerate scale draws (zero extent on tiny images) retry up to
    max_retries before passing the image through unchanged with a warning.
    """
    if not bank:
        raise ValueError("mask bank is empty")
    _, h, w = image.shape
    for _ in range(params.max_retries + 1):
        drawn = _draw_placement(h, w, bank, params, rng)
        if drawn is not None:
            break
    else:
        warnings.warn("occluder placement degenerate after retries; image unchanged")
        return image.copy(), np.zeros((h, w), dtype=bool)
    entry, rh, rw, flip, row0, col0 = drawn
    texture, coverage = _prepare_patch(entry, rh, rw, flip)
    out = image.copy()
    region = out[:, row0 : row0 + rh, col0 : col0 + rw]
    region[:, coverage] = texture[:, coverage]
    occmap = np.zeros((h, w), dtype=bool)
    occmap[row0 : row0 + rh, col0 : col0 + rw] = coverage
    return out, occmap


def cut_paste(
    image: np.ndarray,
    bank: list[MaskEntry],
    params: RoaParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Rectangle-paste baseline: same draws as roa but coverage is ignored."""
    if not bank:
        raise ValueError("mask bank is empty")
    _, h, w = image.shape
    for _ in range(params.max_retries + 1):
        drawn = _draw_placement(h, w, bank, params, rng)
        if drawn is not None:
            break
    else:
        warnings.warn("paste placement degenerate after retries; image unchanged")
        return image.copy(), np.zeros((h, w), dtype=bool)
    entry, rh, rw, flip, row0, col0 = drawn
    texture, _ = _prepare_patch(entry, rh, rw, flip)
    out = image.copy()
    out[:, row0 : row0 + rh, col0 : col0 + rw] = texture
    occmap = np.zeros((h, w), dtype=bool)
    occmap[row0 : row0 + rh, col0 : col0 + rw] = True
    return out, occmap


def random_erase(
    image: np.ndarray,
    rng: np.random.Generator,
    params: EraseParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blank a random rectangle with uniform per-pixel noise.

    Standard recipe: target area 2-40% of the image, aspect ratio 0.3-3.33,
    resampled until the rectangle fits (100 attempts).
    """
    params = params or EraseParams()
    _, h, w = image.shape
    occmap = np.zeros((h, w), dtype=bool)
    if rng.random() >= params.probability:
        return image.copy(), occmap
    area = h * w
    for _ in range(100):
        target = rng.uniform(params.area_lo, params.area_hi) * area
        aspect = rng.uniform(params.aspect_lo, params.aspect_hi)
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            r0 = int(rng.integers(0, h - eh + 1))
            c0 = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[:, r0 : r0 + eh, c0 : c0 + ew] = rng.uniform(
                0.0, 1.0, size=(3, eh, ew)
            ).astype(image.dtype)
            occmap[r0 : r0 + eh, c0 : c0 + ew] = True
            return out, occmap
    return image.copy(), occmap


def sample_rng(seed: int, *indices: int) -> np.random.Generator:
    """Counter-based stream for one sample: identical regardless of worker."""
    return np.random.default_rng([seed, *indices])
