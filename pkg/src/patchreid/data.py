"""Synthetic identity dataset, folder ingestion, and identity-balanced batches.

The synthetic generator renders procedural "pedestrians": each identity has
a stable color/geometry signature (head, striped torso, legs) drawn so that
signatures are pairwise well separated. Images vary by camera tint,
position jitter, brightness, and pixel noise; every image carries a ground
truth mask of its visible body pixels. Query images are heavily occluded so
occlusion robustness is actually exercised at evaluation time.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import MaskEntry, RoaParams, roa, synth_masks

SIGNATURE_DISTANCE_FLOOR = 0.28


@dataclass
class IdentitySample:
    image: np.ndarray                       # 3 x H x W float32 in [0, 1]
    identity: int
    camera: int
    roa_flag: bool = False
    truth_body_mask: np.ndarray | None = None


@dataclass
class DatasetSplits:
    train: list[IdentitySample]
    query: list[IdentitySample]
    gallery: list[IdentitySample]
    num_identities: int
    image_h: int
    image_w: int

    @property
    def all_samples(self) -> list[IdentitySample]:
        return self.train + self.query + self.gallery


def _upsample_bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Upsample a coarse (3 x gh x gw) color grid to (3 x h x w)."""
    gh, gw = grid.shape[1:]
    ry = np.linspace(0, gh - 1, h)
    rx = np.linspace(0, gw - 1, w)
    y0 = np.floor(ry).astype(int)
    x0 = np.floor(rx).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ry - y0)[None, :, None]
    wx = (rx - x0)[None, None, :]
    top = grid[:, y0][:, :, x0] * (1 - wx) + grid[:, y0][:, :, x1] * wx
    bot = grid[:, y1][:, :, x0] * (1 - wx) + grid[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _camera_tint(camera: int, cams: int) -> np.ndarray:
    base = [(1.05, 1.00, 0.95), (1.00, 1.00, 1.00), (0.95, 1.00, 1.05)]
    if camera < len(base):
        return np.asarray(base[camera])
    rng = np.random.default_rng([97, camera])
    return rng.uniform(0.94, 1.06, size=3)


def _spread_colors(rng: np.random.Generator, count: int) -> np.ndarray:
    """Well-separated saturated colors via farthest-point sampling.

    The pool is restricted to clearly hued colors (wide channel spread, mid
    luminance) so clothing never resembles the gray-scale background
    clutter.
    """
    pool = rng.uniform(0.1, 0.9, size=(2048, 3))
    spread = pool.max(axis=1) - pool.min(axis=1)
    pool = pool[spread >= 0.35]
    chosen = [0]
    dist = np.linalg.norm(pool - pool[0], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pool - pool[nxt], axis=1))
    return pool[chosen]


def _draw_signatures(rng: np.random.Generator, num_ids: int) -> list[dict]:
    """Identity appearance parameters with pairwise color-distance floors.

    The floor is enforced per body segment (torso, legs, head) so that any
    one visible segment is enough to tell two identities apart; occluding
    half the person must not make the rest ambiguous.
    """
    torsos = _spread_colors(rng, num_ids)
    legs_c = _spread_colors(rng, num_ids)
    heads = _spread_colors(rng, num_ids)
    for colors in (torsos, legs_c, heads):
        diffs = colors[:, None, :] - colors[None, :, :]
        dmin = np.sqrt((diffs**2).sum(-1))[np.triu_indices(num_ids, 1)].min()
        if dmin < SIGNATURE_DISTANCE_FLOOR:
            raise RuntimeError(
                f"identity palette too crowded: min segment distance {dmin:.3f}"
            )
    sigs: list[dict] = []
    for i in range(num_ids):
        sigs.append(
            {
                "key": np.concatenate([torsos[i], legs_c[i]]),
                "torso": torsos[i],
                "legs": legs_c[i],
                "head": heads[i],
                "stripe": rng.uniform(0.08, 0.92, size=3),
                "stripe_period": int(rng.integers(3, 7)),
                "torso_halfwidth": rng.uniform(0.34, 0.44),
                "head_radius": rng.uniform(0.10, 0.14),
                "leg_split": rng.uniform(0.08, 0.14),
            }
        )
    return sigs


def _render_person(
    sig: dict,
    camera: int,
    cams: int,
    h: int,
    w: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One image + visible-body mask for an identity seen from a camera."""
    tint = _camera_tint(camera, cams)
    # Background: gray base plus clothing-colored rectangles, a stand-in for
    # street clutter and other pedestrians. The clutter is drawn fresh per
    # image, so it carries no identity signal, but it looks like body
    # content: the encoder cannot simply learn to suppress it, which is
    # what makes token selection worthwhile.
    img = np.full((3, h, w), rng.uniform(0.35, 0.65))
    for _ in range(int(rng.integers(3, 7))):
        rh = int(rng.integers(h // 8, h // 2))
        rw = int(rng.integers(w // 6, w // 2))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        img[:, r0 : r0 + rh, c0 : c0 + rw] = rng.uniform(0.1, 0.9, size=3)[:, None, None]
    img += rng.normal(0.0, 0.012, size=(3, h, w))

    dx = rng.integers(-3, 4)
    dy = rng.integers(-2, 3)
    cx = w / 2 + dx
    yy, xx = np.mgrid[0:h, 0:w]

    head_r = sig["head_radius"] * h
    head_cy = 0.11 * h + dy
    head = (yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r**2

    torso_top = int(0.18 * h) + dy
    torso_bot = int(0.60 * h) + dy
    half = sig["torso_halfwidth"] * w
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) <= half)

    leg_bot = int(0.97 * h) + dy
    split = sig["leg_split"] * w
    leg_half = half * 0.80
    legs = (
        (yy >= torso_bot)
        & (yy < leg_bot)
        & (np.abs(xx - cx) <= leg_half)
        & (np.abs(xx - cx) >= split / 2)
    )

    body = head | torso | legs
    img[:, head] = sig["head"][:, None]
    img[:, torso] = sig["torso"][:, None]
    stripe_rows = ((yy - torso_top) // sig["stripe_period"]) % 2 == 0
    img[:, torso & stripe_rows] = (0.55 * sig["torso"] + 0.45 * sig["stripe"])[:, None]
    img[:, legs] = sig["legs"][:, None]

    brightness = rng.uniform(0.95, 1.05)
    img = img * brightness * tint[:, None, None]
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, body


def _occlude_query(
    image: np.ndarray,
    body: np.ndarray,
    occluders: list[MaskEntry],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Occlude a query, keeping at least 20% of pixels as visible body."""
    h, w = body.shape
    params = RoaParams()
    for attempt in range(20):
        occluded, occmap = roa(image, occluders, params, rng)
        visible = body & ~occmap
        frac = visible.mean()
        if 0.20 <= frac <= 0.70:
            return occluded, visible
        # Too much of the body vanished: try again with a smaller occluder.
        params = RoaParams(
            area_lo=max(0.1, params.area_lo * 0.8),
            area_hi=max(0.15, params.area_hi * 0.8),
        )
    return image.copy(), body


def synth_dataset(
    seed: int,
    num_ids: int = 20,
    imgs_per_id: int = 8,
    cams: int = 3,
    image_h: int = 64,
    image_w: int = 32,
) -> DatasetSplits:
    """Deterministic train/query/gallery splits of procedural identities.

    Per identity the last image becomes the (occluded) query and the two
    before it its gallery entries; the gallery always contains a positive
    from a different camera than the query.
    """
    if num_ids < 2:
        raise ValueError("need at least 2 identities")
    if cams < 2:
        raise ValueError("need at least 2 cameras")
    if imgs_per_id < 4:
        raise ValueError("need at least 4 images per identity for a split")
    sig_rng = np.random.default_rng([seed, 1])
    signatures = _draw_signatures(sig_rng, num_ids)
    occluders = synth_masks(seed=int(np.random.default_rng([seed, 2]).integers(2**31)), count=40)

    train, query, gallery = [], [], []
    for ident in range(num_ids):
        cameras = [i % cams for i in range(imgs_per_id)]
        # The query must have a cross-camera positive in the gallery.
        if cameras[-2] == cameras[-1] and cameras[-3] == cameras[-1]:
            cameras[-2] = (cameras[-1] + 1) % cams
        for idx in range(imgs_per_id):
            rng = np.random.default_rng([seed, 3, ident, idx])
            img, body = _render_person(
                signatures[ident], cameras[idx], cams, image_h, image_w, rng
            )
            if idx == imgs_per_id - 1:
                img, visible = _occlude_query(img, body, occluders, rng)
                query.append(IdentitySample(img, ident, cameras[idx], truth_body_mask=visible))
            elif idx >= imgs_per_id - 3:
                gallery.append(IdentitySample(img, ident, cameras[idx], truth_body_mask=body))
            else:
                train.append(IdentitySample(img, ident, cameras[idx], truth_body_mask=body))
    return DatasetSplits(train, query, gallery, num_ids, image_h, image_w)


# ---------------------------------------------------------------------------
# Folder ingestion: <id>_<cam>_<idx>.png
# ---------------------------------------------------------------------------

_NAME_RE = re.compile(r"^(\d+)_(\d+)_(\d+)\.(png|jpg|jpeg)$", re.IGNORECASE)


def load_folder(path) -> list[IdentitySample]:
    """Read a directory of `<id>_<cam>_<idx>.png` images into samples."""
    root = Path(path)
    samples = []
    for file in sorted(root.iterdir()):
        m = _NAME_RE.match(file.name)
        if not m:
            continue
        try:
            img = Image.open(file).convert("RGB")
        except Exception as err:
            warnings.warn(f"skipping unreadable image {file.name}: {err}")
            continue
        arr = np.transpose(np.asarray(img, dtype=np.float32) / 255.0, (2, 0, 1))
        samples.append(IdentitySample(arr, int(m.group(1)), int(m.group(2))))
    if not samples:
        raise ValueError(f"no `<id>_<cam>_<idx>` images found in {root}")
    return samples


def save_image(path, image: np.ndarray) -> None:
    """Write a 3xHxW float image in [0, 1] as PNG."""
    arr = np.transpose(np.clip(image, 0, 1) * 255, (1, 2, 0)).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.transpose(np.asarray(img, dtype=np.float32) / 255.0, (2, 0, 1))


# ---------------------------------------------------------------------------
# PK batch sampling
# ---------------------------------------------------------------------------


def group_by_identity(samples: list[IdentitySample]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.identity, []).append(i)
    return groups


def pk_sample(
    samples: list[IdentitySample],
    k_id: int,
    k_img: int,
    rng: np.random.Generator,
) -> list[IdentitySample]:
    """Batch of k_id distinct identities with k_img images each.

    Identities owning fewer than k_img images are resampled with
    replacement.
    """
    groups = group_by_identity(samples)
    ids = sorted(groups)
    if len(ids) < k_id:
        raise ValueError(f"dataset has {len(ids)} identities, need {k_id}")
    chosen = rng.choice(ids, size=k_id, replace=False)
    batch = []
    for ident in chosen:
        pool = groups[int(ident)]
        replace = len(pool) < k_img
        picks = rng.choice(pool, size=k_img, replace=replace)
        batch.extend(samples[int(p)] for p in picks)
    return batch
