"""Dataset ingestion and condition-image construction.

Both translation directions train on (condition, target) pairs built
here: the inpainting direction overwrites an off-polyp region with white,
the synthesis direction overwrites the polyp region with its per-identity
grayscale value. A procedural phantom-fixture generator provides a
dataset-free test corpus.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

__all__ = [
    "PolypSample",
    "ConditionedPair",
    "MaskSpec",
    "ValueAssignment",
    "AugmentParams",
    "load_dataset",
    "assign_values",
    "augment_mask",
    "sample_augment_params",
    "place_nonoverlapping",
    "compose_condition",
    "dilate_mask",
    "build_p2n_sample",
    "build_n2p_sample",
    "make_fixtures",
    "read_image",
    "read_mask",
    "write_image",
    "write_mask",
    "bilinear_resize",
    "mask_bbox",
]

MASK_THRESHOLD = 128  # 8-bit binarization cut
P2N_FILL_VALUE = 255  # inpainting conditions use white regions


# ---------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------

@dataclass
class PolypSample:
    """One frame: RGB image, binary polyp mask, and the polyp's identity."""

    image: np.ndarray  # uint8 [H,W,3]
    mask: np.ndarray  # bool [H,W]
    polyp_id: int
    source_name: str = ""

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.source_name}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.source_name}: mask extents {self.mask.shape} != image {self.image.shape[:2]}"
            )


@dataclass
class ConditionedPair:
    """Training sample: condition image and its target, pixel-aligned."""

    condition: np.ndarray  # [H,W,3] uint8 or float32
    target: np.ndarray


@dataclass
class MaskSpec:
    """Binary shape, grayscale identity value, and top-left placement."""

    shape: np.ndarray  # bool [h,w]
    value: int = 255
    placement: Tuple[int, int] = (0, 0)

    def validate(self, frame_hw: Optional[Tuple[int, int]] = None):
        if not np.any(self.shape):
            raise DataError("MaskSpec: shape has no set pixels")
        if not 0 <= int(self.value) <= 255:
            raise DataError(f"MaskSpec: value {self.value} outside 0..255")
        if frame_hw is not None:
            top, left = self.placement
            h, w = self.shape.shape
            if top < 0 or left < 0 or top + h > frame_hw[0] or left + w > frame_hw[1]:
                raise DataError(
                    f"MaskSpec: placement {self.placement}+{self.shape.shape} "
                    f"outside frame {frame_hw}"
                )

    def full_frame(self, frame_hw: Tuple[int, int]) -> np.ndarray:
        """Shape pasted at its placement on a zero frame."""
        out = np.zeros(frame_hw, dtype=bool)
        top, left = self.placement
        h, w = self.shape.shape
        out[top : top + h, left : left + w] = self.shape
        return out


@dataclass(frozen=True)
class ValueAssignment:
    """Strictly increasing grayscale value per polyp identity."""

    values: Tuple[int, ...]

    def __getitem__(self, polyp_id: int) -> int:
        if not 0 <= polyp_id < len(self.values):
            raise DataError(f"polyp_id {polyp_id} outside assignment of size {len(self.values)}")
        return self.values[polyp_id]

    def __len__(self) -> int:
        return len(self.values)


def assign_values(k: int) -> ValueAssignment:
    """k grayscale identities evenly spread over 0..255 inclusive."""
    if not 2 <= k <= 256:
        raise DataError(f"assign_values: k must be in 2..256, got {k}")
    vals = tuple(int(np.rint(255.0 * i / (k - 1))) for i in range(k))
    return ValueAssignment(vals)


# ---------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr >= MASK_THRESHOLD


def write_image(path, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray):
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_dataset(image_dir, mask_dir, id_map: Optional[object] = None) -> List[PolypSample]:
    """Paired image/mask PNG directories, sorted by filename.

    ``id_map`` is a two-column CSV (filename, polyp_id); without it every
    file gets its own identity.
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    if not mask_dir.is_dir():
        raise DataError(f"mask directory not found: {mask_dir}")
    names = sorted(p.name for p in image_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        import warnings

        warnings.warn(f"no PNG images under {image_dir}; empty dataset")
        return []

    ids: Optional[Dict[str, int]] = None
    if id_map is not None:
        ids = {}
        with open(id_map, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "filename":
                    continue
                ids[row[0]] = int(row[1])
        for fname in ids:
            if fname not in names:
                raise DataError(f"id_map entry {fname!r} matches no image file")

    samples = []
    for idx, name in enumerate(names):
        mask_path = mask_dir / name
        if not mask_path.is_file():
            raise DataError(f"missing mask for image {name!r}")
        image = read_image(image_dir / name)
        mask = read_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise DataError(
                f"{name}: mask extents {mask.shape} != image extents {image.shape[:2]}"
            )
        if ids is not None:
            if name not in ids:
                raise DataError(f"image {name!r} missing from id_map")
            polyp_id = ids[name]
        else:
            polyp_id = idx
        samples.append(PolypSample(image=image, mask=mask, polyp_id=polyp_id, source_name=name))
    return samples


# ---------------------------------------------------------------------
# mask geometry
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    translation: Tuple[float, float] = (0.0, 0.0)  # (dy, dx) pixels
    perspective: float = 0.0  # corner jitter as fraction of extent


def sample_augment_params(rng: np.random.Generator, frame_hw: Tuple[int, int]) -> AugmentParams:
    """Random draw over the full augmentation ranges."""
    h, w = frame_hw
    return AugmentParams(
        rotation_deg=float(rng.uniform(-180.0, 180.0)),
        scale=float(rng.uniform(0.7, 1.3)),
        translation=(float(rng.uniform(-h / 2, h / 2)), float(rng.uniform(-w / 2, w / 2))),
        perspective=0.10,
    )


def _homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 map sending the 4 src corners to dst (x, y) points."""
    a = []
    b = []
    for (sx, sy), (dx, dy) in zip(src, dst):
        a.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy])
        a.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy])
        b.extend([dx, dy])
    coeff = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(coeff, 1.0).reshape(3, 3)


def augment_mask(
    mask: np.ndarray,
    params: AugmentParams,
    rng: np.random.Generator,
    max_retries: int = 10,
) -> np.ndarray:
    """Rotate/scale/translate/perspective-warp a binary mask.

    Nearest-neighbor resampling on the inverse map, re-binarized; empty
    results retry with fresh perspective jitter up to ``max_retries``.
    """
    if not np.any(mask):
        raise DataError("augment_mask: input mask is empty")
    h, w = mask.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(params.rotation_deg)
    # rotation+scale about the frame center, then translation
    affine = np.array(
        [
            [params.scale * np.cos(theta), -params.scale * np.sin(theta),
             cx + params.translation[1]],
            [params.scale * np.sin(theta), params.scale * np.cos(theta),
             cy + params.translation[0]],
            [0.0, 0.0, 1.0],
        ]
    ) @ np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])

    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    for attempt in range(max_retries):
        if params.perspective > 0:
            jitter = rng.uniform(-params.perspective, params.perspective, size=(4, 2))
            jitter *= np.array([w, h])
            hg = _homography_from_corners(corners, corners + jitter)
            if abs(np.linalg.det(hg)) < 1e-9:
                continue  # degenerate draw, resample
            m = hg @ affine
        else:
            m = affine
        out = _warp_mask_nn(mask, m)
        if np.any(out):
            return out
    raise DataError(f"augment_mask: empty result after {max_retries} retries")


def _warp_mask_nn(mask: np.ndarray, m: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    inv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)
    src = inv @ pts
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    ix = np.rint(sx).astype(np.int64)
    iy = np.rint(sy).astype(np.int64)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros(h * w, dtype=bool)
    out[ok] = mask[iy[ok], ix[ok]]
    return out.reshape(h, w)


def dilate_mask(mask: np.ndarray, radius: float = 10.0) -> np.ndarray:
    """Exact Euclidean dilation: pixels within ``radius`` of the mask."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0 or not np.any(mask):
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= radius


def mask_bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Tight (x1, y1, x2, y2) extent, right/bottom exclusive."""
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise DataError("mask_bbox: empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def place_nonoverlapping(
    shape: np.ndarray,
    polyp_mask: np.ndarray,
    rng: np.random.Generator,
    max_attempts: int = 100,
    value: int = P2N_FILL_VALUE,
) -> MaskSpec:
    """Uniform-random in-frame placement rejected until it clears the polyp."""
    shape = np.asarray(shape, dtype=bool)
    if not np.any(shape):
        raise DataError("place_nonoverlapping: shape is empty")
    fh, fw = polyp_mask.shape
    sh, sw = shape.shape
    if sh > fh or sw > fw:
        raise DataError(
            f"place_nonoverlapping: shape {shape.shape} larger than frame {polyp_mask.shape}"
        )
    for _ in range(max_attempts):
        top = int(rng.integers(0, fh - sh + 1))
        left = int(rng.integers(0, fw - sw + 1))
        if not np.any(shape & polyp_mask[top : top + sh, left : left + sw]):
            return MaskSpec(shape=shape, value=value, placement=(top, left))
    raise DataError(
        f"place_nonoverlapping: no clear placement in {max_attempts} attempts; "
        "use a smaller shape"
    )


def compose_condition(image: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Overwrite the placed region with the spec's grayscale value."""
    spec.validate(frame_hw=image.shape[:2])
    out = image.copy()
    region = spec.full_frame(image.shape[:2])
    out[region] = spec.value
    return out


def _tight_shape(mask: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = mask_bbox(mask)
    return mask[y1:y2, x1:x2].copy()


def build_p2n_sample(
    s: PolypSample,
    rng: np.random.Generator,
    params: Optional[AugmentParams] = None,
    max_retries: int = 10,
) -> ConditionedPair:
    """Inpainting pair: white augmented mask placed off-polyp, target = image.

    With library-sampled params, failed placements retry with a fresh,
    progressively smaller draw; explicit params get a single attempt and
    propagate the placement error.
    """
    s.validate()
    if params is not None:
        warped = augment_mask(s.mask, params, rng)
        spec = place_nonoverlapping(_tight_shape(warped), s.mask, rng)
        return ConditionedPair(condition=compose_condition(s.image, spec), target=s.image.copy())
    last_err: Optional[DataError] = None
    for attempt in range(max_retries):
        drawn = sample_augment_params(rng, s.mask.shape)
        drawn = replace(drawn, scale=drawn.scale * 0.8**attempt)
        try:
            warped = augment_mask(s.mask, drawn, rng)
            spec = place_nonoverlapping(_tight_shape(warped), s.mask, rng)
        except DataError as err:
            last_err = err
            continue
        return ConditionedPair(condition=compose_condition(s.image, spec), target=s.image.copy())
    raise last_err if last_err is not None else DataError("build_p2n_sample: no placement found")


def build_n2p_sample(s: PolypSample, va: ValueAssignment) -> ConditionedPair:
    """Synthesis pair: polyp region overwritten with its identity value."""
    s.validate()
    if not np.any(s.mask):
        raise DataError(f"{s.source_name}: polyp sample has empty mask")
    value = va[s.polyp_id]
    spec = MaskSpec(shape=s.mask, value=value, placement=(0, 0))
    return ConditionedPair(condition=compose_condition(s.image, spec), target=s.image.copy())


# ---------------------------------------------------------------------
# resizing (used by the jitter augmentation and fixtures)
# ---------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an [H,W] or [H,W,C] array."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False
    top = img[y0][:, x0] * (1 - wx)[None, :, None] + img[y0][:, x1] * wx[None, :, None]
    bot = img[y1][:, x0] * (1 - wx)[None, :, None] + img[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------
# phantom fixtures
# ---------------------------------------------------------------------

_ID_PALETTE = (
    (235, 85, 85),
    (95, 225, 105),
    (115, 125, 245),
    (235, 220, 70),
    (225, 95, 230),
    (85, 225, 225),
    (245, 165, 70),
    (160, 245, 160),
)


def _phantom_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Vignetted pinkish field with low-frequency noise, float [H,W,3]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    r = np.sqrt((ys - c) ** 2 + (xs - c) ** 2) / (c * np.sqrt(2.0))
    lum = 185.0 - 110.0 * r
    coarse = rng.normal(0.0, 1.0, size=(4, 4)).astype(np.float32)
    noise = bilinear_resize(coarse, size, size) * 12.0
    base = lum + noise
    tint = np.array([1.0, 0.68, 0.62], dtype=np.float32)
    return base[:, :, None] * tint[None, None, :]


def _ellipse_mask(size: int, center, axes, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = ys - center[0], xs - center[1]
    ct, st = np.cos(angle), np.sin(angle)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def make_fixtures(n: int, size: int, n_ids: int, seed: int) -> List[PolypSample]:
    """Procedural phantom frames with exact masks, one blob per frame.

    Blob color and texture are deterministic functions of the polyp id, so
    identity-conditioned synthesis has a real signal to learn; frames cycle
    ids 0..n_ids-1.
    """
    if n < 1 or n_ids < 1:
        raise DataError(f"make_fixtures: n and n_ids must be >= 1, got {n}, {n_ids}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        pid = i % n_ids
        bg = _phantom_background(size, rng)
        center = rng.uniform(size * 0.3, size * 0.7, size=2)
        axes = rng.uniform(size / 8.0, size / 4.0, size=2)
        angle = rng.uniform(0.0, np.pi)
        mask = _ellipse_mask(size, center, axes, angle)
        color = np.array(_ID_PALETTE[pid % len(_ID_PALETTE)], dtype=np.float32)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
        freq = 2.0 + pid
        ripple = 18.0 * np.sin(2 * np.pi * freq * (xs + ys * (1 + pid)) / size)
        img = bg.copy()
        blob = color[None, None, :] + ripple[:, :, None]
        img[mask] = blob[mask]
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        samples.append(
            PolypSample(image=img, mask=mask, polyp_id=pid, source_name=f"phantom_{i:03d}.png")
        )
    return samples
