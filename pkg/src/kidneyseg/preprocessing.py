"""Intensity windowing, resampling, ROI cropping, z-cube sampling, augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy import ndimage

from .data import CtVolume, LabelMask, RoiBox

HU_MIN = -200.0
HU_MAX = 400.0
HU_CENTER = (HU_MIN + HU_MAX) / 2
HU_HALF_WIDTH = (HU_MAX - HU_MIN) / 2

COARSE_SHAPE = (128, 128, 128)
FINE_INPLANE = (224, 384)
FINE_DEPTH = 48
ROI_MARGIN = 5
KIDNEY_LABELS = frozenset({1, 2, 3})

Grid = TypeVar("Grid", CtVolume, LabelMask)


class NoKidneyError(RuntimeError):
    """The mask handed to ROI extraction has no foreground voxel."""


def clip_and_normalize(vol: CtVolume) -> CtVolume:
    """Window HU values to [-200, 400] and map them affinely onto [-1, 1]."""
    if vol.normalized:
        raise ValueError("volume is already normalized")
    v = np.clip(vol.voxels.astype(np.float32, copy=False), HU_MIN, HU_MAX)
    v = (v - np.float32(HU_CENTER)) / np.float32(HU_HALF_WIDTH)
    return vol.with_voxels(v.astype(np.float32, copy=False), normalized=True)


# --------------------------------------------------------------------- resampling

def _source_coords(n_src: int, n_dst: int) -> np.ndarray:
    # corner-aligned: first and last samples coincide
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return (np.arange(n_dst) * (n_src - 1)) / (n_dst - 1)


def _linear_axis(a: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = a.shape[axis]
    if n_src == 1:
        return np.repeat(a, n_dst, axis=axis)
    src = _source_coords(n_src, n_dst)
    i0 = np.clip(np.floor(src).astype(np.intp), 0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = (src - i0).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_dst
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    hi -= lo
    hi *= w
    lo += hi
    return lo


def _nearest_axis(a: np.ndarray, axis: int, n_dst: int) -> np.ndarray:
    n_src = a.shape[axis]
    idx = np.clip(np.floor(_source_coords(n_src, n_dst) + 0.5).astype(np.intp), 0, n_src - 1)
    return np.take(a, idx, axis=axis)


def resample_array(a: np.ndarray, target_shape: Sequence[int], interpolation: str = "trilinear") -> np.ndarray:
    """Separable corner-aligned resampling of a 3D array.

    Axes whose length does not change are left untouched, so e.g. a
    ``(d, h, w) -> (d, 224, 384)`` resize copies every z-slice position exactly.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != a.ndim or min(target_shape) < 1:
        raise ValueError(f"invalid target shape {target_shape} for array of shape {a.shape}")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    out = a
    if interpolation == "trilinear":
        if not np.issubdtype(out.dtype, np.floating):
            out = out.astype(np.float32)
        lo, hi = out.min(), out.max()
    # shrink first so later passes touch fewer voxels
    axes = sorted(range(a.ndim), key=lambda ax: target_shape[ax] / a.shape[ax])
    for ax in axes:
        if out.shape[ax] == target_shape[ax]:
            continue
        if interpolation == "trilinear":
            out = _linear_axis(out, ax, target_shape[ax])
        else:
            out = _nearest_axis(out, ax, target_shape[ax])
    if out is a:
        return a.copy()
    if interpolation == "trilinear":
        np.clip(out, lo, hi, out=out)
    return np.ascontiguousarray(out)


def resample_volume(vol: Grid, target_shape: Sequence[int], interpolation: Optional[str] = None) -> Grid:
    """Resample a volume (trilinear by default) or a mask (always nearest)."""
    target_shape = tuple(int(t) for t in target_shape)
    spacing = tuple(s * n / t for s, n, t in zip(vol.spacing, vol.shape, target_shape))
    if isinstance(vol, LabelMask):
        if interpolation not in (None, "nearest"):
            raise ValueError("label masks can only be resampled with nearest interpolation")
        return LabelMask(resample_array(vol.labels, target_shape, "nearest"), spacing, vol.origin)
    out = resample_array(vol.voxels, target_shape, interpolation or "trilinear")
    return vol.with_voxels(out, spacing=spacing)


# --------------------------------------------------------------------------- ROI

def compute_roi(mask: Union[LabelMask, np.ndarray], foreground_labels: Iterable[int] = KIDNEY_LABELS,
                margin_voxels: int = ROI_MARGIN) -> RoiBox:
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    fg = np.isin(labels, list(foreground_labels))
    if not fg.any():
        raise NoKidneyError("no kidney found: mask has no foreground voxels")
    bounds = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(fg.any(axis=other))
        lo = max(int(hit[0]) - margin_voxels, 0)
        hi = min(int(hit[-1]) + 1 + margin_voxels, labels.shape[axis])
        bounds += [lo, hi]
    return RoiBox(*bounds)


def crop_roi(vol: Grid, box: RoiBox) -> Grid:
    box.validate(vol.shape)
    origin = tuple(o + i * s for o, i, s in zip(vol.origin, box.offset, vol.spacing))
    if isinstance(vol, LabelMask):
        return LabelMask(vol.labels[box.slices()].copy(), vol.spacing, origin)
    return vol.with_voxels(vol.voxels[box.slices()].copy(), origin=origin)


def paste_roi(target: np.ndarray, patch: np.ndarray, box: RoiBox) -> np.ndarray:
    """Write ``patch`` into ``target`` at ``box`` (in place) and return ``target``."""
    box.validate(target.shape)
    if tuple(patch.shape) != box.shape:
        raise ValueError(f"patch shape {patch.shape} does not match box shape {box.shape}")
    target[box.slices()] = patch
    return target


# ------------------------------------------------------------------ z sampling

def pad_z(a: np.ndarray, depth: int, value) -> np.ndarray:
    d = a.shape[0]
    if d >= depth:
        return a
    before = (depth - d) // 2
    return np.pad(a, ((before, depth - d - before), (0, 0), (0, 0)), constant_values=value)


def choose_z_offset(fg_per_slice: np.ndarray, depth: int, rng: np.random.Generator,
                    foreground_prob: float = 0.9) -> int:
    d = len(fg_per_slice)
    n_pos = d - depth + 1
    if n_pos <= 1:
        return 0
    # draw both variates unconditionally so the stream does not depend on the data
    prefer_fg = rng.random() < foreground_prob
    u = rng.random()
    csum = np.concatenate([[0], np.cumsum(fg_per_slice.astype(np.int64))])
    has_fg = np.flatnonzero(csum[depth:] - csum[:n_pos] > 0)
    if prefer_fg and len(has_fg):
        return int(has_fg[int(u * len(has_fg))])
    return int(u * n_pos)


def sample_z_cube(vol: CtVolume, mask: LabelMask, depth: int = FINE_DEPTH,
                  rng: Optional[np.random.Generator] = None,
                  foreground_prob: float = 0.9) -> Tuple[CtVolume, LabelMask]:
    """Cut a ``depth``-slice window out of an ROI, keeping the full in-plane extent."""
    if vol.shape != mask.shape:
        raise ValueError(f"volume {vol.shape} and mask {mask.shape} are not aligned")
    rng = rng if rng is not None else np.random.default_rng()
    d = vol.shape[0]
    if d <= depth:
        before = (depth - d) // 2
        origin_z = vol.origin[0] - before * vol.spacing[0]
        img = pad_z(vol.voxels, depth, -1.0 if vol.normalized else vol.voxels.min())
        lab = pad_z(mask.labels, depth, 0)
    else:
        fg = mask.labels.reshape(d, -1).any(axis=1)
        z0 = choose_z_offset(fg, depth, rng, foreground_prob)
        origin_z = vol.origin[0] + z0 * vol.spacing[0]
        img = vol.voxels[z0:z0 + depth].copy()
        lab = mask.labels[z0:z0 + depth].copy()
    origin = (origin_z,) + tuple(vol.origin[1:])
    return (vol.with_voxels(img, origin=origin),
            LabelMask(lab, mask.spacing, origin))


# ----------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.6, 1.3)
    photometric_range: Tuple[float, float] = (0.6, 1.5)
    elastic_prob: float = 0.5
    elastic_sigma: Tuple[float, float] = (3.0, 5.0)
    elastic_magnitude: Tuple[float, float] = (100.0, 200.0)
    lesion_photometric: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "photometric_range", "elastic_sigma", "elastic_magnitude"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if not 0.0 <= self.elastic_prob <= 1.0:
            raise ValueError("elastic_prob must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_range=(1, 1), photometric_range=(1, 1), elastic_prob=0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _zoom_crop(img, lab, scale, rng):
    n = np.array(img.shape)
    # output voxel i samples the input at start + i * scale
    span = (n - 1) * (1 - scale)
    start = np.where(span >= 0, rng.random(3) * span, span * rng.random(3))
    matrix = np.diag(np.full(3, scale))
    img = ndimage.affine_transform(img, matrix, offset=start, order=1, mode="constant", cval=-1.0)
    lab = ndimage.affine_transform(lab, matrix, offset=start, order=0, mode="constant", cval=0)
    return img.astype(np.float32, copy=False), lab


def _elastic(img, lab, sigma, magnitude, rng):
    grid = np.indices(img.shape, dtype=np.float32)
    for axis in range(3):
        noise = rng.uniform(-1.0, 1.0, img.shape).astype(np.float32)
        grid[axis] += ndimage.gaussian_filter(noise, sigma) * np.float32(magnitude)
    img = ndimage.map_coordinates(img, grid, order=1, mode="nearest").astype(np.float32, copy=False)
    lab = ndimage.map_coordinates(lab, grid, order=0, mode="nearest")
    return img, lab


def augment(sample: Tuple[CtVolume, LabelMask], cfg: AugmentConfig,
            rng: np.random.Generator) -> Tuple[CtVolume, LabelMask]:
    """Zoom-crop, brightness/contrast/gamma, optional elastic warp, clamp to [-1, 1]."""
    vol, mask = sample
    if vol.shape != mask.shape:
        raise ValueError("image and mask shapes differ")
    img = vol.voxels.astype(np.float32, copy=True)
    lab = mask.labels.copy()

    scale = rng.uniform(*cfg.scale_range)
    if scale != 1.0:
        img, lab = _zoom_crop(img, lab, scale, rng)

    brightness, contrast, gamma = rng.uniform(*cfg.photometric_range, size=3)
    lesion_factor = rng.uniform(*cfg.photometric_range)
    if brightness != 1.0:
        img *= np.float32(brightness)
    if contrast != 1.0:
        mean = img.mean(dtype=np.float64)
        img = ((img - mean) * contrast + mean).astype(np.float32)
    if gamma != 1.0:
        u = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
        img = (2.0 * u ** gamma - 1.0).astype(np.float32)
    if cfg.lesion_photometric and lesion_factor != 1.0:
        lesion = lab >= 2
        img[lesion] *= np.float32(lesion_factor)

    if rng.random() < cfg.elastic_prob:
        sigma = rng.uniform(*cfg.elastic_sigma)
        magnitude = rng.uniform(*cfg.elastic_magnitude)
        img, lab = _elastic(img, lab, sigma, magnitude, rng)

    np.clip(img, -1.0, 1.0, out=img)
    return vol.with_voxels(img), mask.with_labels(lab.astype(np.uint8, copy=False))
