"""Synthetic abdominal CT phantoms with kidneys, a tumor and a cyst.

Used by the test-suite and for desk-scale smoke runs of the CLI.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .data import IMAGE_NAME, MASK_NAME, CtVolume, LabelMask, save_mask, save_volume

HU_AIR = -1000.0
HU_SOFT_TISSUE = 40.0
HU_KIDNEY = 180.0
HU_TUMOR = 90.0
HU_CYST = 0.0


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def make_phantom(shape: Sequence[int] = (48, 224, 384), spacing=(2.5, 0.8, 0.8), seed: int = 0,
                 noise_hu: float = 10.0) -> Tuple[CtVolume, LabelMask]:
    """Body ellipse, two ellipsoid kidneys, a tumor in one and a cyst in the other.

    Geometry is jittered by ``seed`` but always stays inside the volume.
    """
    rng = np.random.default_rng(seed)
    d, h, w = shape
    grid = np.ogrid[:d, :h, :w]
    jitter = lambda scale: 1.0 + rng.uniform(-scale, scale)

    body = _ellipse_body(grid, shape)
    hu = np.where(body, HU_SOFT_TISSUE, HU_AIR).astype(np.float32)
    labels = np.zeros(shape, np.uint8)

    kidney_r = (0.32 * d * jitter(0.1), 0.16 * h * jitter(0.1), 0.09 * w * jitter(0.1))
    centers = []
    for side in (-1, 1):
        c = (d / 2 + rng.uniform(-0.05, 0.05) * d,
             0.55 * h + rng.uniform(-0.03, 0.03) * h,
             w / 2 + side * 0.22 * w * jitter(0.05))
        centers.append(c)
        k = _ellipsoid(grid, c, kidney_r)
        labels[k] = 1
        hu[k] = HU_KIDNEY

    # the lesions sit fully inside their kidney
    r_t = 0.6 * min(kidney_r)
    c_t = (centers[0][0], centers[0][1], centers[0][2] + 0.35 * kidney_r[2])
    tumor = _ellipsoid(grid, c_t, (r_t, r_t, r_t * 0.8)) & (labels == 1)
    labels[tumor] = 2
    hu[tumor] = HU_TUMOR

    r_c = 0.5 * min(kidney_r)
    c_c = (centers[1][0] + 0.2 * kidney_r[0], centers[1][1], centers[1][2] - 0.3 * kidney_r[2])
    cyst = _ellipsoid(grid, c_c, (r_c, r_c, r_c * 0.8)) & (labels == 1)
    labels[cyst] = 3
    hu[cyst] = HU_CYST

    hu += rng.normal(0.0, noise_hu, size=shape).astype(np.float32)
    return CtVolume(hu, spacing), LabelMask(labels, spacing)


def _ellipse_body(grid, shape):
    _, h, w = shape
    _, yy, xx = grid
    inside = ((yy - h / 2) / (0.46 * h)) ** 2 + ((xx - w / 2) / (0.47 * w)) ** 2 <= 1.0
    return np.broadcast_to(inside, shape)


def write_phantom_dataset(root, n_cases: int, shape=(40, 64, 96), spacing=(2.5, 0.8, 0.8),
                          seed: int = 0, with_masks: bool = True) -> Path:
    """Write ``n_cases`` phantoms in the ``case_XXXXX/imaging.nii.gz`` layout."""
    root = Path(root)
    for i in range(n_cases):
        vol, mask = make_phantom(shape, spacing, seed + i)
        case_dir = root / f"case_{i:05d}"
        save_volume(vol, case_dir / IMAGE_NAME)
        if with_masks:
            save_mask(mask, case_dir / MASK_NAME)
    return root
