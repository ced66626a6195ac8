"""Volume/mask containers, NIfTI I/O, KiTS-style manifests and fold splits.

Arrays are always stored in (z, y, x) order. NIfTI files store (x, y, z),
so axes are reversed on load and on save.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np

Triple = Tuple[float, float, float]

LABELS = {"background": 0, "kidney": 1, "tumor": 2, "cyst": 3}
VALID_LABELS = frozenset(LABELS.values())

IMAGE_NAME = "imaging.nii.gz"
MASK_NAME = "segmentation.nii.gz"


class VolumeFormatError(ValueError):
    """File content is not a usable 3D scalar volume or label map."""


class AlignmentError(ValueError):
    """Two grids that must coincide do not."""


@dataclass
class CtVolume:
    voxels: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    normalized: bool = False

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty 3D array, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "CtVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass
class LabelMask:
    labels: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise VolumeFormatError(f"expected a 3D label array, got shape {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.labels.dtype == np.uint8:
            if self.labels.size and self.labels.max() > 3:
                check_labels(self.labels)
        else:
            check_labels(self.labels)
            self.labels = self.labels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    def with_labels(self, labels: np.ndarray) -> "LabelMask":
        return replace(self, labels=labels)

    @classmethod
    def empty_like(cls, ref: "CtVolume | LabelMask") -> "LabelMask":
        return cls(np.zeros(ref.shape, np.uint8), ref.spacing, ref.origin)


@dataclass(frozen=True)
class RoiBox:
    """Half-open voxel box ``[z0, z1) x [y0, y1) x [x0, x1)``."""

    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0)

    @property
    def offset(self) -> Tuple[int, int, int]:
        return (self.z0, self.y0, self.x0)

    def slices(self) -> Tuple[slice, slice, slice]:
        return slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1)

    def validate(self, shape: Sequence[int]) -> None:
        for lo, hi, n in zip((self.z0, self.y0, self.x0), (self.z1, self.y1, self.x1), shape):
            if not 0 <= lo < hi <= n:
                raise ValueError(f"{self} does not fit inside a volume of shape {tuple(shape)}")

    def to_list(self) -> List[int]:
        return [self.z0, self.z1, self.y0, self.y1, self.x0, self.x1]


@dataclass
class CaseRecord:
    case_id: str
    image_path: Path
    mask_path: Optional[Path] = None


def check_labels(labels: np.ndarray) -> None:
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise VolumeFormatError("label map contains non-integer values")
    present = set(np.unique(labels).astype(int).tolist())
    bad = present - VALID_LABELS
    if bad:
        raise VolumeFormatError(f"label map contains values outside {{0,1,2,3}}: {sorted(bad)}")


def _from_f32(v) -> float:
    # headers hold float32; take the shortest decimal that maps to the same float32
    return float(str(np.float32(v)))


def _geometry_from_header(img) -> Tuple[Triple, Triple]:
    zooms = img.header.get_zooms()[:3]
    spacing = (_from_f32(zooms[2]), _from_f32(zooms[1]), _from_f32(zooms[0]))
    t = img.affine[:3, 3]
    origin = (_from_f32(t[2]), _from_f32(t[1]), _from_f32(t[0]))
    return spacing, origin


def _affine(spacing: Triple, origin: Triple) -> np.ndarray:
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = spacing[2], spacing[1], spacing[0]
    aff[:3, 3] = (origin[2], origin[1], origin[0])
    return aff


def _read(path) -> "nib.Nifti1Image":
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types on corrupt input
        raise VolumeFormatError(f"cannot read NIfTI {path}: {exc}") from exc
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        pass
    elif len(shape) != 3:
        raise VolumeFormatError(f"{path}: expected 3D scalar data, got shape {shape}")
    return img


def _zyx(img) -> np.ndarray:
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4:
        data = data[..., 0]
    return np.ascontiguousarray(np.transpose(data, (2, 1, 0)))


def load_volume(path) -> CtVolume:
    img = _read(path)
    spacing, origin = _geometry_from_header(img)
    data = _zyx(img)
    if np.iscomplexobj(data) or data.dtype.fields is not None:
        raise VolumeFormatError(f"{path}: non-scalar voxel type {data.dtype}")
    return CtVolume(data.astype(np.float32), spacing, origin, normalized=False)


def save_volume(vol: CtVolume, path) -> None:
    _write(np.transpose(vol.voxels.astype(np.float32), (2, 1, 0)), vol.spacing, vol.origin, path)


def load_mask(path, reference: Optional[CtVolume] = None) -> LabelMask:
    img = _read(path)
    spacing, origin = _geometry_from_header(img)
    data = _zyx(img)
    if reference is not None and data.shape != reference.shape:
        raise AlignmentError(f"{path}: mask shape {data.shape} != volume shape {reference.shape}")
    check_labels(data)
    return LabelMask(data.astype(np.uint8), spacing, origin)


def save_mask(mask: LabelMask, path) -> None:
    _write(np.transpose(mask.labels.astype(np.uint8), (2, 1, 0)), mask.spacing, mask.origin, path)


def _write(data_xyz: np.ndarray, spacing: Triple, origin: Triple, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(data_xyz, _affine(spacing, origin))
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    img.set_qform(img.affine, code=1)
    img.set_sform(img.affine, code=1)
    nib.save(img, str(path))


def build_manifest(root) -> List[CaseRecord]:
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a directory")
    records = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        image = case_dir / IMAGE_NAME
        if not image.is_file():
            continue
        mask = case_dir / MASK_NAME
        records.append(CaseRecord(case_dir.name, image, mask if mask.is_file() else None))
    return records


def split_folds(manifest: Sequence, k: int = 5, seed: int = 0) -> List[Tuple[list, list]]:
    """Shuffle cases once with ``seed`` and deal them into ``k`` validation folds.

    Fold sizes differ by at most one; the larger folds come first.
    """
    n = len(manifest)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot split {n} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = []
    for val_idx in np.array_split(order, k):
        val_set = set(val_idx.tolist())
        train = [manifest[i] for i in range(n) if i not in val_set]
        val = [manifest[i] for i in sorted(val_set)]
        folds.append((train, val))
    return folds


def _case_id(item) -> str:
    return item.case_id if isinstance(item, CaseRecord) else str(item)


def write_folds(folds, path) -> None:
    payload = {"folds": [{"train": [_case_id(c) for c in tr], "val": [_case_id(c) for c in va]}
                         for tr, va in folds]}
    atomic_write_text(path, json.dumps(payload, indent=2))


def read_folds(path) -> List[Tuple[List[str], List[str]]]:
    payload = json.loads(Path(path).read_text())
    return [(list(f["train"]), list(f["val"])) for f in payload["folds"]]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
