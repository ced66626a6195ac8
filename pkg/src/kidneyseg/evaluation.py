"""Volumetric Dice, Surface Dice and the hierarchical evaluation classes (HECs)."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .data import MASK_NAME, AlignmentError, LabelMask, atomic_write_text, load_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HecSpec:
    name: str
    included_labels: frozenset


HECS = (
    HecSpec("kidney_and_masses", frozenset({1, 2, 3})),
    HecSpec("masses", frozenset({2, 3})),
    HecSpec("tumor", frozenset({2})),
)
HEC_NAMES = tuple(h.name for h in HECS)
DEFAULT_TOLERANCE_MM = 1.0


def hec_mask(mask, hec: HecSpec) -> np.ndarray:
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    return np.isin(labels, sorted(hec.included_labels))


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b, empty_value: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return empty_value
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def surfel_centers(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Physical centers (mm) of all faces separating foreground from background.

    Voxel centers sit at integer indices; a face between voxels ``i-1`` and
    ``i`` along an axis sits at ``i - 0.5``. Space outside the array counts
    as background.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for axis in range(mask.ndim):
        pad = [(0, 0)] * mask.ndim
        pad[axis] = (1, 1)
        p = np.pad(mask, pad)
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        faces = np.argwhere(p[tuple(lo)] != p[tuple(hi)]).astype(np.float64)
        faces[:, axis] -= 0.5
        pts.append(faces)
    pts = np.concatenate(pts, axis=0)
    return pts * np.asarray(spacing, dtype=np.float64)


def surface_dice(a, b, spacing: Sequence[float] = (1.0, 1.0, 1.0),
                 tolerance_mm: float = DEFAULT_TOLERANCE_MM, empty_value: float = 1.0) -> float:
    """Fraction of both surfaces lying within ``tolerance_mm`` of the other surface."""
    a, b = _check_pair(a, b)
    if tolerance_mm < 0:
        raise ValueError("tolerance_mm must be non-negative")
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return empty_value
    if not (has_a and has_b):
        return 0.0
    sa = surfel_centers(a, spacing)
    sb = surfel_centers(b, spacing)
    da, _ = cKDTree(sb).query(sa, k=1)
    db, _ = cKDTree(sa).query(sb, k=1)
    matched = int((da <= tolerance_mm).sum()) + int((db <= tolerance_mm).sum())
    return matched / (len(sa) + len(sb))


def _same_grid(pred: LabelMask, truth: LabelMask) -> None:
    if pred.shape != truth.shape:
        raise AlignmentError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    if not np.allclose(pred.spacing, truth.spacing, rtol=1e-4, atol=1e-6):
        raise AlignmentError(f"prediction spacing {pred.spacing} != ground truth spacing {truth.spacing}")


def evaluate_case(pred: LabelMask, truth: LabelMask,
                  tolerances: Optional[Mapping[str, float]] = None) -> Dict[str, Dict[str, float]]:
    _same_grid(pred, truth)
    tolerances = {**{h: DEFAULT_TOLERANCE_MM for h in HEC_NAMES}, **(tolerances or {})}
    out = {}
    for hec in HECS:
        p, t = hec_mask(pred, hec), hec_mask(truth, hec)
        out[hec.name] = {
            "dice": dice(p, t),
            "surface_dice": surface_dice(p, t, truth.spacing, tolerances[hec.name]),
        }
    return out


@dataclass
class MetricsReport:
    per_case: Dict[str, Dict[str, Dict[str, float]]]
    aggregate: Dict[str, Dict[str, float]]
    missing: List[str] = field(default_factory=list)
    tolerances: Dict[str, float] = field(default_factory=dict)
    timing: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"cases": self.per_case, "aggregate": self.aggregate, "missing": self.missing,
                "tolerances": self.tolerances, "timing": self.timing}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["case_id", "hec", "dice", "surface_dice"])
        for case_id in sorted(self.per_case):
            for hec in HEC_NAMES:
                m = self.per_case[case_id][hec]
                w.writerow([case_id, hec, f"{m['dice']:.6f}", f"{m['surface_dice']:.6f}"])
        return buf.getvalue()

    def write(self, out_dir) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        json_path, csv_path = out_dir / "metrics.json", out_dir / "metrics.csv"
        atomic_write_text(json_path, json.dumps(self.to_dict(), indent=2))
        atomic_write_text(csv_path, self.to_csv())
        return json_path, csv_path

    def table(self) -> str:
        lines = [f"{'HEC':<20}{'Dice':>8}{'Surface Dice':>15}"]
        for hec in HEC_NAMES:
            m = self.aggregate[hec]
            lines.append(f"{hec:<20}{m['dice']:>8.3f}{m['surface_dice']:>15.3f}")
        return "\n".join(lines)


def index_masks(root) -> Dict[str, Path]:
    """Map case id to mask path for ``<id>/segmentation.nii.gz`` or ``<id>.nii.gz`` layouts."""
    root = Path(root)
    found = {}
    for p in sorted(root.iterdir()):
        if p.is_dir() and (p / MASK_NAME).is_file():
            found[p.name] = p / MASK_NAME
        elif p.is_file() and p.name.endswith((".nii.gz", ".nii")):
            found[p.name.split(".nii")[0]] = p
    return found


def _evaluate_files(args):
    case_id, pred_path, truth_path, tolerances = args
    return case_id, evaluate_case(load_mask(pred_path), load_mask(truth_path), tolerances)


def _zero_metrics() -> Dict[str, Dict[str, float]]:
    return {h: {"dice": 0.0, "surface_dice": 0.0} for h in HEC_NAMES}


def evaluate_dataset(pred_dir, truth_dir, tolerances: Optional[Mapping[str, float]] = None,
                     workers: int = 1) -> MetricsReport:
    preds, truths = index_masks(pred_dir), index_masks(truth_dir)
    common = sorted(set(preds) & set(truths))
    if not common:
        raise ValueError(f"no overlapping cases between {pred_dir} and {truth_dir}")
    tolerances = {**{h: DEFAULT_TOLERANCE_MM for h in HEC_NAMES}, **(tolerances or {})}
    missing = sorted(set(truths) - set(preds))
    for case_id in missing:
        log.warning("no prediction for %s; scoring it as 0", case_id)

    jobs = [(c, preds[c], truths[c], tolerances) for c in common]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = dict(pool.map(_evaluate_files, jobs))
    else:
        results = dict(map(_evaluate_files, jobs))
    per_case = {c: results[c] for c in common}
    per_case.update({c: _zero_metrics() for c in missing})

    aggregate = {
        h: {m: float(np.mean([per_case[c][h][m] for c in per_case])) for m in ("dice", "surface_dice")}
        for h in HEC_NAMES
    }
    return MetricsReport(per_case, aggregate, missing, dict(tolerances), _timing_summary(Path(pred_dir)))


def _timing_summary(pred_dir: Path) -> Optional[dict]:
    totals = []
    for p in sorted(pred_dir.glob("*_timing.json")):
        try:
            totals.append(float(json.loads(p.read_text())["total_s"]))
        except (ValueError, KeyError, TypeError):
            continue
    if not totals:
        return None
    return {"cases": len(totals), "mean_s": float(np.mean(totals)), "max_s": float(np.max(totals))}
