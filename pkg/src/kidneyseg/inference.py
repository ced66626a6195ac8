"""Coarse-to-fine cascade inference, z-flip TTA and connected-component cleanup."""

from __future__ import annotations

import logging
import resource
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .data import CaseRecord, CtVolume, LabelMask, load_volume
from .network import ResUNet
from .preprocessing import (COARSE_SHAPE, FINE_INPLANE, ROI_MARGIN, NoKidneyError, clip_and_normalize,
                            compute_roi, crop_roi, paste_roi, resample_array)
from .training import LABEL_OF_LESION_CLASS, load_network

log = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]
PHASES = ("load", "coarse", "fine", "postprocess")


@dataclass
class PipelineConfig:
    coarse_checkpoint: Optional[str] = None
    kidney_checkpoint: Optional[str] = None
    lesion_checkpoint: Optional[str] = None
    cc_min_voxels: int = 10000
    connectivity: int = 26
    tta_enabled: bool = True
    coarse_tta: bool = False
    fine_depth_chunk: int = 96
    chunk_overlap: int = 8
    coarse_shape: Tuple[int, int, int] = COARSE_SHAPE
    fine_inplane: Tuple[int, int] = FINE_INPLANE
    roi_margin: int = ROI_MARGIN
    coarse_cleanup_fraction: float = 0.01

    def __post_init__(self):
        self.coarse_shape = tuple(int(v) for v in self.coarse_shape)
        self.fine_inplane = tuple(int(v) for v in self.fine_inplane)
        if self.cc_min_voxels < 0:
            raise ValueError("cc_min_voxels must be >= 0")
        if not 0 <= self.chunk_overlap < self.fine_depth_chunk:
            raise ValueError("chunk_overlap must satisfy 0 <= chunk_overlap < fine_depth_chunk")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")

    def checkpoints(self) -> Dict[str, Optional[str]]:
        return {"coarse": self.coarse_checkpoint, "fine_kidney": self.kidney_checkpoint,
                "fine_lesion": self.lesion_checkpoint}

    def check_checkpoints(self) -> None:
        for name, path in self.checkpoints().items():
            if not path:
                raise ValueError(f"no checkpoint configured for the {name} model")
            if not Path(path).is_file():
                raise FileNotFoundError(f"{name} checkpoint not found: {path}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coarse_shape"] = list(self.coarse_shape)
        d["fine_inplane"] = list(self.fine_inplane)
        return d


# ------------------------------------------------------------- probabilities

def check_probability_map(probs: np.ndarray, atol: float = 1e-5) -> None:
    if probs.ndim != 4:
        raise ValueError("probability maps are (class, z, y, x) arrays")
    if not np.allclose(probs.sum(0), 1.0, atol=atol):
        raise ValueError("class probabilities do not sum to one")


def _device_of(net: torch.nn.Module) -> torch.device:
    return next(net.parameters()).device


@torch.no_grad()
def _softmax_forward(net: ResUNet, image: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None].to(_device_of(net))
    return torch.softmax(net(x), 1)[0].float().cpu().numpy()


def z_windows(depth: int, chunk: int, overlap: int):
    if depth <= chunk:
        return [0]
    stride = chunk - overlap
    starts = list(range(0, depth - chunk, stride))
    starts.append(depth - chunk)
    return starts


def predict_probabilities(net: ResUNet, image: np.ndarray, chunk: Optional[int] = None,
                          overlap: int = 0) -> np.ndarray:
    """Softmax output on ``image``'s grid, z-chunked when deeper than ``chunk``.

    Overlapping chunks are averaged voxel-wise.
    """
    net.eval()
    depth = image.shape[0]
    if chunk is None or depth <= chunk:
        return _softmax_forward(net, image)
    probs = None
    counts = np.zeros(depth, np.float32)
    for z0 in z_windows(depth, chunk, overlap):
        p = _softmax_forward(net, image[z0:z0 + chunk])
        if probs is None:
            probs = np.zeros((p.shape[0],) + image.shape, np.float32)
        probs[:, z0:z0 + chunk] += p
        counts[z0:z0 + chunk] += 1
    return probs / counts[None, :, None, None]


def tta_zflip(predict_fn: PredictFn, image) -> np.ndarray:
    """Average of the prediction and the un-flipped prediction of the z-mirrored input."""
    if isinstance(image, CtVolume):
        image = image.voxels
    direct = predict_fn(image)
    mirrored = predict_fn(np.ascontiguousarray(image[::-1]))[:, ::-1]
    return 0.5 * (direct + mirrored)


# -------------------------------------------------------- connected components

def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    return ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)


def filter_connected_components(mask, min_voxels: int = 10000, connectivity: int = 26):
    """Erase foreground components with ``min_voxels`` voxels or fewer.

    Components are taken over the union of all non-zero labels; surviving
    voxels keep their class.
    """
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    comp, n = ndimage.label(labels > 0, structure=_structure(connectivity))
    if n == 0:
        out = labels.copy()
    else:
        sizes = np.bincount(comp.ravel())
        keep = sizes > min_voxels
        keep[0] = False
        out = np.where(keep[comp], labels, 0).astype(labels.dtype)
    return mask.with_labels(out) if isinstance(mask, LabelMask) else out


def _drop_small_relative(binary: np.ndarray, fraction: float) -> np.ndarray:
    comp, n = ndimage.label(binary, structure=_structure(26))
    if n <= 1:
        return binary
    sizes = np.bincount(comp.ravel())
    sizes[0] = 0
    keep = sizes >= fraction * sizes.max()
    keep[0] = False
    return keep[comp]


# ------------------------------------------------------------------- stages

def predict_coarse(net: ResUNet, vol: CtVolume, coarse_shape=COARSE_SHAPE, tta: bool = False,
                   cleanup_fraction: float = 0.01) -> LabelMask:
    """Binary kidney mask on the original grid from a whole-volume low-res pass."""
    if not vol.normalized:
        raise ValueError("predict_coarse expects a normalized volume")
    small = resample_array(vol.voxels, coarse_shape, "trilinear")
    fn = lambda a: _softmax_forward(net, a)
    probs = tta_zflip(fn, small) if tta else fn(small)
    kidney = probs.argmax(0) == 1
    if cleanup_fraction > 0:
        kidney = _drop_small_relative(kidney, cleanup_fraction)
    full = resample_array(kidney.astype(np.uint8), vol.shape, "nearest")
    return LabelMask(full, vol.spacing, vol.origin)


def predict_fine(kidney_net: ResUNet, lesion_net: ResUNet, vol: CtVolume, coarse_mask: LabelMask,
                 cfg: PipelineConfig) -> LabelMask:
    """Kidney then lesion segmentation inside the coarse ROI, returned on the original grid."""
    box = compute_roi(coarse_mask, {1}, cfg.roi_margin)
    roi = crop_roi(vol, box)
    roi_shape = roi.shape
    fine_shape = (roi_shape[0],) + tuple(cfg.fine_inplane)
    image = resample_array(roi.voxels, fine_shape, "trilinear")

    def run(net):
        fn = lambda a: predict_probabilities(net, a, cfg.fine_depth_chunk, cfg.chunk_overlap)
        return tta_zflip(fn, image) if cfg.tta_enabled else fn(image)

    kidney = run(kidney_net).argmax(0) == 1
    lesion_cls = run(lesion_net).argmax(0)
    fine_labels = np.where(kidney, LABEL_OF_LESION_CLASS[lesion_cls], 0).astype(np.uint8)

    back = resample_array(fine_labels, roi_shape, "nearest")
    out = np.zeros(vol.shape, np.uint8)
    paste_roi(out, back, box)
    return LabelMask(out, vol.spacing, vol.origin)


# ----------------------------------------------------------------- pipeline

class CaseError(RuntimeError):
    pass


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


@dataclass
class CascadePipeline:
    coarse_net: ResUNet
    kidney_net: ResUNet
    lesion_net: ResUNet
    cfg: PipelineConfig = field(default_factory=PipelineConfig)

    @classmethod
    def from_config(cls, cfg: PipelineConfig, device=None) -> "CascadePipeline":
        cfg.check_checkpoints()
        nets = [load_network(p, device)[0] for p in
                (cfg.coarse_checkpoint, cfg.kidney_checkpoint, cfg.lesion_checkpoint)]
        return cls(*nets, cfg=cfg)

    def run_case(self, case: CaseRecord) -> Tuple[LabelMask, dict]:
        phases = {}
        warnings = []
        cuda = torch.cuda.is_available()
        if cuda:
            torch.cuda.reset_peak_memory_stats()
        t_start = time.perf_counter()
        try:
            t = time.perf_counter()
            raw = load_volume(case.image_path)
            vol = clip_and_normalize(raw)
            phases["load"] = time.perf_counter() - t

            t = time.perf_counter()
            coarse = predict_coarse(self.coarse_net, vol, self.cfg.coarse_shape, self.cfg.coarse_tta,
                                    self.cfg.coarse_cleanup_fraction)
            phases["coarse"] = time.perf_counter() - t

            t = time.perf_counter()
            try:
                fine = predict_fine(self.kidney_net, self.lesion_net, vol, coarse, self.cfg)
            except NoKidneyError:
                log.warning("%s: no kidney found by the coarse stage; emitting an empty mask", case.case_id)
                warnings.append("no_kidney_found")
                fine = LabelMask.empty_like(vol)
            phases["fine"] = time.perf_counter() - t

            t = time.perf_counter()
            final = filter_connected_components(fine, self.cfg.cc_min_voxels, self.cfg.connectivity)
            phases["postprocess"] = time.perf_counter() - t
        except Exception as exc:
            raise CaseError(f"{case.case_id}: {type(exc).__name__}: {exc}") from exc
        total = time.perf_counter() - t_start
        timing = {
            "case_id": case.case_id,
            "phases": phases,
            "total_s": total,
            "peak_mem_mb": torch.cuda.max_memory_allocated() / 2 ** 20 if cuda else None,
            "peak_rss_mb": _peak_rss_mb(),
            "warnings": warnings,
        }
        return LabelMask(final.labels, raw.spacing, raw.origin), timing


def run_pipeline(case: CaseRecord, cfg: PipelineConfig) -> Tuple[LabelMask, dict]:
    return CascadePipeline.from_config(cfg).run_case(case)
