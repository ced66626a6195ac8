"""Segmentation losses, mixup, hard-voxel mining and the LR schedule."""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


def default_dice_weights(num_classes: int) -> torch.Tensor:
    """Zero weight on background, uniform over the foreground classes."""
    w = torch.ones(num_classes, dtype=torch.float64)
    w[0] = 0.0
    return w / w.sum()


def _normalized_weights(weights, num_classes, like: torch.Tensor) -> torch.Tensor:
    if weights is None:
        w = default_dice_weights(num_classes)
    else:
        w = torch.as_tensor(weights, dtype=torch.float64)
        if w.numel() != num_classes or (w < 0).any() or w.sum() <= 0:
            raise ValueError(f"need {num_classes} non-negative dice weights with positive sum, got {weights}")
        w = w / w.sum()
    return w.to(device=like.device, dtype=like.dtype)


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, *spatial) integer labels -> (B, C, *spatial) one-hot."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    oh = F.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1).to(dtype)


def dice_loss(probs: torch.Tensor, target_onehot: torch.Tensor, weights=None,
              mask: Optional[torch.Tensor] = None, eps: float = DICE_EPS) -> torch.Tensor:
    """Weighted soft Dice loss, pooled over batch and space per class.

    ``probs`` and ``target_onehot`` are ``(B, C, *spatial)``; ``mask`` is an
    optional ``(B, *spatial)`` voxel weight restricting where Dice is measured.
    """
    if probs.shape != target_onehot.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target_onehot.shape)}")
    if mask is not None:
        m = mask.unsqueeze(1).to(probs.dtype)
        probs = probs * m
        target_onehot = target_onehot * m
    dims = [0] + list(range(2, probs.ndim))
    inter = (probs * target_onehot).sum(dims)
    denom = probs.sum(dims) + target_onehot.sum(dims)
    per_class = (2 * inter + eps) / (denom + eps)
    w = _normalized_weights(weights, probs.shape[1], probs)
    return 1 - (w * per_class).sum()


def per_voxel_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-voxel CE for integer labels ``(B, *S)`` or soft targets ``(B, C, *S)``."""
    if target.dtype.is_floating_point:
        if target.shape != logits.shape:
            raise ValueError("soft targets must have the same shape as the logits")
        return -(target * F.log_softmax(logits, dim=1)).sum(1)
    c = logits.shape[1]
    if target.numel() and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"target labels must lie in [0, {c})")
    return F.cross_entropy(logits, target.long(), reduction="none")


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor,
                       voxel_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    ce = per_voxel_cross_entropy(logits, target)
    if voxel_weights is None:
        return ce.mean()
    w = voxel_weights.to(ce.dtype)
    return (ce * w).sum() / w.sum().clamp_min(torch.finfo(ce.dtype).tiny)


def ohem_voxel_weights(per_voxel_ce: torch.Tensor, keep_fraction: float,
                       valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary weights selecting the ``ceil(keep_fraction * N)`` hardest voxels.

    Ties are resolved in favour of the lower flat index. ``valid`` (optional)
    excludes voxels from both the count ``N`` and the selection.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    flat = per_voxel_ce.detach().reshape(-1)
    if valid is None:
        candidates = torch.arange(flat.numel(), device=flat.device)
    else:
        candidates = torch.nonzero(valid.reshape(-1) > 0, as_tuple=True)[0]
    n = candidates.numel()
    weights = torch.zeros_like(flat)
    if n == 0:
        return weights.reshape(per_voxel_ce.shape)
    k = max(1, math.ceil(keep_fraction * n - 1e-9))
    order = torch.sort(flat[candidates], descending=True, stable=True).indices
    weights[candidates[order[:k]]] = 1.0
    return weights.reshape(per_voxel_ce.shape)


def compound_loss(logits: torch.Tensor, target: torch.Tensor, dice_weights=None,
                  ohem_fraction: float = 1.0, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Weighted soft Dice plus (hard-voxel mined) cross-entropy.

    ``target`` may be integer labels or a soft one-hot (e.g. after mixup).
    """
    c = logits.shape[1]
    onehot = target if target.dtype.is_floating_point else one_hot(target, c, logits.dtype)
    probs = torch.softmax(logits, dim=1)
    d = dice_loss(probs, onehot, dice_weights, mask)
    ce = per_voxel_cross_entropy(logits, onehot)
    w = ohem_voxel_weights(ce, ohem_fraction, mask) if ohem_fraction < 1 else None
    if mask is not None:
        m = mask.to(ce.dtype)
        w = m if w is None else w * m
    return d + cross_entropy_loss(logits, onehot, w)


def mixup(images: torch.Tensor, targets: torch.Tensor, alpha: float, rng: np.random.Generator,
          lam: Optional[float] = None, extra: Sequence[torch.Tensor] = ()) -> Tuple:
    """Blend a batch with a random permutation of itself.

    Returns ``(images, targets, *extra, lam, perm)``; ``extra`` tensors (e.g.
    loss masks) are blended with the same coefficient.
    """
    b = images.shape[0]
    if b < 2:
        return (images, targets, *extra, 1.0, np.arange(b))
    if lam is None:
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(b)
    idx = torch.as_tensor(perm, device=images.device)

    def blend(t):
        t = t.to(images.dtype) if not t.dtype.is_floating_point else t
        return lam * t + (1 - lam) * t[idx]

    return (blend(images), blend(targets), *(blend(e) for e in extra), lam, perm)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2
