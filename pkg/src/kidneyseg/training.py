"""Per-stage training loop: augmentation, mixup, Dice+CE with hard-voxel mining,
AdamW with cosine annealing, checkpointing and resume."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import CtVolume, LabelMask
from .evaluation import dice
from .losses import compound_loss, cosine_lr, mixup, one_hot
from .network import NetworkSpec, ResUNet, build_network, coarse_spec, fine_spec
from .preprocessing import (COARSE_SHAPE, FINE_DEPTH, FINE_INPLANE, AugmentConfig, augment,
                            resample_array, sample_z_cube)

log = logging.getLogger(__name__)

STAGES = ("coarse", "fine_kidney", "fine_lesion")
CKPT_FORMAT = "kidneyseg-checkpoint/1"

# lesion network channels: 0 other kidney tissue, 1 cyst, 2 tumor
LESION_TARGET_OF_LABEL = np.array([0, 0, 2, 1], dtype=np.int64)
LABEL_OF_LESION_CLASS = np.array([1, 3, 2], dtype=np.uint8)


@dataclass
class StageConfig:
    stage: str = "coarse"
    patch_size: Tuple[int, int, int] = COARSE_SHAPE
    batch_size: int = 4
    total_epochs: int = 300
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    dice_class_weights: Optional[List[float]] = None
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    ohem_fraction: float = 0.3
    foreground_prob: float = 0.9
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    base_channels: int = 32
    mixed_precision: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ValueError("batch_size and total_epochs must be >= 1")
        if not 0 < self.ohem_fraction <= 1:
            raise ValueError("ohem_fraction must lie in (0, 1]")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "StageConfig":
        if stage == "coarse":
            base = dict(stage=stage, patch_size=COARSE_SHAPE, total_epochs=300)
        else:
            base = dict(stage=stage, patch_size=(FINE_DEPTH, *FINE_INPLANE), total_epochs=600)
        base.update(overrides)
        return cls(**base)

    @property
    def num_classes(self) -> int:
        return 3 if self.stage == "fine_lesion" else 2

    def network_spec(self) -> NetworkSpec:
        if self.stage == "coarse":
            return coarse_spec(self.base_channels, self.num_classes)
        return fine_spec(self.num_classes, self.base_channels)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["augment"] = self.augment.to_dict()
        d["patch_size"] = list(self.patch_size)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown StageConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainCase:
    """One preprocessed case: normalized image and {0..3} labels on the stage grid."""

    case_id: str
    image: np.ndarray
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def from_npz(cls, path) -> "TrainCase":
        with np.load(path) as z:
            return cls(Path(path).stem, z["image"].astype(np.float32), z["labels"].astype(np.uint8),
                       tuple(float(s) for s in z["spacing"]))


def stage_targets(stage: str, labels: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Class indices for ``stage`` plus the voxel mask the loss is restricted to."""
    if stage == "fine_lesion":
        return LESION_TARGET_OF_LABEL[labels], (labels > 0)
    return (labels > 0).astype(np.int64), None


def _fit_to_patch(img, lab, stage, patch):
    if stage == "coarse":
        target = patch
    else:
        target = (img.shape[0],) + tuple(patch[1:])
    if img.shape != tuple(target):
        img = resample_array(img, target, "trilinear")
        lab = resample_array(lab, target, "nearest")
    return img, lab


def draw_sample(case: TrainCase, cfg: StageConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    img, lab = _fit_to_patch(case.image, case.labels, cfg.stage, cfg.patch_size)
    vol, mask = CtVolume(img, case.spacing, normalized=True), LabelMask(lab, case.spacing)
    if cfg.stage != "coarse":
        vol, mask = sample_z_cube(vol, mask, cfg.patch_size[0], rng, cfg.foreground_prob)
    vol, mask = augment((vol, mask), cfg.augment, rng)
    return vol.voxels, mask.labels


def _device() -> torch.device:
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, net: ResUNet, optimizer=None, **state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "spec": net.spec.to_dict(),
        "model": {k: v.detach().cpu() for k, v in net.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **state,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, map_location="cpu") -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a {CKPT_FORMAT} file")
    return payload


def load_network(path, device=None) -> Tuple[ResUNet, dict]:
    payload = load_checkpoint(path)
    net = ResUNet(NetworkSpec.from_dict(payload["spec"]))
    net.load_state_dict(payload["model"])
    net.to(device or _device()).eval()
    return net, payload


# ----------------------------------------------------------------------- loop

def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n_cases: int, batch_size: int) -> int:
    return math.ceil(n_cases / batch_size)


@torch.no_grad()
def validation_dice(net: ResUNet, cases: Sequence[TrainCase], cfg: StageConfig) -> float:
    """Mean foreground Dice of argmax predictions on centred patches."""
    device = next(net.parameters()).device
    net.eval()
    scores = []
    for case in cases:
        img, lab = _fit_to_patch(case.image, case.labels, cfg.stage, cfg.patch_size)
        if cfg.stage != "coarse":
            depth = cfg.patch_size[0]
            z0 = max((img.shape[0] - depth) // 2, 0)
            img = img[z0:z0 + depth]
            lab = lab[z0:z0 + depth]
            pad = depth - img.shape[0]
            if pad > 0:
                before = pad // 2
                img = np.pad(img, ((before, pad - before), (0, 0), (0, 0)), constant_values=-1.0)
                lab = np.pad(lab, ((before, pad - before), (0, 0), (0, 0)))
        x = torch.from_numpy(np.ascontiguousarray(img))[None, None].to(device)
        pred = net(x).argmax(1)[0].cpu().numpy()
        target, valid = stage_targets(cfg.stage, lab)
        if valid is not None:
            pred = np.where(valid, pred, 0)
            target = np.where(valid, target, 0)
        per_class = [dice(pred == c, target == c) for c in range(1, cfg.num_classes)]
        scores.append(float(np.mean(per_class)))
    net.train()
    return float(np.mean(scores)) if scores else float("nan")


def train_stage(cfg: StageConfig, train_cases: Sequence[TrainCase], val_cases: Sequence[TrainCase],
                out_dir, resume: bool = True, device=None) -> Path:
    """Train one cascade stage; returns the path of the best checkpoint.

    Checkpoints and the JSON-lines log live in ``<out_dir>/stage_<name>/``.
    With ``resume`` an existing ``ckpt_latest.bin`` is picked up and training
    continues from the next epoch with the restored optimizer and RNG state.
    """
    if not train_cases:
        raise ValueError("empty training set")
    device = torch.device(device) if device is not None else _device()
    stage_dir = Path(out_dir) / f"stage_{cfg.stage}"
    stage_dir.mkdir(parents=True, exist_ok=True)
    latest, best = stage_dir / "ckpt_latest.bin", stage_dir / "ckpt_best.bin"
    log_path = stage_dir / "train_log.jsonl"

    net = build_network(cfg.network_spec(), cfg.seed).to(device)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    start_epoch, step, best_score = 0, 0, -math.inf

    if resume and latest.is_file():
        state = load_checkpoint(latest, map_location=device)
        net.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng_state"]
        start_epoch, step, best_score = state["epoch"], state["step"], state["best_score"]
        log.info("resuming %s at epoch %d (step %d)", cfg.stage, start_epoch, step)
    elif log_path.exists():
        log_path.unlink()

    n_steps = steps_per_epoch(len(train_cases), cfg.batch_size)
    total_steps = cfg.total_epochs * n_steps
    use_amp = cfg.mixed_precision and device.type == "cuda"
    scaler = torch.cuda.amp.GradScaler(enabled=use_amp) if use_amp else None
    net.train()

    with open(log_path, "a") as log_file:
        for epoch in range(start_epoch, cfg.total_epochs):
            epoch_losses = []
            for batch_idx in _batches(len(train_cases), cfg.batch_size, rng):
                batch = [train_cases[i] for i in batch_idx]
                samples = [draw_sample(c, cfg, rng) for c in batch]
                x = torch.from_numpy(np.stack([s[0] for s in samples])[:, None]).to(device)
                targets = [stage_targets(cfg.stage, s[1]) for s in samples]
                y = torch.from_numpy(np.stack([t[0] for t in targets])).to(device)
                onehot = one_hot(y, cfg.num_classes)
                valid = None
                if targets[0][1] is not None:
                    valid = torch.from_numpy(np.stack([t[1] for t in targets])).float().to(device)

                do_mix = cfg.mixup_alpha > 0 and len(batch) > 1 and rng.random() < cfg.mixup_prob
                if do_mix:
                    extra = (valid,) if valid is not None else ()
                    mixed = mixup(x, onehot, cfg.mixup_alpha, rng, extra=extra)
                    x, onehot = mixed[0], mixed[1]
                    if valid is not None:
                        valid = mixed[2]

                lr = cosine_lr(step, total_steps, cfg.lr)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad(set_to_none=True)
                with torch.autocast(device.type, dtype=torch.float16, enabled=use_amp):
                    logits = net(x)
                loss = compound_loss(logits.float(), onehot, cfg.dice_class_weights, cfg.ohem_fraction, valid)
                if not torch.isfinite(loss):
                    dump = stage_dir / "nonfinite_batch.json"
                    dump.write_text(json.dumps({"epoch": epoch, "step": step,
                                                "cases": [c.case_id for c in batch]}))
                    raise FloatingPointError(
                        f"non-finite loss at step {step} for cases {[c.case_id for c in batch]}; see {dump}")
                if scaler is not None:
                    scaler.scale(loss).backward()
                    scaler.step(opt)
                    scaler.update()
                else:
                    loss.backward()
                    opt.step()
                value = float(loss.detach())
                epoch_losses.append(value)
                log_file.write(json.dumps({"epoch": epoch, "step": step, "loss": value, "lr": lr}) + "\n")
                step += 1

            score = validation_dice(net, val_cases, cfg) if val_cases else -float(np.mean(epoch_losses))
            record = {"event": "epoch", "epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
            if val_cases:
                record["val_dice"] = score
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

            state = dict(stage=cfg.stage, config=cfg.to_dict(), epoch=epoch + 1, step=step,
                         rng_state=rng.bit_generator.state, best_score=max(best_score, score))
            if score > best_score or not best.exists():
                best_score = score
                save_checkpoint(best, net, opt, **{**state, "best_score": best_score})
            save_checkpoint(latest, net, opt, **state)
    return best


def read_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
