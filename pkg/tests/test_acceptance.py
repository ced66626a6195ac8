"""Acceptance criteria, one test each; results are echoed in the terminal summary."""

import json
import math
import time

import nibabel as nib
import numpy as np
import pytest
import torch
from scipy import ndimage

from conftest import ACCEPTANCE
from kidneyseg.cli import main
from kidneyseg.data import CtVolume, load_mask, split_folds
from kidneyseg.evaluation import HECS, HEC_NAMES, dice, evaluate_dataset, hec_mask, index_masks, surface_dice
from kidneyseg.inference import check_probability_map, filter_connected_components, tta_zflip
from kidneyseg.losses import compound_loss
from kidneyseg.network import build_network, coarse_spec, fine_spec
from kidneyseg.phantom import make_phantom, write_phantom_dataset
from kidneyseg.preprocessing import AugmentConfig, clip_and_normalize
from kidneyseg.training import StageConfig, TrainCase, load_network, train_stage

from oracles import central_difference_grad, dice_by_sets, filter_by_bfs, surface_dice_exhaustive


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, f"{key}: {detail}"


def _random_mask(rng, shape):
    # blobby masks: thresholded smoothed noise with a random density
    field = ndimage.gaussian_filter(rng.normal(size=shape), rng.uniform(0.5, 2.0))
    return field > np.quantile(field, rng.uniform(0.5, 0.97))


def test_1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_dice = 0.0
    for i in range(1000):
        a, b = _random_mask(rng, (16,) * 3), _random_mask(rng, (16,) * 3)
        if i % 50 == 0:
            b = np.zeros_like(b)
        if i % 97 == 0:
            a = b.copy()
        worst_dice = max(worst_dice, abs(dice(a, b) - dice_by_sets(a, b)))
    worst_sd = 0.0
    for i in range(200):
        a, b = _random_mask(rng, (12,) * 3), _random_mask(rng, (12,) * 3)
        spacing = tuple(rng.uniform(0.5, 3.0, 3))
        tol = float(rng.uniform(0.0, 4.0))
        worst_sd = max(worst_sd, abs(surface_dice(a, b, spacing, tol)
                                     - surface_dice_exhaustive(a, b, spacing, tol)))
    elapsed = time.perf_counter() - t0
    record("1 metric oracle", worst_dice <= 1e-12 and worst_sd <= 1e-9 and elapsed < 120,
           f"max |dice err| {worst_dice:.1e}, max |surface dice err| {worst_sd:.1e}, {elapsed:.1f} s")


def test_2_connected_components():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for i in range(1000):
        fg = rng.random((32,) * 3) < rng.uniform(0.02, 0.35)
        labels = fg * rng.integers(1, 4, fg.shape, dtype=np.uint8)
        thr = int(rng.integers(0, 40))
        for conn in (6, 26):
            if not np.array_equal(filter_connected_components(labels, thr, conn),
                                  filter_by_bfs(labels, thr, conn)):
                mismatches += 1
    # strict threshold: components of t-1, t, t+1 voxels
    strict_ok = True
    for t in (5, 27, 100):
        labels = np.zeros((5, 1, 200), np.uint8)
        for row, size in zip((0, 2, 4), (t - 1, t, t + 1)):
            labels[row, 0, :size] = 1
        for conn in (6, 26):
            out = filter_connected_components(labels, t, conn)
            strict_ok &= [bool(out[r].any()) for r in (0, 2, 4)] == [False, False, True]
    elapsed = time.perf_counter() - t0
    record("2 connected components", mismatches == 0 and strict_ok and elapsed < 120,
           f"{mismatches} mismatches over 2000 comparisons, strict threshold {'ok' if strict_ok else 'broken'}, "
           f"{elapsed:.1f} s")


def test_3_loss_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    runs = 0
    for classes in (2, 4):
        for seed in range(10):
            g = torch.Generator().manual_seed(seed)
            shape = [(1, 2, 4, 4), (2, 3, 4, 6), (1, 4, 8, 8)][seed % 3]
            x = torch.randn(shape[0], classes, *shape[1:], generator=g, dtype=torch.float64)
            y = torch.randint(0, classes, shape, generator=g)
            frac = (1.0, 0.3)[seed % 2]
            x.requires_grad_(True)
            compound_loss(x, y, ohem_fraction=frac).backward()
            fd = central_difference_grad(
                lambda a: compound_loss(torch.from_numpy(a), y, ohem_fraction=frac).item(),
                x.detach().numpy().copy())
            err = np.linalg.norm(x.grad.numpy() - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, err)
            runs += 1
    elapsed = time.perf_counter() - t0
    record("3 loss gradients", worst < 1e-3 and elapsed < 60,
           f"max relative error {worst:.1e} over {runs} runs, {elapsed:.1f} s")


def test_4_normalization():
    hu = np.array([-200.0, 400.0, 100.0], np.float32)
    ends = clip_and_normalize(CtVolume(hu.reshape(1, 1, 3))).voxels.ravel().tolist()
    rng = np.random.default_rng(4)
    many = rng.uniform(-3000, 4000, 10**6).astype(np.float32).reshape(100, 100, 100)
    out = clip_and_normalize(CtVolume(many)).voxels
    ok = ends == [-1.0, 1.0, 0.0] and out.min() >= -1.0 and out.max() <= 1.0
    record("4 normalization", ok, f"endpoints {ends}, range [{out.min()}, {out.max()}] over 1e6 values")


def test_5_architecture():
    t0 = time.perf_counter()
    net = build_network(fine_spec(2, base_channels=4)).eval()
    z_ok = True
    with torch.no_grad():
        for depth in (16, 48, 96):
            logits, feats = net(torch.zeros(1, 1, depth, 224, 384), return_features=True)
            z_ok &= logits.shape == (1, 2, depth, 224, 384)
            z_ok &= all(f.shape[2] == depth for f in feats)
        coarse = build_network(coarse_spec(base_channels=4)).eval()
        coarse_ok = coarse(torch.zeros(1, 1, 128, 128, 128)).shape == (1, 2, 128, 128, 128)

    calls = []
    net.stem.register_forward_hook(lambda *a: calls.append(1))
    rejected = 0
    for bad in ((16, 223, 384), (16, 224, 381), (16, 100, 100)):
        try:
            net(torch.zeros(1, 1, *bad))
        except ValueError:
            rejected += 1
    elapsed = time.perf_counter() - t0
    ok = z_ok and coarse_ok and rejected == 3 and not calls and elapsed < 120
    record("5 architecture", ok, f"z preserved {z_ok}, coarse 128^3 ok {coarse_ok}, "
                                 f"{rejected}/3 bad shapes rejected before compute, {elapsed:.1f} s")


OVERFIT_STEPS = 80


@pytest.mark.slow
def test_6_overfit(tmp_path):
    t0 = time.perf_counter()
    shape = (48, 224, 384)
    vol, mask = make_phantom(shape, seed=0)
    case = TrainCase("phantom", clip_and_normalize(vol).voxels, mask.labels, vol.spacing)
    cfg = StageConfig.for_stage("fine_kidney", patch_size=shape, batch_size=1, total_epochs=OVERFIT_STEPS,
                                lr=1e-2, base_channels=8, mixup_alpha=0.0, augment=AugmentConfig.identity())
    train_stage(cfg, [case], [], tmp_path, resume=False)
    net, _ = load_network(tmp_path / "stage_fine_kidney" / "ckpt_latest.bin")
    with torch.no_grad():
        pred = net(torch.from_numpy(case.image)[None, None]).argmax(1)[0].numpy()
    score = dice(pred == 1, mask.labels > 0)
    elapsed = time.perf_counter() - t0
    record("6 overfit", score > 0.95 and elapsed < 90 * 60,
           f"train Dice {score:.4f} after {OVERFIT_STEPS} steps, {elapsed / 60:.1f} min CPU")


E2E_SHAPE = (24, 64, 96)
E2E_MIN_VOXELS = 200


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    raw = write_phantom_dataset(root / "raw", 3, shape=E2E_SHAPE, seed=10)
    assert main(["preprocess", "--data-root", str(raw), "--out", str(root / "prep"), "--folds", "3",
                 "--coarse-shape", "16,32,32", "--fine-inplane", "32,48"]) == 0
    common = ["--data", str(root / "prep"), "--out", str(root / "runs"), "--lr", "0.01",
              "--base-channels", "4", "--set", "augment.elastic_prob=0", "--set", "mixup_alpha=0"]
    for stage, patch, epochs in (("coarse", "[16,32,32]", 40), ("fine_kidney", "[8,32,48]", 40),
                                 ("fine_lesion", "[8,32,48]", 40)):
        assert main(["train", "--stage", stage, "--epochs", str(epochs), "--batch-size", "2",
                     "--set", f"patch_size={patch}"] + common) == 0
    stage_dir = root / "runs" / "fold_0"
    sets = {"coarse_checkpoint": str(stage_dir / "stage_coarse" / "ckpt_latest.bin"),
            "kidney_checkpoint": str(stage_dir / "stage_fine_kidney" / "ckpt_latest.bin"),
            "lesion_checkpoint": str(stage_dir / "stage_fine_lesion" / "ckpt_latest.bin"),
            "coarse_shape": [16, 32, 32], "fine_inplane": [32, 48], "cc_min_voxels": E2E_MIN_VOXELS,
            "fine_depth_chunk": 16, "chunk_overlap": 4}
    args = sum((["--set", f"{k}={json.dumps(v)}"] for k, v in sets.items()), [])
    for run in ("pred_a", "pred_b"):
        assert main(["infer", "--input", str(raw), "--output", str(root / run)] + args) == 0
    return root


def test_7_end_to_end(e2e, capsys):
    raw = e2e / "raw"
    geometry = repeat = components = True
    min_size, fg_total = math.inf, 0
    for case_dir in sorted(raw.iterdir()):
        src = nib.load(case_dir / "imaging.nii.gz")
        out_a = nib.load(e2e / "pred_a" / f"{case_dir.name}.nii.gz")
        out_b = nib.load(e2e / "pred_b" / f"{case_dir.name}.nii.gz")
        geometry &= out_a.shape == src.shape and np.array_equal(out_a.affine, src.affine)
        geometry &= np.array_equal(out_a.header.get_zooms(), src.header.get_zooms())
        a, b = np.asarray(out_a.dataobj), np.asarray(out_b.dataobj)
        repeat &= np.array_equal(a, b)
        comp, n = ndimage.label(a > 0, np.ones((3, 3, 3)))
        sizes = np.bincount(comp.ravel())[1:]
        fg_total += int(a.astype(bool).sum())
        if n:
            min_size = min(min_size, int(sizes.min()))
            components &= bool((sizes > E2E_MIN_VOXELS).all())

    capsys.readouterr()
    code = main(["evaluate", "--pred", str(raw), "--truth", str(raw), "--out", str(e2e / "self_eval")])
    printed = capsys.readouterr().out
    rows = [line.split() for line in printed.splitlines() if line.split() and line.split()[0] in HEC_NAMES]
    all_one = code == 0 and len(rows) == 3 and all(r[1:] == ["1.000", "1.000"] for r in rows)
    print(printed)
    ok = geometry and repeat and components and fg_total > 0 and all_one
    record("7 end-to-end", ok, f"geometry exact {geometry}, repeat identical {repeat}, "
                               f"smallest component {min_size} > {E2E_MIN_VOXELS}: {components}, "
                               f"foreground voxels {fg_total}, self-evaluation all 1.000: {all_one}")


def test_8_report_shape_and_nesting(e2e):
    report = evaluate_dataset(e2e / "pred_a", e2e / "raw")
    shape_ok = sorted(report.aggregate) == sorted(HEC_NAMES) and all(
        sorted(v) == ["dice", "surface_dice"] for v in report.aggregate.values())
    shape_ok &= all(sorted(m) == sorted(HEC_NAMES) for m in report.per_case.values())
    nested = True
    checked = 0
    for root in (e2e / "pred_a", e2e / "raw"):
        for path in index_masks(root).values():
            labels = load_mask(path).labels
            hec = {h.name: hec_mask(labels, h) for h in HECS}
            nested &= not np.any(hec["tumor"] & ~hec["masses"])
            nested &= not np.any(hec["masses"] & ~hec["kidney_and_masses"])
            checked += 1
    record("8 report shape and nesting", shape_ok and nested and checked == 6,
           f"3 HECs x (Dice, Surface Dice): {shape_ok}; nesting holds on {checked} masks: {nested}")


def test_9_tta_invariance():
    rng = np.random.default_rng(9)
    worst_eq, worst_sum = 0.0, 0.0
    for classes in (2, 3, 4):
        base = np.moveaxis(rng.dirichlet(np.ones(classes), size=(12, 20)), -1, 0)

        def predict(image, base=base):
            return np.repeat(base[:, None], image.shape[0], axis=1)

        image = rng.normal(size=(9, 12, 20)).astype(np.float32)
        out = tta_zflip(predict, image)
        worst_eq = max(worst_eq, float(np.abs(out - predict(image)).max()))
        worst_sum = max(worst_sum, float(np.abs(out.sum(0) - 1).max()))
        check_probability_map(out)
    record("9 TTA invariance", worst_eq <= 1e-6 and worst_sum <= 1e-5,
           f"max deviation {worst_eq:.1e}, max class-sum error {worst_sum:.1e}")


def test_10_folds():
    folds = split_folds([f"case_{i:05d}" for i in range(489)], k=5)
    sizes = sorted((len(v) for _, v in folds), reverse=True)
    disjoint = len(set().union(*(set(v) for _, v in folds))) == 489
    record("10 folds", sizes == [98, 98, 98, 98, 97] and disjoint, f"validation sizes {sizes}")
