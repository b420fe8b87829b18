"""Headline acceptance criteria; each test reports one PASS/FAIL line in the summary."""

import time

import numpy as np
import pytest

from bbfcn.errors import FormatError
from bbfcn.gradcheck import TOLERANCE, run_suite
from bbfcn.heatmaps import build_selection_mask, masked_mse_loss, render_ground_truth
from bbfcn.inference import InferenceConfig, detect_constrained, detect_unconstrained, nms
from bbfcn.nets import (NetworkConfig, backbone_forward, branch_forward, deserialize_weights,
                        init_weights, serialize_weights)
from bbfcn.synthetic import SyntheticConfig, generate_synthetic
from bbfcn.training import (FaceDataset, MiningState, TrainConfig, prepare_branch_pool, sample_batch,
                            train_step)
from oracles import BACKBONE_LISTING, BRANCH_LISTING, census, disc_oracle, nms_ref, random_boxes

pytestmark = pytest.mark.acceptance


def criterion(number, name):
    return pytest.mark.criterion(number, name)


@pytest.fixture(scope="module")
def small_dataset():
    scenes = [generate_synthetic(SyntheticConfig(seed=21), i) for i in range(20)]
    bgs = [generate_synthetic(SyntheticConfig(face_count=(0, 0), seed=22), i)[0] for i in range(20)]
    return FaceDataset.from_scenes(scenes, bgs)


@criterion(1, "gradient suite")
def test_gradient_suite(detail):
    t = time.perf_counter()
    worst = run_suite(20)
    elapsed = time.perf_counter() - t
    detail(" ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" time={elapsed:.1f}s")
    assert set(worst) == {"conv2d", "deconv2d", "maxpool2", "relu", "bilinear", "masked_mse_loss"}
    assert max(worst.values()) <= TOLERANCE
    assert elapsed <= 120


@criterion(2, "shapes and parameter census")
def test_shapes_and_census(detail):
    t = time.perf_counter()
    model = init_weights(NetworkConfig(), seed=0)
    rng = np.random.default_rng(0)
    a = backbone_forward(model, rng.uniform(size=(3, 32, 32)).astype(np.float32))
    b = backbone_forward(model, rng.uniform(size=(3, 64, 48)).astype(np.float32))
    c = branch_forward(model, 0, rng.uniform(size=(4, 24, 24)).astype(np.float32))
    counts = (model.backbone.param_count(), model.branches[0].param_count())
    elapsed = time.perf_counter() - t
    detail(f"backbone={counts[0]} branch={counts[1]} time={elapsed:.2f}s")
    assert (a.shape, b.shape, c.shape) == ((5, 32, 32), (5, 64, 48), (1, 24, 24))
    assert counts == (census(BACKBONE_LISTING), census(BRANCH_LISTING))
    assert all(n.param_count() == counts[1] for n in model.branches)
    assert elapsed <= 10


@criterion(3, "ground-truth disc size")
def test_disc_constant(detail):
    interior = render_ground_truth([[10, 10]], [True], (32, 32), 2).sum()
    corner = render_ground_truth([[0, 0]], [True], (32, 32), 2).sum()
    detail(f"interior={interior:.0f} corner={corner:.0f}")
    assert interior == 13
    assert corner == disc_oracle(0, 0, 2, 32, 32)


@criterion(4, "NMS equals exhaustive reference")
def test_nms_oracle(detail):
    mismatches = 0
    for seed in range(1000):
        rng = np.random.default_rng(10_000 + seed)
        boxes, scores = random_boxes(rng, int(rng.integers(0, 13)))
        mismatches += nms(boxes, scores) != nms_ref(boxes, scores)
    detail(f"mismatches={mismatches}/1000")
    assert mismatches == 0


@criterion(5, "selective loss contract")
def test_selective_loss(detail, small_dataset):
    rng = np.random.default_rng(0)
    gt = render_ground_truth([[9, 20]], [True], (32, 32), 2)[0]
    mask = build_selection_mask(gt, rng).mask
    pred = rng.uniform(-1, 1, size=gt.shape).astype(np.float32)
    _, grad = masked_mse_loss(pred[None, None], gt[None, None], mask[None, None])
    off_mask_zero = not grad[0, 0][~mask].any()

    bb = sample_batch(small_dataset, TrainConfig.backbone(), "backbone", 1)
    bb_split = (bb.n_pos, bb.n_neg)
    bb_pos = bb.gt.reshape(40, -1).sum(axis=1) > 0
    balanced = all((m & (g > 0)).sum() == (m & (g <= 0)).sum()
                   for g, m in zip(bb.gt[:20].reshape(-1, 32, 32), bb.masks[:20].reshape(-1, 32, 32))
                   if g.any())

    pool = prepare_branch_pool(small_dataset, init_weights(NetworkConfig(), std="he"), TrainConfig.branch())
    br = sample_batch(pool, TrainConfig.branch(), "branch", 1)
    br_split = (br.n_pos, br.n_neg)
    br_pos = br.gt.reshape(5, 40, -1).sum(axis=2) > 0
    detail(f"off-mask grad zero={off_mask_zero} backbone={bb_split} branch={br_split} balanced={balanced}")
    assert off_mask_zero and balanced
    assert bb_split == (20, 20) and bb_pos[:20].all() and not bb_pos[20:].any()
    assert br_split == (32, 8) and br_pos[:, :32].all() and not br_pos[:, 32:].any()


@criterion(6, "overfit one batch")
def test_overfit_one_batch(detail, small_dataset):
    config = TrainConfig.backbone(batch_size=10)
    model = init_weights(NetworkConfig(), seed=0, std="he")
    batch = sample_batch(small_dataset, config, "backbone", 0)
    t = time.perf_counter()
    losses = [train_step(model, batch, config, MiningState(), lr=1e-3)[1] for _ in range(200)]
    elapsed = time.perf_counter() - t
    drop = 1 - losses[-1] / losses[0]
    detail(f"loss {losses[0]:.3f} -> {losses[-1]:.3f} ({drop:.0%} lower) time={elapsed:.1f}s")
    assert drop >= 0.5
    assert elapsed <= 60


@criterion(7, "synthetic end-to-end")
def test_synthetic_end_to_end(detail, experiment):
    result, elapsed = experiment
    detail(f"A full={result.constrained_full:.2f}% backbone={result.constrained_coarse:.2f}% "
           f"recall@10% full={result.recall_full:.4f} backbone={result.recall_coarse:.4f} "
           f"time={elapsed / 60:.1f}min")
    assert len(result.backbone_losses) == 2000 and len(result.branch_losses) == 2000
    assert result.constrained_full <= 15.0
    assert result.constrained_full < result.constrained_coarse
    assert result.recall_full >= result.recall_coarse
    assert elapsed <= 30 * 60


@criterion(8, "determinism")
def test_determinism(detail, experiment, experiment_repeat):
    (a, _), (b, _) = experiment, experiment_repeat
    same_weights = a.weights == b.weights
    same_report = a.report == b.report
    detail(f"weights identical={same_weights} reports identical={same_report}")
    assert same_weights and same_report


@criterion(9, "weight serialization")
def test_serialization(detail):
    model = init_weights(NetworkConfig(), seed=4, std="he")
    blob = serialize_weights(model)
    exact = serialize_weights(deserialize_weights(blob)) == blob
    rejected = 0
    for bad in (b"NOTBBF" + blob[6:], blob[:5], blob[:200], blob[:-1]):
        try:
            deserialize_weights(bad)
        except FormatError:
            rejected += 1
    detail(f"round trip exact={exact} rejected={rejected}/4")
    assert exact and rejected == 4


@criterion(10, "performance budget")
def test_performance(detail, experiment):
    model = experiment[0].model
    faces = [generate_synthetic(SyntheticConfig(seed=31), i)[0] for i in range(20)]
    detect_constrained(faces[0], model)
    t = time.perf_counter()
    for face in faces:
        detect_constrained(face, model)
    per_face = (time.perf_counter() - t) / len(faces)

    scene_cfg = SyntheticConfig(canvas=(480, 640), face_count=(2, 4), face_scale=(60, 140), seed=32)
    image, _ = generate_synthetic(scene_cfg, 0)
    t = time.perf_counter()
    detect_unconstrained(image, model, config=InferenceConfig(theta=0.5, levels=7))
    pyramid = time.perf_counter() - t
    detail(f"constrained={per_face * 1000:.1f}ms/face pyramid(7 levels, 640x480)={pyramid:.2f}s")
    assert per_face <= 0.100
    assert pyramid <= 3.0
