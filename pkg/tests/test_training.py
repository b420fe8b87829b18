import math

import numpy as np
import pytest

from bbfcn.errors import ContractError, DataError, DivergenceError
from bbfcn.nets import NetworkConfig, init_weights, serialize_weights
from bbfcn.synthetic import SyntheticConfig, generate_synthetic
from bbfcn.training import (FaceDataset, MiningState, TrainConfig, TrainState, compute_gradients,
                            lr_at, prepare_branch_pool, run_training, sample_batch, train_step,
                            update_mining)


@pytest.fixture(scope="module")
def dataset():
    scenes = [generate_synthetic(SyntheticConfig(seed=11), i) for i in range(12)]
    bgs = [generate_synthetic(SyntheticConfig(face_count=(0, 0), seed=12), i)[0] for i in range(12)]
    return FaceDataset.from_scenes(scenes, bgs)


@pytest.fixture(scope="module")
def pool(dataset):
    model = init_weights(NetworkConfig(), seed=0, std="he")
    return prepare_branch_pool(dataset, model, TrainConfig.branch())


def test_config_split_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=40, pos_fraction=0.33)
    with pytest.raises(ContractError):
        TrainConfig(schedule=((10, 0.0),))
    assert (TrainConfig.backbone().n_pos, TrainConfig.backbone().n_neg) == (20, 20)
    assert (TrainConfig.branch().n_pos, TrainConfig.branch().n_neg) == (32, 8)


def test_published_defaults():
    c = TrainConfig.backbone()
    assert (c.batch_size, c.momentum, c.weight_decay, c.iterations) == (40, 0.9, 0.0005, 25_000)
    assert lr_at(c, 0) == lr_at(c, 24_999) == 0.001
    b = TrainConfig.branch()
    assert b.iterations == 50_000
    assert lr_at(b, 29_999) == 1e-4 and lr_at(b, 30_000) == 1e-5 and lr_at(b, 49_999) == 1e-5


def test_mining_state_machine():
    s = MiningState()
    for loss in (1.0, 0.9, 0.8):
        s = update_mining(s, loss, 2)
    assert not s.hard
    s = MiningState()
    for loss in (1.0, 1.0):
        s = update_mining(s, loss, 2)
    assert not s.hard
    s = update_mining(s, 1.0, 2)
    assert s.hard and s.mode == "hard-negatives"
    s = update_mining(s, 0.1, 2)
    assert s.hard and s.since_improvement == 0


# ---------------------------------------------------------------- batches


def test_backbone_batch_split(dataset):
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 3)
    assert batch.inputs.shape == (40, 3, 32, 32) and batch.gt.shape == (40, 5, 32, 32)
    per_sample = batch.gt.reshape(40, -1).sum(axis=1)
    assert (per_sample[:20] > 0).all() and not per_sample[20:].any()
    assert (batch.n_pos, batch.n_neg) == (20, 20)


def test_branch_batch_split(pool):
    batch = sample_batch(pool, TrainConfig.branch(), "branch", 3)
    assert batch.inputs.shape == (5, 40, 4, 24, 24) and batch.gt.shape == (5, 40, 1, 24, 24)
    per_sample = batch.gt.reshape(5, 40, -1).sum(axis=2)
    assert (per_sample[:, :32] > 0).all() and not per_sample[:, 32:].any()
    # negative patches select ceil(0.01 * 576) = 6 locations
    assert (batch.masks[:, 32:].reshape(5, 8, -1).sum(axis=2) == 6).all()


def test_batch_masks_are_balanced(dataset):
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 4)
    for i in range(20):
        for k in range(5):
            gt, m = batch.gt[i, k] > 0, batch.masks[i, k]
            if gt.any():
                assert (m & gt).sum() == gt.sum() == (m & ~gt).sum()


def test_same_seed_same_batch(dataset):
    a = sample_batch(dataset, TrainConfig.backbone(), "backbone", [1, 2])
    b = sample_batch(dataset, TrainConfig.backbone(), "backbone", [1, 2])
    assert a.inputs.tobytes() == b.inputs.tobytes() and (a.masks == b.masks).all()


def test_empty_pool_is_data_error(dataset):
    empty = FaceDataset(dataset.images, dataset.faces, dataset.face_index, [])
    with pytest.raises(DataError):
        sample_batch(empty, TrainConfig.backbone(), "backbone", 0)


# ---------------------------------------------------------------- steps


def test_zero_lr_keeps_weights(dataset):
    model = init_weights(NetworkConfig(), seed=0)
    before = serialize_weights(model)
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 0)
    losses = [train_step(model, batch, TrainConfig.backbone(), MiningState(), lr=0.0)[1] for _ in range(2)]
    assert losses[0] == losses[1]
    assert serialize_weights(model) == before


def test_initial_loss_per_selected_location(dataset):
    # near-zero predictions on {0, 1} targets with balanced masks: half the selected
    # locations cost 1, half cost 0
    model = init_weights(NetworkConfig(), seed=0)
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 0)
    pos_only = batch.masks[:20]
    loss, *_ = compute_gradients(model.backbone, batch.inputs[:20], batch.gt[:20], pos_only)
    per_location = loss * 20 / pos_only.sum()
    assert abs(per_location - 0.5) <= 0.1


def test_gradient_ignores_unselected_gt(dataset):
    model = init_weights(NetworkConfig(), seed=1, std="he")
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 5)
    _, wa, ba, _ = compute_gradients(model.backbone, batch.inputs, batch.gt, batch.masks)
    gt = batch.gt.copy()
    rng = np.random.default_rng(0)
    off = ~batch.masks
    gt[off] = rng.uniform(-5, 5, size=int(off.sum()))
    _, wb, bb, _ = compute_gradients(model.backbone, batch.inputs, gt, batch.masks)
    for x, y in zip(wa + ba, wb + bb):
        assert x.tobytes() == y.tobytes()


def test_negative_only_batch_trains_toward_zero(dataset):
    model = init_weights(NetworkConfig(), seed=2, std="he")
    config = TrainConfig.backbone(pos_fraction=0.0, batch_size=8)
    batch = sample_batch(dataset, config, "backbone", 0)
    assert not batch.gt.any() and (batch.masks.reshape(8, 5, -1).sum(axis=2) == 11).all()
    losses = [train_step(model, batch, config, MiningState(), lr=1e-3)[1] for _ in range(15)]
    assert all(math.isfinite(v) for v in losses)
    assert losses[-1] < losses[0]


def test_divergence_guard(dataset):
    model = init_weights(NetworkConfig(), seed=0, std="he")
    model.backbone.weights[-1] *= 1e5
    batch = sample_batch(dataset, TrainConfig.backbone(), "backbone", 0)
    with pytest.raises(DivergenceError):
        train_step(model, batch, TrainConfig.backbone(), MiningState(), lr=1e-3)


def test_hard_mining_step_runs(pool):
    model = init_weights(NetworkConfig(), seed=0, std="he")
    batch = sample_batch(pool, TrainConfig.branch(), "branch", 0)
    _, loss = train_step(model, batch, TrainConfig.branch(), MiningState(hard=True), lr=1e-4)
    assert math.isfinite(loss)


# ---------------------------------------------------------------- loops and checkpoints


def short_config(phase, **kw):
    base = dict(iterations=6, schedule=((6, 1e-4),), validation_interval=2, mining_patience=1,
                checkpoint_interval=0, batch_size=10)
    base.update(kw)
    if phase == "backbone":
        return TrainConfig.backbone(**base)
    return TrainConfig.branch(**base)


@pytest.mark.parametrize("phase", ["backbone", "branch"])
def test_resume_is_bit_identical(tmp_path, dataset, pool, phase):
    source = dataset if phase == "backbone" else pool
    config = short_config(phase)
    straight = run_training(source, config, phase, init_weights(NetworkConfig(), seed=0, std="he"))
    run_training(source, config, phase, init_weights(NetworkConfig(), seed=0, std="he"),
                 checkpoint_dir=tmp_path, stop_at=3)
    state = TrainState.from_text((tmp_path / f"{phase}.state").read_text())
    assert state.iteration == 3
    resumed = run_training(source, config, phase, None, checkpoint_dir=tmp_path, resume=True)
    assert serialize_weights(resumed.model) == serialize_weights(straight.model)
    assert resumed.losses == straight.losses[3:]
    assert resumed.state.mining == straight.state.mining


def test_validation_drives_mining(dataset):
    result = run_training(dataset, short_config("backbone", iterations=8), "backbone",
                          init_weights(NetworkConfig(), seed=0))
    assert len(result.validation) == 4
    assert [it for it, _ in result.validation] == [2, 4, 6, 8]


def test_state_text_round_trip():
    s = TrainState(17, MiningState(0.1 + 0.2, 3, True), 9)
    back = TrainState.from_text(s.to_text())
    assert back == s
