import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbfcn import heatmaps as hm
from bbfcn.errors import ContractError
from oracles import disc_oracle


def test_radii_from_widths():
    spec = hm.GroundTruthSpec.from_widths()
    assert (spec.radius_coarse, spec.radius_fine) == (2, 2)


def test_interior_disc_has_thirteen_pixels():
    gt = hm.render_ground_truth([[10, 10]], [True], (32, 32), 2)
    assert gt.sum() == 13
    assert gt.dtype == np.float32 and set(np.unique(gt)) == {0.0, 1.0}


def test_corner_disc_is_clipped():
    gt = hm.render_ground_truth([[0, 0]], [True], (32, 32), 2)
    assert gt.sum() == 6 == disc_oracle(0, 0, 2, 32, 32)


@given(st.floats(-4, 20), st.floats(-4, 20), st.integers(0, 4))
@settings(max_examples=80, deadline=None)
def test_disc_matches_enumeration(cx, cy, r):
    gt = hm.render_ground_truth([[cx, cy]], [True], (16, 16), r)
    assert gt.sum() == disc_oracle(cx, cy, r, 16, 16)


def test_invisible_landmark_is_empty():
    gt = hm.render_ground_truth([[5, 5], [9, 9]], [True, False], (16, 16), 2)
    assert gt[0].sum() == 13 and gt[1].sum() == 0


def test_decode_disc_centroid():
    gt = hm.render_ground_truth([[10, 10]], [True], (32, 32), 2)[0]
    assert hm.decode_top_n_average(gt, 13) == (10.0, 10.0)


def test_decode_single_peak():
    m = np.zeros((16, 16))
    m[7, 5] = 0.9
    assert hm.decode_top_n_average(m, 1) == (5.0, 7.0)


def test_decode_uniform_uses_row_major_ties():
    assert hm.decode_top_n_average(np.ones((32, 32)), 13) == (6.0, 0.0)


def test_decode_rejects_large_n():
    with pytest.raises(ContractError):
        hm.decode_top_n_average(np.ones((3, 3)), 10)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_decode_invariant_under_monotone_transform(seed):
    m = np.random.default_rng(seed).uniform(size=(12, 12))
    assert hm.decode_top_n_average(m, 13) == hm.decode_top_n_average(np.exp(3 * m) - 7, 13)


# ---------------------------------------------------------------- selection masks


def test_mask_balance_thirteen():
    gt = hm.render_ground_truth([[10, 10]], [True], (32, 32), 2)[0]
    sel = hm.build_selection_mask(gt, 0)
    assert (sel.n_pos, sel.n_neg) == (13, 13)
    assert sel.mask.sum() == 26
    assert sel.mask[gt > 0].all()


@pytest.mark.parametrize("size,count", [((32, 32), 11), ((24, 24), 6)])
def test_negative_only_count(size, count):
    sel = hm.build_selection_mask(np.zeros(size), 0, 0.01)
    assert sel.n_pos == 0 and sel.mask.sum() == count


def test_mining_selects_top_predicted_negatives():
    rng = np.random.default_rng(0)
    gt = hm.render_ground_truth([[8, 8]], [True], (20, 20), 2)[0]
    pred = rng.permutation(400).reshape(20, 20).astype(float)
    sel = hm.build_selection_mask(gt, 0, mining=pred)
    negs = sorted(((pred[y, x], y, x) for y in range(20) for x in range(20) if gt[y, x] == 0), reverse=True)
    expected = {(y, x) for _, y, x in negs[:13]}
    chosen = {(int(y), int(x)) for y, x in zip(*np.nonzero(sel.mask & (gt == 0)))}
    assert chosen == expected


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=1000, deadline=None)
def test_mask_balance_random_configurations(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 4))
    pts = rng.uniform(-3, 27, size=(k, 2))
    gt = hm.render_ground_truth(pts, np.ones(k, bool), (24, 24), 2).max(axis=0) if k else np.zeros((24, 24))
    sel = hm.build_selection_mask(gt, rng)
    n_pos = int((gt > 0).sum())
    assert sel.n_pos == n_pos
    assert int((sel.mask & (gt > 0)).sum()) == n_pos
    n_neg = int((sel.mask & (gt == 0)).sum())
    assert n_neg == (n_pos if n_pos else 6)


def test_mask_same_seed_same_mask():
    gt = hm.render_ground_truth([[4, 12]], [True], (24, 24), 2)[0]
    a = hm.build_selection_mask(gt, 11).mask
    b = hm.build_selection_mask(gt, 11).mask
    assert (a == b).all()


# ---------------------------------------------------------------- loss


def test_loss_examples():
    gt = np.zeros((1, 1, 2, 2))
    mask = np.array([[[[True, True], [False, False]]]])
    pred = np.full((1, 1, 2, 2), 0.5)
    loss, grad = hm.masked_mse_loss(pred, gt, mask)
    assert loss == pytest.approx(0.5)
    np.testing.assert_allclose(grad[0, 0], [[1.0, 1.0], [0, 0]])
    assert hm.masked_mse_loss(gt, gt, mask)[0] == 0.0


def test_loss_averages_over_batch():
    gt = np.zeros((4, 1, 3, 3))
    mask = np.zeros(gt.shape, bool)
    mask[:, :, 1, 1] = True
    loss, grad = hm.masked_mse_loss(np.ones_like(gt), gt, mask)
    assert loss == pytest.approx(1.0)
    assert grad[0, 0, 1, 1] == pytest.approx(0.5)


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        hm.masked_mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 2), bool))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_loss_non_negative_and_zero_off_mask(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.uniform(size=(2, 3, 6, 6)) < 0.3).astype(np.float32)
    mask = rng.uniform(size=gt.shape) < 0.5
    pred = rng.standard_normal(gt.shape).astype(np.float32)
    loss, grad = hm.masked_mse_loss(pred, gt, mask)
    assert loss >= 0
    assert not grad[~mask].any()
    pred2 = pred.copy()
    pred2[mask] = gt[mask]
    assert hm.masked_mse_loss(pred2, gt, mask)[0] == 0.0


def test_heatmap_to_gray_clamps():
    out = hm.heatmap_to_gray(np.array([[-1.0, 0.5, 2.0]]))
    assert out.dtype == np.uint8 and out.tolist() == [[0, 128, 255]]
