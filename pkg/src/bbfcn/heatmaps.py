"""Ground-truth discs, top-n decoding, selection masks and the masked L2 loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class GroundTruthSpec:
    """Disc radii in pixels, derived from the input widths."""

    radius_coarse: int = 2
    radius_fine: int = 2

    @classmethod
    def from_widths(cls, coarse_width: int = 32, fine_width: int = 64,
                    coarse_frac: float = 0.05, fine_frac: float = 0.03) -> "GroundTruthSpec":
        return cls(max(1, round(coarse_width * coarse_frac)), max(1, round(fine_width * fine_frac)))


def disc_offsets(radius: float) -> np.ndarray:
    """Integer (dx, dy) offsets with dx^2 + dy^2 <= radius^2."""
    r = int(math.floor(radius))
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d)
    keep = dx * dx + dy * dy <= radius * radius
    return np.stack([dx[keep], dy[keep]], axis=1)


def render_ground_truth(points, visible, size, radius: float) -> np.ndarray:
    """K x H x W binary map with a filled disc around each visible point.

    ``points`` is K x 2 in (x, y) pixel coordinates of the map; fractional
    centres are allowed. Discs are clipped at the border.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    visible = np.asarray(visible, dtype=bool).reshape(-1)
    h, w = size
    out = np.zeros((len(points), h, w), dtype=np.float32)
    ys, xs = np.arange(h)[:, None], np.arange(w)[None, :]
    r2 = radius * radius
    for k, ((px, py), vis) in enumerate(zip(points, visible)):
        if not vis or not (np.isfinite(px) and np.isfinite(py)):
            continue
        # one-pixel slack so the distance test alone decides membership
        x0, x1 = max(0, math.ceil(px - radius) - 1), min(w - 1, math.floor(px + radius) + 1)
        y0, y1 = max(0, math.ceil(py - radius) - 1), min(h - 1, math.floor(py + radius) + 1)
        if x0 > x1 or y0 > y1:
            continue
        sub = (xs[:, x0 : x1 + 1] - px) ** 2 + (ys[y0 : y1 + 1] - py) ** 2 <= r2
        out[k, y0 : y1 + 1, x0 : x1 + 1][sub] = 1.0
    return out


def top_n_indices(channel: np.ndarray, n: int) -> np.ndarray:
    """Flat indices of the n largest values; ties resolve row-major."""
    flat = np.asarray(channel).reshape(-1)
    if not 1 <= n <= flat.size:
        raise ContractError(f"n={n} outside 1..{flat.size}")
    return np.argsort(-flat, kind="stable")[:n]


def decode_top_n_average(channel: np.ndarray, n: int = 13) -> tuple[float, float]:
    """Mean (x, y) of the n highest responses of a single-channel map."""
    channel = np.asarray(channel)
    if channel.ndim == 3:
        if channel.shape[0] != 1:
            raise ContractError(f"expected a single channel, got {channel.shape}")
        channel = channel[0]
    idx = top_n_indices(channel, n)
    ys, xs = np.divmod(idx, channel.shape[1])
    return float(xs.mean()), float(ys.mean())


def top_n_mean_value(channel: np.ndarray, n: int = 13) -> float:
    flat = np.asarray(channel).reshape(-1)
    return float(flat[top_n_indices(flat, n)].mean())


@dataclass
class SelectionMask:
    mask: np.ndarray  # bool, H x W
    n_pos: int
    n_neg: int


def build_selection_mask(gt_channel: np.ndarray, rng: np.random.Generator | int,
                         negative_only_fraction: float = 0.01,
                         mining: np.ndarray | None = None) -> SelectionMask:
    """Choose which locations of one channel contribute to the loss.

    All positives are kept. When positives exist an equal number of
    negatives is added: uniformly at random, or the highest-scoring ones of
    ``mining`` (a predicted channel) when given. A map without positives gets
    ``ceil(fraction * H * W)`` random negatives.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    gt = np.asarray(gt_channel)
    flat = gt.reshape(-1)
    pos = np.flatnonzero(flat > 0.5)
    neg = np.flatnonzero(flat <= 0.5)
    sel = np.zeros(flat.size, dtype=bool)
    sel[pos] = True
    if pos.size:
        count = min(pos.size, neg.size)
        if mining is not None:
            scores = np.asarray(mining).reshape(-1)[neg]
            chosen = neg[np.argsort(-scores, kind="stable")[:count]]
        else:
            chosen = rng.choice(neg, size=count, replace=False)
    else:
        count = min(neg.size, math.ceil(negative_only_fraction * flat.size))
        chosen = rng.choice(neg, size=count, replace=False)
    sel[chosen] = True
    return SelectionMask(sel.reshape(gt.shape), int(pos.size), int(count))


def build_batch_masks(gt: np.ndarray, rng: np.random.Generator,
                      negative_only_fraction: float = 0.01,
                      predicted: np.ndarray | None = None) -> np.ndarray:
    """Selection masks for an N x K x H x W ground-truth batch."""
    masks = np.zeros(gt.shape, dtype=bool)
    for i in range(gt.shape[0]):
        for k in range(gt.shape[1]):
            mining = None if predicted is None else predicted[i, k]
            masks[i, k] = build_selection_mask(gt[i, k], rng, negative_only_fraction, mining).mask
    return masks


def masked_mse_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Selected-location squared error, summed per sample and averaged over the batch.

    Returns ``(loss, grad)`` where grad is zero at every unselected location.
    """
    if not (pred.shape == gt.shape == mask.shape):
        raise ContractError(f"loss shape mismatch {pred.shape} / {gt.shape} / {mask.shape}")
    n = pred.shape[0] if pred.ndim == 4 else 1
    diff = np.where(mask, pred - gt, 0).astype(pred.dtype, copy=False)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def heatmap_to_gray(channel: np.ndarray) -> np.ndarray:
    """uint8 image of a single channel, values clamped to [0, 1]."""
    return np.round(np.clip(channel, 0.0, 1.0) * 255.0).astype(np.uint8)
