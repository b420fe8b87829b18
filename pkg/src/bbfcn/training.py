"""Batch assembly, selective loss wiring, mining schedule and training loops."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import heatmaps as hm
from .errors import ContractError, DataError, DivergenceError
from .imageio import AnnotatedFace, crop_region
from .nets import Model, Net, load_model, save_model
from .numeric import bilinear_resize

log = logging.getLogger(__name__)

PHASES = ("backbone", "branch")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 40
    pos_fraction: float = 0.5  # 1:1 for the backbone; 0.8 (4:1) for branches
    iterations: int = 25_000
    # piecewise-constant schedule: ((until_iteration, lr), ...)
    schedule: tuple[tuple[int, float], ...] = ((25_000, 1e-3),)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    negative_only_fraction: float = 0.01
    mining_patience: int = 5
    validation_interval: int = 200
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    branch_jitter: int = 3
    crops_per_face: int = 2
    divergence_limit: float = 1e4
    seed: int = 0

    def __post_init__(self):
        n_pos = self.batch_size * self.pos_fraction
        if self.batch_size < 1 or abs(n_pos - round(n_pos)) > 1e-9:
            raise ContractError(
                f"pos_fraction {self.pos_fraction} does not split batch {self.batch_size} evenly"
            )
        if any(lr <= 0 for _, lr in self.schedule) or not self.schedule:
            raise ContractError("learning rates must be positive")

    @property
    def n_pos(self) -> int:
        return round(self.batch_size * self.pos_fraction)

    @property
    def n_neg(self) -> int:
        return self.batch_size - self.n_pos

    @classmethod
    def backbone(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def branch(cls, **kw) -> "TrainConfig":
        base = dict(pos_fraction=0.8, iterations=50_000,
                    schedule=((30_000, 1e-4), (50_000, 1e-5)))
        base.update(kw)
        return cls(**base)


def lr_at(config: TrainConfig, iteration: int) -> float:
    for until, lr in config.schedule:
        if iteration < until:
            return lr
    return config.schedule[-1][1]


@dataclass
class MiningState:
    best: float = math.inf
    since_improvement: int = 0
    hard: bool = False

    @property
    def mode(self) -> str:
        return "hard-negatives" if self.hard else "random-negatives"


def update_mining(state: MiningState, validation_loss: float, patience: int) -> MiningState:
    """Track validation stagnation; switch to hard negatives once, permanently."""
    if validation_loss < state.best:
        return MiningState(validation_loss, 0, state.hard)
    since = state.since_improvement + 1
    return MiningState(state.best, since, state.hard or since >= patience)


# ---------------------------------------------------------------- data


@dataclass
class FaceDataset:
    """Positive scenes with annotated faces plus face-free background images."""

    images: list[np.ndarray]
    faces: list[AnnotatedFace]  # each face refers to images[face_index[i]]
    face_index: list[int]
    backgrounds: list[np.ndarray]

    @classmethod
    def from_scenes(cls, scenes, backgrounds) -> "FaceDataset":
        images, faces, index = [], [], []
        for img, annotated in scenes:
            for f in annotated:
                faces.append(f)
                index.append(len(images))
            images.append(img)
        return cls(images, faces, index, list(backgrounds))


def _iou(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def sample_face_crop(rng: np.random.Generator, box, min_iou: float = 0.5):
    """Integer square crop ``(x0, y0, side)`` around a face box with IoU >= min_iou."""
    bx, by, bw, bh = box
    s = max(bw, bh)
    cx, cy = bx + bw / 2, by + bh / 2
    for _ in range(100):
        side = max(4, int(round(s * rng.uniform(0.9, 1.2))))
        x0 = int(round(cx + rng.uniform(-0.12, 0.12) * s - side / 2))
        y0 = int(round(cy + rng.uniform(-0.12, 0.12) * s - side / 2))
        if _iou((x0, y0, side, side), box) >= min_iou:
            return x0, y0, side
    side = int(round(s))
    return int(round(cx - side / 2)), int(round(cy - side / 2)), side


def face_crop_input(image, face: AnnotatedFace, crop, out_side: int):
    """Resize a crop to ``out_side``; returns (input, landmarks in that frame)."""
    x0, y0, side = crop
    patch = bilinear_resize(crop_region(image, x0, y0, side, side), (out_side, out_side))
    scale = out_side / side
    pts = (face.points - np.array([x0, y0])) * scale
    return patch, pts


def _background_crop(rng, image, out_side):
    h, w = image.shape[-2:]
    side = int(rng.integers(max(8, min(h, w) // 2), min(h, w) + 1))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    return bilinear_resize(crop_region(image, x0, y0, side, side), (out_side, out_side))


@dataclass
class Batch:
    inputs: np.ndarray  # N x C x H x W (backbone) or K x N x 4 x 24 x 24 (branch)
    gt: np.ndarray
    masks: np.ndarray
    n_pos: int
    n_neg: int
    phase: str
    mask_seed: int = 0


def _backbone_batch(data: FaceDataset, config: TrainConfig, rng, K, side=32, radius=2):
    if not data.faces or not data.backgrounds:
        raise DataError("backbone batches need both face and background pools")
    inputs = np.zeros((config.batch_size, 3, side, side), dtype=np.float32)
    gt = np.zeros((config.batch_size, K, side, side), dtype=np.float32)
    for i in range(config.n_pos):
        j = int(rng.integers(len(data.faces)))
        face = data.faces[j]
        img = data.images[data.face_index[j]]
        crop = sample_face_crop(rng, face.box)
        inputs[i], pts = face_crop_input(img, face, crop, side)
        gt[i] = hm.render_ground_truth(pts, face.visible, (side, side), radius)
    for i in range(config.n_pos, config.batch_size):
        bg = data.backgrounds[int(rng.integers(len(data.backgrounds)))]
        inputs[i] = _background_crop(rng, bg, side)
    return inputs, gt


@dataclass
class BranchPool:
    """Backbone-processed crops for branch training.

    ``images`` are 64 x 64 magnified crops, ``maps`` the matching backbone heat
    maps magnified to 64 x 64, ``points`` the landmarks in that frame.
    """

    images: np.ndarray  # P x 3 x 64 x 64
    maps: np.ndarray  # P x K x 64 x 64
    points: np.ndarray  # P x K x 2
    visible: np.ndarray  # P x K
    bg_images: np.ndarray  # B x 3 x 64 x 64
    bg_maps: np.ndarray  # B x K x 64 x 64


def _backbone_maps(backbone: Net, images32: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images32), chunk):
        out.append(backbone.forward(images32[i : i + chunk])[0])
    return np.concatenate(out) if out else np.zeros((0,), np.float32)


def prepare_branch_pool(data: FaceDataset, model: Model, config: TrainConfig,
                        seed: int | None = None) -> BranchPool:
    """Crop faces and backgrounds and run the (frozen) backbone on them once."""
    rng = np.random.default_rng([config.seed if seed is None else seed, 7919])
    side, big = model.config.input_side, model.config.magnified_side
    small, large, pts, vis = [], [], [], []
    for j, face in enumerate(data.faces):
        img = data.images[data.face_index[j]]
        for _ in range(config.crops_per_face):
            x0, y0, c = sample_face_crop(rng, face.box)
            region = crop_region(img, x0, y0, c, c)
            small.append(bilinear_resize(region, (side, side)))
            large.append(bilinear_resize(region, (big, big)))
            pts.append((face.points - np.array([x0, y0])) * (big / c))
            vis.append(face.visible)
    bg_small, bg_large = [], []
    for bg in data.backgrounds:
        h, w = bg.shape[-2:]
        c = int(rng.integers(max(8, min(h, w) // 2), min(h, w) + 1))
        x0, y0 = int(rng.integers(0, w - c + 1)), int(rng.integers(0, h - c + 1))
        region = crop_region(bg, x0, y0, c, c)
        bg_small.append(bilinear_resize(region, (side, side)))
        bg_large.append(bilinear_resize(region, (big, big)))
    if not small or not bg_small:
        raise DataError("branch pool needs both faces and backgrounds")

    def magnify(maps):
        return np.stack([bilinear_resize(m, (big, big)) for m in maps]).astype(np.float32)

    return BranchPool(
        np.stack(large).astype(np.float32),
        magnify(_backbone_maps(model.backbone, np.stack(small))),
        np.stack(pts),
        np.stack(vis),
        np.stack(bg_large).astype(np.float32),
        magnify(_backbone_maps(model.backbone, np.stack(bg_small))),
    )


def branch_patch(image64, map_channel, center, patch_side=24) -> np.ndarray:
    """4 x side x side patch (RGB + one heat channel) centred at integer ``center``."""
    cx, cy = center
    x0, y0 = cx - patch_side // 2, cy - patch_side // 2
    rgb = crop_region(image64, x0, y0, patch_side, patch_side)
    heat = crop_region(map_channel, x0, y0, patch_side, patch_side)
    return np.concatenate([rgb, heat[None]], axis=0)


def _branch_batch(pool: BranchPool, config: TrainConfig, rng, patch_side=24, radius=2):
    K = pool.maps.shape[1]
    big = pool.images.shape[-1]
    inputs = np.zeros((K, config.batch_size, 4, patch_side, patch_side), dtype=np.float32)
    gt = np.zeros((K, config.batch_size, 1, patch_side, patch_side), dtype=np.float32)
    j = config.branch_jitter
    for k in range(K):
        candidates = np.flatnonzero(pool.visible[:, k])
        if candidates.size == 0 or len(pool.bg_images) == 0:
            raise DataError(f"no training samples for landmark type {k}")
        for i in range(config.n_pos):
            p = int(candidates[rng.integers(candidates.size)])
            px, py = pool.points[p, k]
            cx = int(math.floor(px + 0.5)) + int(rng.integers(-j, j + 1))
            cy = int(math.floor(py + 0.5)) + int(rng.integers(-j, j + 1))
            inputs[k, i] = branch_patch(pool.images[p], pool.maps[p, k], (cx, cy), patch_side)
            local = np.array([[px - (cx - patch_side // 2), py - (cy - patch_side // 2)]])
            gt[k, i] = hm.render_ground_truth(local, [True], (patch_side, patch_side), radius)
        for i in range(config.n_pos, config.batch_size):
            b = int(rng.integers(len(pool.bg_images)))
            cx, cy = (int(v) for v in rng.integers(patch_side // 2, big - patch_side // 2, size=2))
            inputs[k, i] = branch_patch(pool.bg_images[b], pool.bg_maps[b, k], (cx, cy), patch_side)
    return inputs, gt


def sample_batch(source, config: TrainConfig, phase: str, seed, K: int | None = None) -> Batch:
    """Assemble one minibatch with its random selection masks.

    ``source`` is a FaceDataset for the backbone phase and a BranchPool for
    the branch phase. ``seed`` may be an int or a sequence of ints.
    """
    rng = np.random.default_rng(seed)
    if phase == "backbone":
        if K is None:
            K = len(source.faces[0].points) if source.faces else 5
        inputs, gt = _backbone_batch(source, config, rng, K)
        masks = hm.build_batch_masks(gt, rng, config.negative_only_fraction)
    elif phase == "branch":
        inputs, gt = _branch_batch(source, config, rng)
        masks = np.stack([hm.build_batch_masks(g, rng, config.negative_only_fraction) for g in gt])
    else:
        raise ContractError(f"unknown phase {phase!r}")
    mask_seed = int(rng.integers(2**31))
    return Batch(inputs, gt, masks, config.n_pos, config.n_neg, phase, mask_seed)


# ---------------------------------------------------------------- steps


def compute_gradients(net: Net, inputs, gt, masks):
    """Forward, masked loss and backward for one network; no update."""
    pred, caches = net.forward(inputs, keep_cache=True)
    loss, grad = hm.masked_mse_loss(pred, gt, masks)
    wgrads, bgrads = net.backward(grad, caches)
    return loss, wgrads, bgrads, pred


def _step_net(net: Net, inputs, gt, masks, lr, config: TrainConfig, hard: bool, mask_seed: int):
    if hard:
        pred, caches = net.forward(inputs, keep_cache=True)
        rng = np.random.default_rng(mask_seed)
        masks = hm.build_batch_masks(gt, rng, config.negative_only_fraction, predicted=pred)
        loss, grad = hm.masked_mse_loss(pred, gt, masks)
        wgrads, bgrads = net.backward(grad, caches)
    else:
        loss, wgrads, bgrads, _ = compute_gradients(net, inputs, gt, masks)
    if not math.isfinite(loss) or loss > config.divergence_limit:
        raise DivergenceError(f"loss {loss} exceeded divergence guard")
    net.sgd_update(wgrads, bgrads, lr, config.momentum, config.weight_decay)
    return loss


def train_step(model: Model, batch: Batch, config: TrainConfig, mining: MiningState,
               lr: float | None = None) -> tuple[Model, float]:
    """One SGD step on the phase's network(s); the model is updated in place.

    Branch batches train every branch on its own patches and report the sum
    of the per-branch losses.
    """
    lr = lr_at(config, 0) if lr is None else lr
    if batch.phase == "backbone":
        loss = _step_net(model.backbone, batch.inputs, batch.gt, batch.masks, lr, config,
                         mining.hard, batch.mask_seed)
    else:
        loss = 0.0
        for k, net in enumerate(model.branches):
            loss += _step_net(net, batch.inputs[k], batch.gt[k], batch.masks[k], lr, config,
                              mining.hard, batch.mask_seed + k)
    return model, loss


def batch_loss(model: Model, batch: Batch) -> float:
    """Masked loss of a batch without updating anything."""
    if batch.phase == "backbone":
        pred, _ = model.backbone.forward(batch.inputs)
        return hm.masked_mse_loss(pred, batch.gt, batch.masks)[0]
    total = 0.0
    for k, net in enumerate(model.branches):
        pred, _ = net.forward(batch.inputs[k])
        total += hm.masked_mse_loss(pred, batch.gt[k], batch.masks[k])[0]
    return total


# ---------------------------------------------------------------- loops


@dataclass
class TrainState:
    iteration: int = 0
    mining: MiningState = field(default_factory=MiningState)
    seed: int = 0

    def to_text(self) -> str:
        return (
            f"iteration={self.iteration}\n"
            f"seed={self.seed}\n"
            f"rng=per-iteration(seed,phase,iteration)\n"
            f"mining_mode={self.mining.mode}\n"
            f"mining_best={self.mining.best!r}\n"
            f"mining_since_improvement={self.mining.since_improvement}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "TrainState":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        mining = MiningState(float(kv["mining_best"]), int(kv["mining_since_improvement"]),
                             kv["mining_mode"] == "hard-negatives")
        return cls(int(kv["iteration"]), mining, int(kv["seed"]))


def checkpoint_paths(directory, phase: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{phase}.bin", d / f"{phase}.state"


def save_checkpoint(directory, phase: str, model: Model, state: TrainState) -> None:
    os.makedirs(directory, exist_ok=True)
    wpath, spath = checkpoint_paths(directory, phase)
    save_model(model, wpath)
    spath.write_text(state.to_text())


def load_checkpoint(directory, phase: str) -> tuple[Model, TrainState]:
    wpath, spath = checkpoint_paths(directory, phase)
    return load_model(wpath), TrainState.from_text(spath.read_text())


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    validation: list[tuple[int, float]]
    state: TrainState


def run_training(source, config: TrainConfig, phase: str, model: Model,
                 validation=None, checkpoint_dir=None, resume: bool = False,
                 stop_at: int | None = None) -> TrainResult:
    """Full training loop for one phase.

    Batches are drawn from a generator seeded by ``(seed, phase, iteration)``
    so a run resumed from a checkpoint replays exactly. ``validation`` is a
    held-out source of the same kind as ``source``; when omitted a fixed
    batch of ``source`` is used. ``stop_at`` ends the loop early (the
    checkpoint then records where to continue).
    """
    if phase not in PHASES:
        raise ContractError(f"unknown phase {phase!r}")
    phase_id = PHASES.index(phase)
    state = TrainState(seed=config.seed)
    if resume:
        if checkpoint_dir is None:
            raise ContractError("resume requires a checkpoint directory")
        model, state = load_checkpoint(checkpoint_dir, phase)
    K = model.config.K
    val_batch = sample_batch(validation if validation is not None else source, config, phase,
                             [config.seed, phase_id, 10**9], K)
    losses: list[float] = []
    val_history: list[tuple[int, float]] = []
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    while state.iteration < end:
        it = state.iteration
        batch = sample_batch(source, config, phase, [config.seed, phase_id, it], K)
        _, loss = train_step(model, batch, config, state.mining, lr_at(config, it))
        losses.append(loss)
        state.iteration = it + 1
        if config.validation_interval and state.iteration % config.validation_interval == 0:
            vloss = batch_loss(model, val_batch)
            val_history.append((state.iteration, vloss))
            was_hard = state.mining.hard
            state.mining = update_mining(state.mining, vloss, config.mining_patience)
            if state.mining.hard and not was_hard:
                log.info("%s: switching to hard negatives at iteration %d", phase, state.iteration)
            log.debug("%s it %d loss %.4f val %.4f", phase, state.iteration, loss, vloss)
        if checkpoint_dir and config.checkpoint_interval and state.iteration % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_dir, phase, model, state)
    if checkpoint_dir:
        save_checkpoint(checkpoint_dir, phase, model, state)
    return TrainResult(model, losses, val_history, state)


def scaled(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
