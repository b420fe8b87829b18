"""Constrained single-face decoding and unconstrained pyramid detection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .heatmaps import decode_top_n_average
from .imageio import crop_with_zero_pad
from .nets import Model
from .numeric import bilinear_resize

REGION = 12  # candidate region side in the level frame


@dataclass(frozen=True)
class InferenceConfig:
    theta: float = 0.5
    levels: int = 20
    scale_step: float = 1.16
    base_side: int = 32
    iou: float = 0.5
    top_n: int = 13


@dataclass
class PyramidLevel:
    index: int
    scale: float
    image: np.ndarray  # 3 x h x w


@dataclass(frozen=True)
class Candidate:
    k: int
    level: int
    value: float
    x: int
    y: int

    @property
    def region(self) -> tuple[float, float, float, float]:
        return (self.x - REGION / 2, self.y - REGION / 2, REGION, REGION)


@dataclass(frozen=True)
class LandmarkDetection:
    k: int
    x: float
    y: float
    score: float
    level: int = 0
    scale: float = 1.0


def level_shape(h: int, w: int, level: int, config: InferenceConfig = InferenceConfig()):
    side = int(round(config.base_side * config.scale_step**level))
    scale = side / min(h, w)
    if h <= w:
        return side, max(1, int(round(w * scale))), scale
    return max(1, int(round(h * scale))), side, scale


def build_pyramid(image: np.ndarray, levels: int,
                  config: InferenceConfig = InferenceConfig()) -> list[PyramidLevel]:
    """Level l has smaller side round(32 * 1.16^l); levels above native size are kept."""
    if levels < 1:
        raise ContractError("levels must be >= 1")
    h, w = image.shape[-2:]
    if min(h, w) < 1:
        raise ContractError("degenerate image")
    out = []
    for l in range(levels):
        lh, lw, scale = level_shape(h, w, l, config)
        out.append(PyramidLevel(l, scale, bilinear_resize(image, (lh, lw))))
    return out


def extract_candidates(heat: np.ndarray, theta: float, level: int = 0) -> list[Candidate]:
    """One candidate per super-threshold location of a K x H x W map."""
    if not math.isfinite(theta):
        raise ContractError("theta must be finite")
    ks, ys, xs = np.nonzero(heat > theta)
    return [Candidate(int(k), level, float(heat[k, y, x]), int(x), int(y))
            for k, y, x in zip(ks, ys, xs)]


def iou(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression; returns kept indices by descending score (ties by index)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    area = boxes[:, 2] * boxes[:, 3]
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive[i] = False
        iw = np.clip(np.minimum(x1[i], x1) - np.maximum(x0[i], x0), 0, None)
        ih = np.clip(np.minimum(y1[i], y1) - np.maximum(y0[i], y0), 0, None)
        inter = iw * ih
        union = area[i] + area - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        alive &= ~(ov > iou_threshold)
    return keep


def level_to_original(value, scale: float):
    """Map a level-frame point (x, y) or box (x, y, w, h) to the original frame."""
    if scale <= 0:
        raise ContractError("scale must be positive")
    return tuple(float(v) / scale for v in value)


def original_to_level(value, scale: float):
    return tuple(float(v) * scale for v in value)


# ---------------------------------------------------------------- backbone / branch helpers


def backbone_maps(model: Model, image: np.ndarray) -> np.ndarray:
    """K x H x W map for any image size; zero-pads to a multiple of 4 and crops back."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    x = image if not (ph or pw) else np.pad(image, ((0, 0), (0, ph), (0, pw)))
    heat, _ = model.backbone.forward(x)
    return heat[:, :h, :w]


def _branch_batch(model: Model, k: int, patches: np.ndarray) -> np.ndarray:
    out, _ = model.branches[k].forward(patches)
    return out[:, 0]


def refine_patch(image: np.ndarray, heat_channel: np.ndarray, x: int, y: int) -> np.ndarray:
    """4 x 24 x 24 branch input from 12 x 12 level-frame crops centred at (x, y)."""
    rgb = bilinear_resize(crop_with_zero_pad(image, (x, y), REGION), (2 * REGION, 2 * REGION))
    heat = bilinear_resize(crop_with_zero_pad(heat_channel, (x, y), REGION), (2 * REGION, 2 * REGION))
    return np.concatenate([rgb, heat[None]], axis=0)


def refined_level_point(x: int, y: int, fine) -> tuple[float, float]:
    u, v = fine
    return x - REGION / 2 + u / 2, y - REGION / 2 + v / 2


def refine_candidate(candidate: Candidate, level_image, heat_channel, model: Model,
                     scale: float = 1.0, top_n: int = 13) -> LandmarkDetection:
    patch = refine_patch(level_image, heat_channel, candidate.x, candidate.y)
    fine = decode_top_n_average(_branch_batch(model, candidate.k, patch[None])[0], top_n)
    lx, ly = refined_level_point(candidate.x, candidate.y, fine)
    ox, oy = level_to_original((lx, ly), scale)
    return LandmarkDetection(candidate.k, ox, oy, candidate.value, candidate.level, scale)


# ---------------------------------------------------------------- constrained


@dataclass
class ConstrainedResult:
    points: np.ndarray  # K x 2 in the face-crop frame
    coarse: np.ndarray  # K x 2 backbone-only estimate, same frame
    scores: np.ndarray  # K coarse top-n mean responses


def detect_constrained_full(face: np.ndarray, model: Model, top_n: int = 13) -> ConstrainedResult:
    h, w = face.shape[-2:]
    if h < 1 or w < 1:
        raise ContractError("degenerate face image")
    cfg = model.config
    side, big, ps = cfg.input_side, cfg.magnified_side, cfg.patch_side
    small = bilinear_resize(face, (side, side))
    heat, _ = model.backbone.forward(small)
    large = bilinear_resize(face, (big, big))
    heat_big = bilinear_resize(heat, (big, big))
    ratio = big / side
    sx, sy = w / big, h / big
    K = heat.shape[0]
    points = np.zeros((K, 2))
    coarse = np.zeros((K, 2))
    scores = np.zeros(K)
    for k in range(K):
        cx, cy = decode_top_n_average(heat[k], top_n)
        flat = np.sort(heat[k].reshape(-1))[::-1]
        scores[k] = float(flat[:top_n].mean())
        coarse[k] = (cx * ratio * sx, cy * ratio * sy)
        c64 = (math.floor(cx * ratio + 0.5), math.floor(cy * ratio + 0.5))
        patch = np.concatenate([
            crop_with_zero_pad(large, c64, ps),
            crop_with_zero_pad(heat_big[k], c64, ps)[None],
        ])
        fu, fv = decode_top_n_average(_branch_batch(model, k, patch[None])[0], top_n)
        points[k] = ((c64[0] - ps // 2 + fu) * sx, (c64[1] - ps // 2 + fv) * sy)
    return ConstrainedResult(points, coarse, scores)


def detect_constrained(face: np.ndarray, model: Model, top_n: int = 13) -> np.ndarray:
    """K x 2 landmark coordinates in the face-crop frame."""
    return detect_constrained_full(face, model, top_n).points


def detect_constrained_coarse(face: np.ndarray, model: Model, top_n: int = 13) -> np.ndarray:
    """Backbone-only estimate, for ablations."""
    return detect_constrained_full(face, model, top_n).coarse


# ---------------------------------------------------------------- unconstrained


@dataclass
class WildResult:
    refined: list[LandmarkDetection]
    coarse: list[LandmarkDetection]  # NMS survivors at their candidate centres
    pyramid: list[PyramidLevel]


def _canonical(dets: list[LandmarkDetection]) -> list[LandmarkDetection]:
    return sorted(dets, key=lambda d: (d.k, -d.score, d.y, d.x, d.level))


def detect_unconstrained_full(image: np.ndarray, model: Model,
                              config: InferenceConfig = InferenceConfig()) -> WildResult:
    pyramid = build_pyramid(image, config.levels, config)
    heats = [backbone_maps(model, lvl.image) for lvl in pyramid]
    K = model.config.K
    by_type: list[list[Candidate]] = [[] for _ in range(K)]
    for lvl, heat in zip(pyramid, heats):
        for c in extract_candidates(heat, config.theta, lvl.index):
            by_type[c.k].append(c)
    refined, coarse = [], []
    for k in range(K):
        cands = by_type[k]
        if not cands:
            continue
        boxes = [level_to_original(c.region, pyramid[c.level].scale) for c in cands]
        kept = [cands[i] for i in nms(boxes, [c.value for c in cands], config.iou)]
        patches = np.stack([refine_patch(pyramid[c.level].image, heats[c.level][k], c.x, c.y)
                            for c in kept])
        fine_maps = _branch_batch(model, k, patches)
        for c, fm in zip(kept, fine_maps):
            scale = pyramid[c.level].scale
            lx, ly = refined_level_point(c.x, c.y, decode_top_n_average(fm, config.top_n))
            ox, oy = level_to_original((lx, ly), scale)
            refined.append(LandmarkDetection(k, ox, oy, c.value, c.level, scale))
            cx, cy = level_to_original((c.x, c.y), scale)
            coarse.append(LandmarkDetection(k, cx, cy, c.value, c.level, scale))
    return WildResult(_canonical(refined), _canonical(coarse), pyramid)


def detect_unconstrained(image: np.ndarray, model: Model, theta: float = 0.5, levels: int = 20,
                         config: InferenceConfig | None = None) -> list[LandmarkDetection]:
    """Pyramid detection; sorted by type, then score descending."""
    if config is None:
        config = InferenceConfig(theta=theta, levels=levels)
    return detect_unconstrained_full(image, model, config).refined


def format_detections(dets: list[LandmarkDetection]) -> str:
    return "".join(f"{d.k} {d.x:.3f} {d.y:.3f} {d.score:.6f} {d.level}\n" for d in dets)
