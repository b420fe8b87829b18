"""Seeded synthetic face scenes with exact landmark ground truth.

A face is a skin-toned ellipse carrying five distinct marks: two eyes with
differently coloured irises, a nose blob, and lips whose corners carry
coloured dots. The landmark is the exact centre of its mark. Scenes are a
pure function of ``(config, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageio import AnnotatedFace, quantize

# landmark template, in units of the face-box side, relative to the box centre
TEMPLATE = np.array([
    [-0.20, -0.12],  # LE
    [0.20, -0.12],   # RE
    [0.00, 0.08],    # N
    [-0.16, 0.26],   # LM
    [0.16, 0.26],    # RM
])


@dataclass(frozen=True)
class SyntheticConfig:
    canvas: tuple[int, int] = (64, 64)  # H, W
    face_count: tuple[int, int] = (1, 1)  # inclusive range
    face_scale: tuple[float, float] = (36.0, 52.0)  # face-box side in pixels
    rotation_deg: float = 12.0
    landmark_jitter: float = 0.025  # fraction of the face side
    occlusion_prob: float = 0.08
    distractors: tuple[int, int] = (1, 4)
    noise: float = 0.025
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.face_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad face_count range {self.face_count}")
        if not 0 < self.face_scale[0] <= self.face_scale[1]:
            raise ValueError(f"bad face_scale range {self.face_scale}")
        if self.face_count[1] > 0 and self.face_scale[1] > min(self.canvas):
            raise ValueError("faces larger than the canvas")


def _coverage(px, py, cx, cy, ax, ay, angle=0.0):
    """Anti-aliased coverage of an ellipse at pixel centres (px, py)."""
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = px - cx, py - cy
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    rho = np.sqrt(u * u + v * v)
    return np.clip(0.5 + (1.0 - rho) * min(ax, ay), 0.0, 1.0)


def _paint(img, cov, color):
    color = np.asarray(color, dtype=np.float64)[:, None, None]
    img += cov[None] * (color - img)


def _background(rng, h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.15, 0.85, size=3)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    for _ in range(3):
        fx, fy = rng.uniform(-0.25, 0.25, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.03, 0.1, size=3)
        img += amp[:, None, None] * np.sin(fx * xs + fy * ys + phase)[None]
    return img, xs, ys


def _distractor(rng, img, xs, ys, h, w):
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    ax, ay = rng.uniform(2, 10, size=2)
    cov = _coverage(xs, ys, cx, cy, ax, ay, rng.uniform(0, math.pi))
    _paint(img, cov, rng.uniform(0, 1, size=3))


def _face(rng, img, xs, ys, cx, cy, side, cfg: SyntheticConfig):
    angle = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    c, s = math.cos(angle), math.sin(angle)
    rel = TEMPLATE * side + rng.uniform(-cfg.landmark_jitter, cfg.landmark_jitter, TEMPLATE.shape) * side
    pts = np.stack([cx + c * rel[:, 0] - s * rel[:, 1], cy + s * rel[:, 0] + c * rel[:, 1]], axis=1)

    tone = rng.uniform(0.55, 0.95)
    skin = np.array([tone, tone * rng.uniform(0.68, 0.8), tone * rng.uniform(0.5, 0.65)])
    _paint(img, _coverage(xs, ys, cx, cy, 0.42 * side, 0.5 * side, angle), skin)

    # eyes: white sclera, coloured iris
    for (ex, ey), iris in zip(pts[:2], ([0.08, 0.1, 0.35], [0.1, 0.3, 0.08])):
        _paint(img, _coverage(xs, ys, ex, ey, 0.085 * side, 0.05 * side, angle), [0.95, 0.95, 0.92])
        _paint(img, _coverage(xs, ys, ex, ey, 0.04 * side, 0.04 * side), iris)
    # nose: darker vertical blob with a highlight
    nx, ny = pts[2]
    _paint(img, _coverage(xs, ys, nx, ny, 0.045 * side, 0.07 * side, angle), skin * 0.6)
    _paint(img, _coverage(xs, ys, nx, ny, 0.018 * side, 0.018 * side), skin * 1.1 + 0.05)
    # lips between the mouth corners, then coloured corner dots
    (lx, ly), (rx, ry) = pts[3], pts[4]
    mouth_angle = math.atan2(ry - ly, rx - lx)
    half = 0.5 * math.hypot(rx - lx, ry - ly)
    _paint(img, _coverage(xs, ys, (lx + rx) / 2, (ly + ry) / 2, half, 0.045 * side, mouth_angle),
           [0.65, 0.12, 0.15])
    _paint(img, _coverage(xs, ys, lx, ly, 0.03 * side, 0.03 * side), [0.95, 0.55, 0.1])
    _paint(img, _coverage(xs, ys, rx, ry, 0.03 * side, 0.03 * side), [0.55, 0.1, 0.6])
    return pts


def _occlude(rng, img, xs, ys, box, pts):
    """Paint a flat rectangle over part of the face; covered landmarks become invisible."""
    x, y, side, _ = box
    ow, oh = rng.uniform(0.3, 0.6, size=2) * side
    ox = rng.uniform(x - 0.1 * side, x + side - ow + 0.1 * side)
    oy = rng.uniform(y - 0.1 * side, y + side - oh + 0.1 * side)
    inside = (xs >= ox) & (xs < ox + ow) & (ys >= oy) & (ys < oy + oh)
    _paint(img, inside.astype(np.float64), rng.uniform(0, 1, size=3))
    px, py = pts[:, 0], pts[:, 1]
    margin = 0.03 * side
    covered = (px > ox - margin) & (px < ox + ow + margin) & (py > oy - margin) & (py < oy + oh + margin)
    return ~covered


def _iou(a, b):
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def generate_synthetic(config: SyntheticConfig, index: int, name: str | None = None):
    """Render scene ``index``; returns ``(image 3 x H x W, [AnnotatedFace])``."""
    rng = np.random.default_rng([config.seed, index])
    h, w = config.canvas
    img, xs, ys = _background(rng, h, w)
    for _ in range(int(rng.integers(config.distractors[0], config.distractors[1] + 1))):
        _distractor(rng, img, xs, ys, h, w)

    n_faces = int(rng.integers(config.face_count[0], config.face_count[1] + 1))
    boxes = []
    for _ in range(n_faces):
        for _attempt in range(50):
            side = rng.uniform(*config.face_scale)
            x = rng.uniform(0, w - side)
            y = rng.uniform(0, h - side)
            box = (x, y, side, side)
            if all(_iou(box, b) == 0.0 for b in boxes) or _attempt == 49:
                boxes.append(box)
                break

    faces = []
    label = name if name is not None else f"synth_{index:06d}"
    for box in boxes:
        x, y, side, _ = box
        pts = _face(rng, img, xs, ys, x + side / 2, y + side / 2, side, config)
        visible = np.ones(len(pts), dtype=bool)
        if rng.uniform() < config.occlusion_prob:
            visible = _occlude(rng, img, xs, ys, box, pts)
        faces.append(AnnotatedFace(label, box, pts, visible))

    img += rng.normal(0.0, config.noise, size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0)), faces


def interocular(face: AnnotatedFace) -> float:
    """Distance between the rendered eye centres."""
    return float(np.hypot(*(face.points[1] - face.points[0])))
