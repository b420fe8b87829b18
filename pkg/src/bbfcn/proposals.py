"""Face proposals from landmark detections."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .inference import LandmarkDetection, nms


@dataclass(frozen=True)
class ProposalBox:
    x: float
    y: float
    w: float
    h: float
    score: float
    k: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)


Refiner = Callable[[list[ProposalBox]], list[ProposalBox]]


def identity_refiner(boxes: list[ProposalBox]) -> list[ProposalBox]:
    return list(boxes)


def landmarks_to_proposals(detections: list[LandmarkDetection], window: int = 32) -> list[ProposalBox]:
    """Square window of side ``window / scale`` centred on each detection."""
    out = []
    for d in detections:
        side = window / d.scale
        out.append(ProposalBox(d.x - side / 2, d.y - side / 2, side, side, d.score, d.k))
    return out


def _suppress(boxes: list[ProposalBox], iou_threshold: float) -> list[ProposalBox]:
    keep = nms([b.box for b in boxes], [b.score for b in boxes], iou_threshold)
    return [boxes[i] for i in keep]


def suppress_proposals(boxes: list[ProposalBox], iou_threshold: float = 0.5,
                       refiner: Refiner = identity_refiner) -> list[ProposalBox]:
    """Per-type NMS, an optional box refiner, then NMS across all types."""
    merged = []
    for k in sorted({b.k for b in boxes}):
        merged += _suppress([b for b in boxes if b.k == k], iou_threshold)
    return _suppress(refiner(merged), iou_threshold)


def enlarge_vertical(box: ProposalBox, fraction: float = 0.25) -> ProposalBox:
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    h = box.h * (1.0 + fraction)
    cy = box.y + box.h / 2
    return replace(box, y=cy - h / 2, h=h)


def format_proposals(boxes: list[ProposalBox]) -> str:
    return "".join(f"{b.x:.3f} {b.y:.3f} {b.w:.3f} {b.h:.3f} {b.score:.6f} {b.k}\n" for b in boxes)
