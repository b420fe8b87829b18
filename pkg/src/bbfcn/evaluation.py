"""Normalized mean error, recall-error curves and ablation tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError
from .imageio import AnnotatedFace

MODES = ("eye-centers", "outer-corners", "bbox-fallback")
DEFAULT_NAMES = ("LE", "RE", "N", "LM", "RM")


def _default_grid() -> tuple[float, ...]:
    return tuple(round(0.01 * i, 2) for i in range(1, 31))


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "eye-centers"
    fallback_ratio: float = 0.419
    pe_grid: tuple[float, ...] = field(default_factory=_default_grid)
    m: int = 15
    eyes: tuple[int, int] = (0, 1)
    outer_corners: tuple[int, int] | None = None
    names: tuple[str, ...] = DEFAULT_NAMES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown interocular mode {self.mode!r}")
        if not 0 < self.fallback_ratio < 1:
            raise ValueError("fallback ratio must be in (0, 1)")
        if any(b <= a for a, b in zip(self.pe_grid, self.pe_grid[1:])):
            raise ValueError("pe grid must be strictly increasing")
        if self.m < 1:
            raise ValueError("m must be positive")

    def name(self, k: int) -> str:
        return self.names[k] if k < len(self.names) else f"L{k}"


def interocular_distance(face: AnnotatedFace, config: EvalConfig = EvalConfig()) -> float:
    if config.mode == "outer-corners":
        if config.outer_corners is None:
            raise EvaluationError("outer-corners mode needs corner indices")
        a, b = config.outer_corners
    else:
        a, b = config.eyes
    if face.visible[a] and face.visible[b]:
        return float(np.hypot(*(np.asarray(face.points[a]) - face.points[b])))
    if config.mode == "bbox-fallback":
        return config.fallback_ratio * face.box_length
    raise EvaluationError(f"face in {face.image!r} lacks the points needed for {config.mode}")


@dataclass
class ErrorReport:
    per_type: np.ndarray  # percent
    average: float
    counts: np.ndarray


def point_errors(pred, face: AnnotatedFace, config: EvalConfig = EvalConfig()) -> np.ndarray:
    """Per-landmark error in percent of the interocular distance; NaN if invisible."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != face.points.shape:
        raise EvaluationError(f"expected {face.points.shape} predictions, got {pred.shape}")
    l = interocular_distance(face, config)
    err = np.hypot(*(pred - face.points).T) / l * 100.0
    return np.where(face.visible, err, np.nan)


def mean_error(predictions, faces: list[AnnotatedFace], config: EvalConfig = EvalConfig()) -> ErrorReport:
    """Per-type mean over faces, then the unweighted mean over types."""
    if len(predictions) != len(faces):
        raise EvaluationError(f"{len(predictions)} predictions for {len(faces)} faces")
    if not faces:
        raise EvaluationError("no faces to evaluate")
    errs = np.stack([point_errors(p, f, config) for p, f in zip(predictions, faces)])
    counts = np.sum(~np.isnan(errs), axis=0)
    with np.errstate(invalid="ignore"):
        per_type = np.nansum(errs, axis=0) / np.where(counts > 0, counts, np.nan)
    return ErrorReport(per_type, float(np.nanmean(per_type)), counts)


# ---------------------------------------------------------------- recall


@dataclass
class RecallReport:
    pe_grid: tuple[float, ...]
    recall: np.ndarray  # K x len(pe_grid)
    totals: np.ndarray  # visible GT per type

    def at(self, pe: float) -> np.ndarray:
        i = int(np.argmin(np.abs(np.asarray(self.pe_grid) - pe)))
        if abs(self.pe_grid[i] - pe) > 1e-9:
            raise EvaluationError(f"pe {pe} not on the grid")
        return self.recall[:, i]

    def average_at(self, pe: float) -> float:
        return float(np.mean(self.at(pe)))


def match_count(preds, scores, gts, norms, pe: float) -> int:
    """Greedy one-to-one matching: by descending score, each prediction takes the
    nearest unmatched GT (distance normalized per GT) within ``pe``."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(preds) == 0 or len(gts) == 0:
        return 0
    norms = np.asarray(norms, dtype=np.float64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    free = np.ones(len(gts), dtype=bool)
    matched = 0
    for i in order:
        d = np.hypot(*(gts - preds[i]).T) / norms
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= pe:
            free[j] = False
            matched += 1
    return matched


def recall_error_curve(predictions, ground_truth, K: int, config: EvalConfig = EvalConfig()) -> RecallReport:
    """Recall per type over the PE grid.

    ``predictions[i]`` is a list of LandmarkDetection-like objects (``k``, ``x``,
    ``y``, ``score``) for image i; ``ground_truth[i]`` the faces of that image.
    Only the top ``config.m`` predictions per type and image count.
    """
    if len(predictions) != len(ground_truth):
        raise EvaluationError("predictions and ground truth cover different images")
    grid = config.pe_grid
    hits = np.zeros((K, len(grid)))
    totals = np.zeros(K)
    for dets, faces in zip(predictions, ground_truth):
        norms_face = [interocular_distance(f, config) for f in faces]
        for k in range(K):
            gts = [f.points[k] for f in faces if f.visible[k]]
            norms = [n for f, n in zip(faces, norms_face) if f.visible[k]]
            totals[k] += len(gts)
            mine = sorted((d for d in dets if d.k == k), key=lambda d: -d.score)[: config.m]
            pts = [(d.x, d.y) for d in mine]
            sc = [d.score for d in mine]
            for j, pe in enumerate(grid):
                hits[k, j] += match_count(pts, sc, gts, norms, pe)
    with np.errstate(invalid="ignore"):
        recall = np.where(totals[:, None] > 0, hits / np.maximum(totals[:, None], 1), 0.0)
    return RecallReport(tuple(grid), recall, totals)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    errors: ErrorReport | None = None
    recall: RecallReport | None = None
    names: tuple[str, ...] = DEFAULT_NAMES

    def to_csv(self) -> str:
        lines = []
        if self.errors is not None:
            lines.append("type,mean_error_pct")
            for k, e in enumerate(self.errors.per_type):
                lines.append(f"{_name(self.names, k)},{e:.2f}")
            lines.append(f"A,{self.errors.average:.2f}")
        if self.recall is not None:
            for k in range(self.recall.recall.shape[0]):
                lines.append(f"# {_name(self.names, k)}")
                lines.append("pe,recall")
                for pe, r in zip(self.recall.pe_grid, self.recall.recall[k]):
                    lines.append(f"{pe:.2f},{r:.4f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = []
        if self.errors is not None:
            lines.append(f"{'type':<6}{'mean error %':>14}")
            for k, e in enumerate(self.errors.per_type):
                lines.append(f"{_name(self.names, k):<6}{e:>14.2f}")
            lines.append(f"{'A':<6}{self.errors.average:>14.2f}")
        if self.recall is not None:
            for pe in (0.05, 0.10):
                if any(abs(p - pe) < 1e-9 for p in self.recall.pe_grid):
                    lines.append(f"average recall @ PE={pe:.0%}: {self.recall.average_at(pe):.4f}")
        return "\n".join(lines) + "\n"


def _name(names, k):
    return names[k] if k < len(names) else f"L{k}"


@dataclass
class AblationReport:
    coarse: ErrorReport
    full: ErrorReport
    names: tuple[str, ...] = DEFAULT_NAMES

    @property
    def difference(self) -> np.ndarray:
        return self.full.per_type - self.coarse.per_type

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [(_name(self.names, k), c, f, f - c)
               for k, (c, f) in enumerate(zip(self.coarse.per_type, self.full.per_type))]
        out.append(("A", self.coarse.average, self.full.average, self.full.average - self.coarse.average))
        return out

    def to_text(self) -> str:
        lines = [f"{'type':<6}{'backbone %':>12}{'full %':>10}{'diff':>10}"]
        lines += [f"{n:<6}{c:>12.2f}{f:>10.2f}{d:>10.2f}" for n, c, f, d in self.rows()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["type,backbone_pct,full_pct,diff_pct"]
        lines += [f"{n},{c:.2f},{f:.2f},{d:.2f}" for n, c, f, d in self.rows()]
        return "\n".join(lines) + "\n"


def ablation_report(coarse, full, faces: list[AnnotatedFace],
                    config: EvalConfig = EvalConfig()) -> AblationReport:
    return AblationReport(mean_error(coarse, faces, config), mean_error(full, faces, config), config.names)
