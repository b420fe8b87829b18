"""Desk-scale synthetic pipeline: generate, train both stages, evaluate."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import EvalConfig, EvalReport, ablation_report, recall_error_curve
from .imageio import AnnotatedFace, crop_region
from .inference import InferenceConfig, detect_constrained_full, detect_unconstrained_full
from .nets import Model, NetworkConfig, init_weights, serialize_weights
from .synthetic import SyntheticConfig, generate_synthetic
from .training import FaceDataset, TrainConfig, prepare_branch_pool, run_training

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_faces: int = 500
    n_backgrounds: int = 500
    n_validation: int = 40
    n_test_faces: int = 100
    n_test_scenes: int = 40
    canvas: tuple[int, int] = (64, 64)
    scene_canvas: tuple[int, int] = (96, 96)
    scene_faces: tuple[int, int] = (1, 2)
    scene_face_scale: tuple[float, float] = (40.0, 48.0)
    init_std: float | str = "he"
    backbone: TrainConfig = field(default_factory=lambda: TrainConfig.backbone(
        iterations=2000, schedule=((1500, 2e-4), (2000, 5e-5))))
    branch: TrainConfig = field(default_factory=lambda: TrainConfig.branch(
        iterations=2000, schedule=((1500, 1e-4), (2000, 1e-5))))
    inference: InferenceConfig = field(default_factory=lambda: InferenceConfig(theta=0.5, levels=7))
    evaluation: EvalConfig = field(default_factory=EvalConfig)


def _seed(config: ExperimentConfig, stream: int) -> int:
    return int(np.random.SeedSequence([config.seed, stream]).generate_state(1)[0])


def make_dataset(config: ExperimentConfig, n_faces: int, n_backgrounds: int, stream: int) -> FaceDataset:
    faces_cfg = SyntheticConfig(canvas=config.canvas, seed=_seed(config, stream))
    bg_cfg = SyntheticConfig(canvas=config.canvas, face_count=(0, 0), seed=_seed(config, stream + 1))
    scenes = [generate_synthetic(faces_cfg, i) for i in range(n_faces)]
    backgrounds = [generate_synthetic(bg_cfg, i)[0] for i in range(n_backgrounds)]
    return FaceDataset.from_scenes(scenes, backgrounds)


def face_crop(image: np.ndarray, face: AnnotatedFace) -> tuple[np.ndarray, AnnotatedFace]:
    """Integer crop of the annotated box and the face re-expressed in crop coordinates."""
    x, y, w, h = face.box
    x0, y0 = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
    cw, ch = max(1, int(round(w))), max(1, int(round(h)))
    crop = crop_region(image, x0, y0, cw, ch)
    shifted = AnnotatedFace(face.image, (0.0, 0.0, float(cw), float(ch)),
                            face.points - np.array([x0, y0]), face.visible)
    return crop, shifted


def constrained_test_set(config: ExperimentConfig):
    cfg = SyntheticConfig(canvas=config.canvas, occlusion_prob=0.0, seed=_seed(config, 20))
    out = []
    for i in range(config.n_test_faces):
        img, faces = generate_synthetic(cfg, i)
        out += [face_crop(img, f) for f in faces]
    return out


def wild_test_set(config: ExperimentConfig):
    cfg = SyntheticConfig(canvas=config.scene_canvas, face_count=config.scene_faces,
                          face_scale=config.scene_face_scale, occlusion_prob=0.0,
                          seed=_seed(config, 30))
    return [generate_synthetic(cfg, i) for i in range(config.n_test_scenes)]


@dataclass
class ExperimentResult:
    model: Model
    weights: bytes
    backbone_losses: list[float]
    branch_losses: list[float]
    constrained_full: float
    constrained_coarse: float
    recall_full: float
    recall_coarse: float
    report: str
    timings: dict[str, float]

    def loss_ratio(self, losses: list[float], window: int = 50) -> float:
        return float(np.mean(losses[-window:]) / np.mean(losses[:window]))


def evaluate_model(model: Model, config: ExperimentConfig):
    """Constrained ablation plus wild recall; returns (ablation, full recall, coarse recall)."""
    test = constrained_test_set(config)
    full, coarse, faces = [], [], []
    for crop, face in test:
        res = detect_constrained_full(crop, model, config.inference.top_n)
        full.append(res.points)
        coarse.append(res.coarse)
        faces.append(face)
    ablation = ablation_report(coarse, full, faces, config.evaluation)

    scenes = wild_test_set(config)
    preds_full, preds_coarse, gts = [], [], []
    for img, fs in scenes:
        res = detect_unconstrained_full(img, model, config.inference)
        preds_full.append(res.refined)
        preds_coarse.append(res.coarse)
        gts.append(fs)
    K = model.config.K
    rec_full = recall_error_curve(preds_full, gts, K, config.evaluation)
    rec_coarse = recall_error_curve(preds_coarse, gts, K, config.evaluation)
    return ablation, rec_full, rec_coarse


def run_experiment(config: ExperimentConfig = ExperimentConfig(), out_dir=None) -> ExperimentResult:
    timings = {}
    t = time.perf_counter()
    train = make_dataset(config, config.n_faces, config.n_backgrounds, 0)
    val = make_dataset(config, config.n_validation, config.n_validation, 10)
    timings["data"] = time.perf_counter() - t

    model = init_weights(NetworkConfig(), seed=config.seed, std=config.init_std)
    t = time.perf_counter()
    bb = run_training(train, config.backbone, "backbone", model, validation=val)
    timings["backbone"] = time.perf_counter() - t
    log.info("backbone trained in %.1fs", timings["backbone"])

    t = time.perf_counter()
    pool = prepare_branch_pool(train, model, config.branch)
    val_pool = prepare_branch_pool(val, model, config.branch, seed=config.branch.seed + 1)
    br = run_training(pool, config.branch, "branch", model, validation=val_pool)
    timings["branch"] = time.perf_counter() - t
    log.info("branches trained in %.1fs", timings["branch"])

    weights = serialize_weights(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "weights.bin").write_bytes(weights)
        for name, losses in (("backbone", bb.losses), ("branch", br.losses)):
            rows = [f"{i + 1},{v:.6f}" for i, v in enumerate(losses)]
            (out / f"loss_{name}.csv").write_text("\n".join(["iteration,loss"] + rows) + "\n")

    t = time.perf_counter()
    ablation, rec_full, rec_coarse = evaluate_model(model, config)
    timings["evaluation"] = time.perf_counter() - t

    lines = ["constrained mean error (percent of interocular distance)", ablation.to_text()]
    lines.append("unconstrained average recall @ PE=10%")
    lines.append(f"backbone {rec_coarse.average_at(0.10):.4f}")
    lines.append(f"full     {rec_full.average_at(0.10):.4f}")
    report = "\n".join(lines) + "\n"
    if out is not None:
        (out / "report.txt").write_text(report)
        (out / "ablation.csv").write_text(ablation.to_csv())
        (out / "recall_full.csv").write_text(EvalReport(recall=rec_full).to_csv())
        (out / "recall_backbone.csv").write_text(EvalReport(recall=rec_coarse).to_csv())
    return ExperimentResult(model, weights, bb.losses, br.losses, ablation.full.average,
                            ablation.coarse.average, rec_full.average_at(0.10),
                            rec_coarse.average_at(0.10), report, timings)
