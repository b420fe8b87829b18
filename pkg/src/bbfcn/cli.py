"""Command-line entry point: ``bbfcn <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .errors import BBFCNError, ContractError, DataError
from .evaluation import EvalConfig, EvalReport, ablation_report, mean_error
from .experiment import face_crop
from .gradcheck import TOLERANCE, run_suite
from .heatmaps import heatmap_to_gray
from .imageio import (crop_region, decode_image, encode_pgm, format_annotations,
                      parse_annotations, resolve_image_path, write_image)
from .inference import (InferenceConfig, LandmarkDetection, backbone_maps, build_pyramid,
                        detect_constrained_full, detect_unconstrained_full, format_detections)
from .nets import NetworkConfig, init_weights, load_model, save_model
from .proposals import enlarge_vertical, format_proposals, landmarks_to_proposals, suppress_proposals
from .synthetic import SyntheticConfig, generate_synthetic
from .training import FaceDataset, TrainConfig, prepare_branch_pool, run_training


# ---------------------------------------------------------------- helpers


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunLog:
    def __init__(self, path, args: argparse.Namespace):
        self.path = Path(path) if path else None
        self.lines = [f"version={version_string()}", f"command={args.command}"]
        for key in sorted(vars(args)):
            if key not in ("command", "func"):
                self.lines.append(f"{key}={getattr(args, key)}")
        self._t = time.perf_counter()

    def phase(self, name: str) -> None:
        now = time.perf_counter()
        self.lines.append(f"time.{name}={now - self._t:.3f}s")
        self._t = now

    def write(self) -> None:
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\n".join(self.lines) + "\n")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``"30000:1e-4,50000:1e-5"`` -> ((30000, 1e-4), (50000, 1e-5))."""
    steps = []
    for part in text.split(","):
        until, _, lr = part.partition(":")
        steps.append((int(until), float(lr)))
    return tuple(steps)


def _std(value: str):
    return value if value == "he" else float(value)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------- dataset dirs


def write_dataset(out: Path, scenes, backgrounds, K: int = 5) -> None:
    (out / "images").mkdir(parents=True, exist_ok=True)
    faces = []
    for i, (img, fs) in enumerate(scenes):
        name = f"images/face_{i:06d}.png"
        write_image(out / name, img)
        for f in fs:
            f.image = name
            faces.append(f)
    names = []
    for i, img in enumerate(backgrounds):
        name = f"images/bg_{i:06d}.png"
        write_image(out / name, img)
        names.append(name)
    (out / "annotations.txt").write_text(format_annotations(faces, K))
    (out / "backgrounds.txt").write_text("".join(n + "\n" for n in names))


def _annotation_file(path: Path) -> Path:
    return path / "annotations.txt" if path.is_dir() else path


def load_faces(path) -> tuple[list, dict]:
    """Faces from an annotation file (or dataset dir) plus their decoded images."""
    ann = _require(_annotation_file(_require(path, "dataset")), "annotation file")
    faces = parse_annotations(ann)
    images = {}
    for f in faces:
        full = resolve_image_path(f, ann)
        if full not in images:
            images[full] = decode_image(_require(full, "image"))
        f.image = full
    return faces, images


def load_dataset(path) -> FaceDataset:
    root = _require(path, "dataset")
    faces, images = load_faces(root)
    keys = list(images)
    scenes = [(images[k], [f for f in faces if f.image == k]) for k in keys]
    bg_list = _require(root / "backgrounds.txt", "background list")
    backgrounds = [decode_image(_require(root / line.strip(), "image"))
                   for line in bg_list.read_text().splitlines() if line.strip()]
    if not faces or not backgrounds:
        raise DataError(f"dataset {root} needs faces and backgrounds")
    return FaceDataset.from_scenes(scenes, backgrounds)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, runlog: RunLog) -> int:
    out = Path(args.out)
    cfg = SyntheticConfig(canvas=(args.canvas, args.canvas), face_count=(args.min_faces, args.max_faces),
                          face_scale=(args.face_min, args.face_max), seed=args.seed)
    bg_cfg = SyntheticConfig(canvas=(args.canvas, args.canvas), face_count=(0, 0), seed=args.seed + 1)
    scenes = [generate_synthetic(cfg, i) for i in range(args.faces)]
    bgs = [generate_synthetic(bg_cfg, i)[0] for i in range(args.backgrounds)]
    runlog.phase("generate")
    write_dataset(out, scenes, bgs)
    runlog.phase("write")
    print(f"wrote {args.faces} face scenes and {args.backgrounds} backgrounds to {out}")
    return 0


def _train_config(args, phase: str) -> TrainConfig:
    kw = dict(iterations=args.iterations, schedule=parse_schedule(args.schedule),
              momentum=args.momentum, weight_decay=args.weight_decay,
              mining_patience=args.patience, validation_interval=args.val_interval,
              checkpoint_interval=args.checkpoint_interval, seed=args.seed)
    return TrainConfig.backbone(**kw) if phase == "backbone" else TrainConfig.branch(**kw)


def cmd_train_backbone(args, runlog: RunLog) -> int:
    data = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    runlog.phase("load")
    model = init_weights(NetworkConfig.for_k(args.K), seed=args.seed, std=_std(args.init_std))
    result = run_training(data, _train_config(args, "backbone"), "backbone", model, validation=val,
                          checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    runlog.phase("train")
    save_model(result.model, args.out)
    _write_losses(args.out, result)
    print(f"backbone trained for {result.state.iteration} iterations -> {args.out}")
    return 0


def cmd_train_branch(args, runlog: RunLog) -> int:
    data = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    model = load_model(_require(args.weights, "weights"))
    cfg = _train_config(args, "branch")
    pool = prepare_branch_pool(data, model, cfg)
    val_pool = prepare_branch_pool(val, model, cfg, seed=args.seed + 1) if val else None
    runlog.phase("prepare")
    result = run_training(pool, cfg, "branch", model, validation=val_pool,
                          checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    runlog.phase("train")
    save_model(result.model, args.out)
    _write_losses(args.out, result)
    print(f"branches trained for {result.state.iteration} iterations -> {args.out}")
    return 0


def _write_losses(weights_path, result) -> None:
    path = Path(str(weights_path) + ".loss.csv")
    rows = ["iteration,loss"] + [f"{i + 1},{l:.6f}" for i, l in enumerate(result.losses)]
    path.write_text("\n".join(rows) + "\n")


def cmd_infer(args, runlog: RunLog) -> int:
    model = load_model(_require(args.weights, "weights"))
    image = decode_image(_require(args.image, "image"))
    x0, y0 = 0, 0
    if args.box:
        x0, y0, w, h = (int(round(v)) for v in args.box)
        image = crop_region(image, x0, y0, w, h)
    res = detect_constrained_full(image, model)
    dets = [LandmarkDetection(k, x + x0, y + y0, float(s))
            for k, ((x, y), s) in enumerate(zip(res.points, res.scores))]
    runlog.phase("infer")
    sys.stdout.write(format_detections(dets))
    return 0


def _inference_config(args) -> InferenceConfig:
    return InferenceConfig(theta=args.theta, levels=args.levels)


def cmd_infer_wild(args, runlog: RunLog) -> int:
    model = load_model(_require(args.weights, "weights"))
    image = decode_image(_require(args.image, "image"))
    cfg = _inference_config(args)
    res = detect_unconstrained_full(image, model, cfg)
    runlog.phase("infer")
    text = format_detections(res.refined)
    if args.heatmaps:
        out = Path(args.heatmaps)
        out.mkdir(parents=True, exist_ok=True)
        for lvl in build_pyramid(image, cfg.levels, cfg):
            heat = backbone_maps(model, lvl.image)
            for k, channel in enumerate(heat):
                (out / f"level{lvl.index:02d}_type{k}.pgm").write_bytes(
                    encode_pgm(heatmap_to_gray(channel) / 255.0))
    _emit(text, args.out)
    return 0


def cmd_propose(args, runlog: RunLog) -> int:
    model = load_model(_require(args.weights, "weights"))
    image = decode_image(_require(args.image, "image"))
    dets = detect_unconstrained_full(image, model, _inference_config(args)).refined
    per_type = {}
    for d in dets:
        per_type.setdefault(d.k, []).append(d)
    top = [d for k in sorted(per_type) for d in per_type[k][: args.m]]
    boxes = suppress_proposals(landmarks_to_proposals(top))
    if args.enlarge:
        boxes = [enlarge_vertical(b, args.enlarge) for b in boxes]
    runlog.phase("propose")
    _emit(format_proposals(boxes), args.out)
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _constrained_predictions(args):
    model = load_model(_require(args.weights, "weights"))
    faces, images = load_faces(args.data)
    full, coarse, shifted = [], [], []
    for f in faces:
        crop, local = face_crop(images[f.image], f)
        res = detect_constrained_full(crop, model)
        full.append(res.points)
        coarse.append(res.coarse)
        shifted.append(local)
    return full, coarse, shifted


def _eval_config(args) -> EvalConfig:
    return EvalConfig(mode=args.mode)


def cmd_eval(args, runlog: RunLog) -> int:
    full, _, faces = _constrained_predictions(args)
    runlog.phase("infer")
    report = EvalReport(errors=mean_error(full, faces, _eval_config(args)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablate(args, runlog: RunLog) -> int:
    full, coarse, faces = _constrained_predictions(args)
    runlog.phase("infer")
    report = ablation_report(coarse, full, faces, _eval_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(report.to_text())
    (out / "ablation.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def cmd_gradcheck(args, runlog: RunLog) -> int:
    results = run_suite(args.seeds)
    runlog.phase("gradcheck")
    ok = True
    for name, err in results.items():
        passed = err <= TOLERANCE
        ok &= passed
        print(f"{name:<16} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def _add_train_flags(p, phase: str) -> None:
    p.add_argument("--data", required=True, help="dataset directory (annotations.txt, backgrounds.txt)")
    p.add_argument("--val-data", default=None, help="held-out dataset directory for validation")
    p.add_argument("--out", required=True, help="output weight file")
    if phase == "backbone":
        p.add_argument("--K", type=int, default=5, help="landmark types")
        p.add_argument("--init-std", default="0.01", help="init std, or 'he' for fan-in scaling")
        p.add_argument("--iterations", type=int, default=25_000)
        p.add_argument("--schedule", default="25000:0.001", help="until:lr pairs, comma separated")
    else:
        p.add_argument("--weights", required=True, help="weights holding the trained backbone")
        p.add_argument("--iterations", type=int, default=50_000)
        p.add_argument("--schedule", default="30000:1e-4,50000:1e-5", help="until:lr pairs, comma separated")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--patience", type=int, default=5, help="validation checks before hard-negative mining")
    p.add_argument("--val-interval", type=int, default=200)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--checkpoint-interval", type=int, default=1000)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint-dir")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="bbfcn", formatter_class=fmt,
                                     description="Cascaded fully convolutional facial landmark detector")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        p.add_argument("--run-log", default=None, help="run log path (default: run.log next to outputs)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--faces", type=int, default=500)
    p.add_argument("--backgrounds", type=int, default=500)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--min-faces", type=int, default=1)
    p.add_argument("--max-faces", type=int, default=1)
    p.add_argument("--face-min", type=float, default=36.0)
    p.add_argument("--face-max", type=float, default=52.0)

    _add_train_flags(add("train-backbone", cmd_train_backbone, "train the backbone network"), "backbone")
    _add_train_flags(add("train-branch", cmd_train_branch, "train the branch networks"), "branch")

    p = add("infer", cmd_infer, "constrained detection on one face image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--box", type=float, nargs=4, metavar=("X", "Y", "W", "H"), default=None,
                   help="face box to crop first")

    for name, func, text in (("infer-wild", cmd_infer_wild, "unconstrained pyramid detection"),
                             ("propose", cmd_propose, "face proposals from landmarks")):
        p = add(name, func, text)
        p.add_argument("--weights", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--theta", type=float, default=0.5)
        p.add_argument("--levels", type=int, default=20)
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        if name == "infer-wild":
            p.add_argument("--heatmaps", default=None, help="directory for per-level PGM heat maps")
        else:
            p.add_argument("--m", type=int, default=15, help="detections per type")
            p.add_argument("--enlarge", type=float, default=0.0, help="vertical enlargement fraction")

    for name, func, text in (("eval", cmd_eval, "constrained mean-error report"),
                             ("ablate", cmd_ablate, "backbone-only vs full-cascade report")):
        p = add(name, func, text)
        p.add_argument("--weights", required=True)
        p.add_argument("--data", required=True, help="annotation file or dataset directory")
        p.add_argument("--out", required=True, help="report directory")
        p.add_argument("--mode", default="eye-centers", choices=["eye-centers", "outer-corners", "bbox-fallback"])

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = read_config_file(_require(args.config, "config file"))
    except (OSError, ValueError) as exc:
        parser.error(str(exc))
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in dests or key in ("config", "help"):
            parser.error(f"unknown config key {key!r} for {args.command}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _default_log(args) -> str | None:
    if args.run_log is not None:
        return args.run_log or None
    out = getattr(args, "out", None)
    if out:
        p = Path(out)
        base = p if (p.is_dir() or args.command in ("synth", "eval", "ablate")) else p.parent
        return str(base / "run.log")
    return "run.log"


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    runlog = RunLog(_default_log(args), args)
    try:
        status = args.func(args, runlog)
    except (OSError, BBFCNError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        runlog.lines.append(f"error={exc}")
        status = 1
    runlog.lines.append(f"exit={status}")
    try:
        runlog.write()
    except OSError as exc:
        print(f"warning: cannot write run log: {exc}", file=sys.stderr)
    return status


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
