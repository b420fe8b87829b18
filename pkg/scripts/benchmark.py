"""Time constrained and unconstrained inference.

Usage: python3 scripts/benchmark.py [--weights FILE] [--levels 7] [--repeats 20]
Without weights a He-initialized model is timed; its candidate count differs from a trained one.
"""

import argparse
import time

import numpy as np

from bbfcn.inference import InferenceConfig, detect_constrained, detect_unconstrained_full
from bbfcn.nets import NetworkConfig, init_weights, load_model
from bbfcn.synthetic import SyntheticConfig, generate_synthetic


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--weights", default=None)
    parser.add_argument("--levels", type=int, default=7)
    parser.add_argument("--theta", type=float, default=0.5)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    model = load_model(args.weights) if args.weights else init_weights(NetworkConfig(), std="he")

    faces = [generate_synthetic(SyntheticConfig(seed=31), i)[0] for i in range(args.repeats)]
    detect_constrained(faces[0], model)
    t = time.perf_counter()
    for face in faces:
        detect_constrained(face, model)
    print(f"constrained: {(time.perf_counter() - t) / len(faces) * 1000:.1f} ms/face")

    cfg = SyntheticConfig(canvas=(480, 640), face_count=(2, 4), face_scale=(60, 140), seed=32)
    times, counts = [], []
    for i in range(3):
        image, _ = generate_synthetic(cfg, i)
        t = time.perf_counter()
        res = detect_unconstrained_full(image, model, InferenceConfig(theta=args.theta, levels=args.levels))
        times.append(time.perf_counter() - t)
        counts.append(len(res.refined))
    print(f"unconstrained 640x480, {args.levels} levels: median {np.median(times):.2f} s, "
          f"detections {counts}")


if __name__ == "__main__":
    main()
