"""Train and evaluate the desk-scale synthetic experiment.

Usage: python3 scripts/run_synthetic_experiment.py OUT_DIR [--seed N]
"""

import argparse
import logging
import time

from bbfcn.experiment import ExperimentConfig, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t = time.perf_counter()
    result = run_experiment(ExperimentConfig(seed=args.seed), args.out)
    print(result.report)
    for name, seconds in result.timings.items():
        print(f"time.{name}={seconds:.1f}s")
    print(f"total={time.perf_counter() - t:.1f}s")
    print(f"loss ratio (last/first 50 iterations): backbone={result.loss_ratio(result.backbone_losses):.3f} "
          f"branch={result.loss_ratio(result.branch_losses):.3f}")


if __name__ == "__main__":
    main()
