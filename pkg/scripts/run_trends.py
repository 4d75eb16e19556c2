"""Train Micro Full-ANN / Full-SNN / Hybrid and the FireFlowNet position sweep; print medians and energies.

    python scripts/run_trends.py -o results/trends.json
"""
import argparse
import logging

import numpy as np

from hybridflow.experiments import TrendConfig, run_trends


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--output", default="trends.json")
    ap.add_argument("--epochs", type=int, default=None, help="override EV-FlowNet epochs")
    ap.add_argument("--samples", type=int, default=None, help="override dataset size (80:20 split)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrendConfig()
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.samples is not None:
        cfg.data.n_samples = args.samples
    result = run_trends(cfg)
    with open(args.output, "w") as f:
        f.write(result.to_json())

    print("EV-FlowNet Micro test AEE (per seed, median):")
    for label, vals in result.evflownet.items():
        print(f"  {label:>9}: {np.round(vals, 4).tolist()}  median {np.median(vals):.4f}")
    print("FireFlowNet spiking-layer position sweep:")
    for name, vals in result.fireflownet.items():
        print(f"  {name:>3}: {np.round(vals, 4).tolist()}  median {np.median(vals):.4f}")
    print("energy (mJ) of seed-0 networks on one test sample:")
    for label, e in result.energy_mJ.items():
        print(f"  {label:>9}: {e:.6f}")
    print("Full-SNN / Full-ANN energy at fixed sparsity:",
          ", ".join(f"{s:.2f}->{r:.3f}" for s, r in result.sparsity_sweep))
    print(f"wall clock {result.seconds:.0f} s")


if __name__ == "__main__":
    main()
