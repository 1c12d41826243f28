"""Desk-scale training and decaying-turbulence comparison in one process.

Prints the relative training loss per epoch, the error series of NC, SMAG and SKEW
and the spectrum errors, and leaves all CSVs in the run directory.
"""
import argparse
import logging

import torch

from skewles import pipeline as P
from skewles.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir")
    ap.add_argument("--config")
    ap.add_argument("--variant", default="SKEW")
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    run = P.prepare_run_dir(args.run_dir, cfg)
    data = P.generate_training_data(cfg, run)
    model, hist = P.train_closure(args.variant, data[cfg.train_coarse], cfg, run_dir=run)
    print("relative loss:", " ".join(f"{h.relative_loss:.3f}" for h in hist))
    rep = P.run_decaying_experiment({args.variant: model}, cfg, run)
    for name, r in rep["results"].items():
        err = " ".join(f"{e:.3f}" for e in r["error"][::10])
        print(f"{name:5s} stable={r['stable']} spectrum error mid {r['spectrum_error']['mid']:.3f} "
              f"final {r['spectrum_error']['final']:.3f}\n      error: {err}")


if __name__ == "__main__":
    main()
