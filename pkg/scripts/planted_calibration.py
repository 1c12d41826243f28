"""Generate SMAG-LES data with a known constant and check the sweep recovers it."""
import argparse
import time

import torch

from skewles import pipeline as P
from skewles.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cs", type=float, default=0.17)
    ap.add_argument("--config")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    t0 = time.time()
    data = P.generate_planted_data(cfg, args.cs)
    cs, table = P.calibrate_smagorinsky(data, cfg)
    for c, misfit in table:
        print(f"{c:5.2f}  {misfit:.6e}")
    print(f"planted {args.cs}, recovered {cs} in {time.time() - t0:.0f}s")
    return 0 if cs == args.cs else 1


if __name__ == "__main__":
    raise SystemExit(main())
