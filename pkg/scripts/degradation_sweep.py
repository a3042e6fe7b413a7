"""Score a reference texture against increasingly degraded copies.

Degradations are additive Gaussian noise and a box blur. Prints both the
naive and comprehensive objectives (and their parts) for each strength, so
the response of each term can be compared.
"""
import argparse

import numpy as np
from scipy.ndimage import uniform_filter

from mghf.config import DfeConfig, MghfConfig
from mghf.dfe import init_model, load_weights
from mghf.numerics import make_rng
from mghf.objective import embedding_head_for, mghf_c
from mghf.trainer import ToyDataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", help="trained weights (default: random 8-channel model)")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_weights(args.weights) if args.weights else init_model(DfeConfig(), identity=False, seed=args.seed)
    gt, _ = ToyDataset(classes=4, size=args.size, seed=args.seed, noise=0.0).sample(1)
    gt = np.clip(gt, 0.0, 1.0)
    cfg = MghfConfig()
    head = embedding_head_for(cfg)
    rng = make_rng(args.seed, 11)
    noise = rng.normal(size=gt.shape)

    print(f"{'degradation':<14} {'mghf_n':>10} {'csc':>10} {'lip':>10} {'mghf_c':>10}")
    cases = [("none", gt)]
    cases += [(f"noise {s:g}", np.clip(gt + s * noise, 0, 1)) for s in (0.02, 0.05, 0.1, 0.2)]
    cases += [(f"blur {k}", uniform_filter(gt, size=(1, k, k), mode="nearest")) for k in (3, 5, 9)]
    for name, sr in cases:
        rep, _ = mghf_c(model, gt, sr, cfg, head)
        print(f"{name:<14} {rep.mghf_n:>10.4g} {rep.csc_total:>10.4g} {rep.lip:>10.4g} {rep.mghf_c:>10.4g}")


if __name__ == "__main__":
    main()
