"""Parameter, multiply-accumulate and container-size table for several extractor widths."""
import argparse

from mghf.config import REFERENCE_PARAM_COUNT, DfeConfig
from mghf.dfe import dfe_param_report, init_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    ap.add_argument("--blocks", type=int, default=1)
    ap.add_argument("--hidden", type=int, default=None, help="shallow-CNN width (default N/2)")
    args = ap.parse_args()

    print(f"{'N':>5} {'hidden':>6} {'params':>10} {'MACs/px':>10} {'bytes':>10}")
    for n in args.channels:
        rep = dfe_param_report(init_model(DfeConfig(n_channels=n, n_blocks=args.blocks, hidden=args.hidden)))
        print(f"{n:>5} {rep['hidden']:>6} {rep['param_count']:>10} {rep['flops_per_pixel']:>10} {rep['bytes']:>10}")
    print(f"published reference at N=128, one block: {REFERENCE_PARAM_COUNT} parameters")


if __name__ == "__main__":
    main()
