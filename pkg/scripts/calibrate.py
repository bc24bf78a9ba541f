"""Sweep stem widths and report which one lands closest to the parameter target."""
import argparse
import dataclasses

from msdfnet.config import ModelConfig
from msdfnet.model import PARAM_RANGE, PARAM_TARGET, calibrate_stem_channels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--candidates", default="6,8,10,12")
    ap.add_argument("--head-reduction", type=int, default=ModelConfig().head_reduction)
    ap.add_argument("--classes", type=int, default=30)
    args = ap.parse_args()

    base = dataclasses.replace(ModelConfig(), head_reduction=args.head_reduction, num_classes=args.classes)
    candidates = [int(c) for c in args.candidates.split(",")]
    best, counts = calibrate_stem_channels(base, candidates, PARAM_TARGET)
    lo, hi = PARAM_RANGE
    for c0, n in counts.items():
        mark = "  <- chosen" if c0 == best else ""
        inside = "in range" if lo <= n <= hi else "out of range"
        print(f"C0={c0:3d}  {n:9d} params  ({inside}){mark}")


if __name__ == "__main__":
    main()
