"""Generate the synthetic door-time residual pool shipped with the package.

The residuals are log-space errors of a door-time predictor. They are drawn
i.i.d. normal (sd 1.0, truncated at +-2.2), centred, and grouped into routes
of 15 consecutive stops so the autocorrelation check has route structure.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "coldchain" / "data" / "residuals.csv"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--routes", type=int, default=480)
    ap.add_argument("--stops", type=int, default=15)
    ap.add_argument("--sd", type=float, default=1.0)
    ap.add_argument("--clip", type=float, default=2.2)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    n = args.routes * args.stops
    vals = []
    while len(vals) < n:
        x = rng.normal(0.0, args.sd)
        if abs(x) <= args.clip:
            vals.append(x)
    eps = np.array(vals) - np.mean(vals)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["route_id", "stop_seq", "residual_log_s"])
        for k, e in enumerate(eps):
            w.writerow([k // args.stops, k % args.stops, f"{e:.10f}"])
    print(f"wrote {n} residuals to {args.out}")


if __name__ == "__main__":
    main()
