"""Fit the road SDF prior to a sinusoidal strip and report recovery errors."""

import argparse

from layersplat.experiments import sdf_strip


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--amplitude", type=float, default=0.2)
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    res = sdf_strip(a.points, a.amplitude, a.iterations, a.batch, a.width, seed=a.seed)
    for k, v in res.items():
        print(f"{k}\t{v:.6f}")


if __name__ == "__main__":
    main()
