"""Held-out PSNR with and without the SDF road prior on the corridor preset.

    python scripts/ablation_sdf.py --seeds 0 1 2 3 4 --iterations 1000 --out ablation.tsv
"""

import argparse
import csv
import sys

import numpy as np

from layersplat.experiments import sdf_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[1.0, 0.0])
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--preset", default="road-corridor")
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    rows = sdf_ablation(a.seeds, a.lambdas, a.iterations, a.preset)
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    w = csv.DictWriter(out, fieldnames=list(rows[0]), delimiter="\t")
    w.writeheader()
    w.writerows(rows)
    for lam in a.lambdas:
        med = np.median([r["test_psnr"] for r in rows if r["lambda_sdf"] == lam])
        print(f"# lambda_sdf={lam:g} median held-out PSNR {med:.3f}", file=sys.stderr)


if __name__ == "__main__":
    main()
