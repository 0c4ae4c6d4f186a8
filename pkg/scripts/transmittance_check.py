"""Mean |T_e - M| on road pixels of the plane preset for a sweep of lambda_tran."""

import argparse

from layersplat.experiments import transmittance_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 1.0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--sky", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print("lambda_tran\tbefore\tafter\ttrain_psnr\tseconds")
    for lam in a.lambdas:
        r = transmittance_check(lam, a.iterations, a.seed, a.sky)
        print(f"{lam:g}\t{r['before']:.4f}\t{r['after']:.4f}\t{r['train_psnr']:.3f}\t{r['seconds']:.1f}", flush=True)


if __name__ == "__main__":
    main()
