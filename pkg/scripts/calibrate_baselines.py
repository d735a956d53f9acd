"""Tune the classical baselines on the validation split, then score them on test.

    python3 scripts/calibrate_baselines.py --lams 100,300,1000,3000 --iters 500,1000
"""

import argparse
import time

from _toy import fmt, toy_dataset, toy_operator
from ncccst.solvers import SolverConfig, chambolle_pock_tv, pinv_reconstruct
from ncccst.unwavenet import evaluate_reconstructor


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--lams", default="100,300,1000,3000")
    ap.add_argument("--iters", default="500")
    ap.add_argument("--taus", default="1e-4,1e-3,1e-2")
    args = ap.parse_args()
    A = toy_operator()
    ds = toy_dataset(A)

    print("method,param,val_psnr_db,seconds")
    best_tau, best = None, -1.0
    for tau in map(float, args.taus.split(",")):
        t0 = time.time()
        v = evaluate_reconstructor(lambda s: pinv_reconstruct(A, s.sinogram, tau), ds.val).mean_psnr
        print(f"pinv,tau={tau:g},{fmt(v)},{time.time() - t0:.1f}", flush=True)
        if v > best:
            best_tau, best = tau, v
    best_tv, best = None, -1.0
    for it in map(int, args.iters.split(",")):
        for lam in map(float, args.lams.split(",")):
            cfg = SolverConfig(max_iters=it, lam=lam)
            t0 = time.time()
            v = evaluate_reconstructor(lambda s: chambolle_pock_tv(A, s.sinogram, cfg).image, ds.val).mean_psnr
            print(f"tv,lam={lam:g};iters={it},{fmt(v)},{time.time() - t0:.1f}", flush=True)
            if v > best:
                best_tv, best = cfg, v

    pinv = evaluate_reconstructor(lambda s: pinv_reconstruct(A, s.sinogram, best_tau), ds.test).mean_psnr
    tv = evaluate_reconstructor(lambda s: chambolle_pock_tv(A, s.sinogram, best_tv).image, ds.test).mean_psnr
    print(f"# test: pinv(tau={best_tau:g}) {fmt(pinv)} dB, tv(lam={best_tv.lam:g}, "
          f"iters={best_tv.max_iters}) {fmt(tv)} dB")


if __name__ == "__main__":
    main()
