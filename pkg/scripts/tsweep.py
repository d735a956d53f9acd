"""Train toy models for several unrolling depths and tabulate test PSNR against T.

    python3 scripts/tsweep.py --ts 2,4,8 --epochs 30
"""

import argparse
import time

import numpy as np

from _toy import fmt, toy_dataset, toy_operator
from ncccst.solvers import PinvData
from ncccst.unwavenet import ArchConfig, TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ts", default="2,4,8")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=3e-3)
    args = ap.parse_args()
    A = toy_operator()
    ds = toy_dataset(A)
    D = PinvData(A, 1e-3, np.float32)
    A32 = A.astype(np.float32)
    print("t,test_psnr_db,test_ssim,train_s")
    for t in map(int, args.ts.split(",")):
        t0 = time.time()
        ck = train(ds.train, A32, D, ArchConfig(t=t, c=8), TrainConfig(epochs=args.epochs, lr=args.lr))
        secs = time.time() - t0
        m = evaluate(ck, ds.test, A32, D)
        print(f"{t},{fmt(m.mean_psnr)},{m.mean_ssim:.4f},{secs:.0f}", flush=True)


if __name__ == "__main__":
    main()
