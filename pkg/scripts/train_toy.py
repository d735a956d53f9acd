"""Train the toy UnWave-Net on 200 noisy phantoms and report test PSNR every few epochs.

    python3 scripts/train_toy.py --t 4 --epochs 30 --lr 3e-3 --out runs/toy_t4.uwnc
"""

import argparse
import time

import numpy as np

from _toy import fmt, toy_dataset, toy_operator
from ncccst.solvers import PinvData
from ncccst.unwavenet import ArchConfig, TrainConfig, evaluate, save_checkpoint, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--t", type=int, default=4)
    ap.add_argument("--c", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--data-tau", type=float, default=1e-3, help="Tikhonov damping of the pseudo-inverse D")
    ap.add_argument("--eval-every", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    A = toy_operator()
    ds = toy_dataset(A)
    D = PinvData(A, args.data_tau, np.float32)
    A32 = A.astype(np.float32)
    t0 = time.time()

    def on_epoch(ck):
        if ck.epoch % args.eval_every == 0 or ck.epoch == args.epochs:
            m = evaluate(ck, ds.test, A32, D)
            print(f"epoch {ck.epoch} test psnr {fmt(m.mean_psnr)} dB ssim {m.mean_ssim:.4f} "
                  f"elapsed {time.time() - t0:.0f} s", flush=True)

    ck = train(ds.train, A32, D, ArchConfig(t=args.t, c=args.c), TrainConfig(epochs=args.epochs, lr=args.lr),
               log=print, epoch_callback=on_epoch)
    if args.out:
        save_checkpoint(args.out, ck)
    print(f"training took {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
