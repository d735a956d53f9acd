"""Per-forward-pass timing of the LL-subband and full-resolution regularizer blocks.

    python3 scripts/bench_attention.py --sizes 64,128,256 --c 16
"""

import argparse

from ncccst.cli import bench_regularizer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", default="64,128")
    ap.add_argument("--c", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    print("size,ll_ms,fullres_ms,speedup")
    for s in map(int, args.sizes.split(",")):
        ll, _ = bench_regularizer("ll", s, args.c, repeats=args.repeats)
        full, _ = bench_regularizer("fullres", s, args.c, repeats=args.repeats)
        print(f"{s},{ll:.2f},{full:.2f},{full / ll:.2f}", flush=True)


if __name__ == "__main__":
    main()
