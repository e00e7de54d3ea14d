#!/usr/bin/env python3
"""Print the rotary self-similarity profile and the in-margin vs cross-margin means.

    python3 scripts/rope_profile.py --margin 150 --length 8
"""

import argparse

import numpy as np

from synav.syn_rope import kernel_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--head-dim", type=int, default=8)
    ap.add_argument("--base", type=float, default=10000.0)
    ap.add_argument("--margin", type=int, default=150)
    ap.add_argument("--length", type=int, default=8)
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    offsets = np.arange(0, 2 * args.margin + 1)
    prof = np.asarray(kernel_profile(args.head_dim, args.base, offsets, args.samples, args.seed))
    intra = prof[1:args.length + 1].mean()
    lo, hi = args.margin - args.length, args.margin + args.length
    cross = prof[lo:hi + 1].mean()
    for o in range(0, len(offsets), max(1, len(offsets) // 30)):
        print(f"{o:5d} {prof[o]: .4f} {'#' * int(round(max(prof[o], 0) * 40))}")
    print(f"mean offset 1..{args.length}: {intra:.4f}")
    print(f"mean offset {lo}..{hi}: {cross:.4f}")


if __name__ == "__main__":
    main()
