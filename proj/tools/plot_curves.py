#!/usr/bin/env python3
"""Plot loss curves emitted by `carrygpt pretrain-base --curves` or
`carrygpt train --curves`.

Usage: plot_curves.py curves.csv [more.csv ...] [-o out.png]
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    by_split = defaultdict(lambda: ([], []))
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            xs, ys = by_split[row["split"]]
            xs.append(int(row["step"]))
            ys.append(float(row["loss"]))
    return by_split


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csvs", nargs="+")
    parser.add_argument("-o", "--out", default="curves.png")
    parser.add_argument("--log-y", action="store_true")
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(8, 5))
    for path in args.csvs:
        for split, (xs, ys) in sorted(load(path).items()):
            label = f"{path}:{split}" if len(args.csvs) > 1 else split
            style = "-" if split == "train" else "o--"
            ax.plot(xs, ys, style, label=label, markersize=4)
    if args.log_y:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
