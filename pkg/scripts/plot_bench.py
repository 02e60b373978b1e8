#!/usr/bin/env python3
"""Render a bench CSV (method,iteration,objective) as a trace plot.

Usage: python scripts/plot_bench.py bench.csv -o bench.png
"""

import argparse
import csv
from collections import defaultdict


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv_path")
    parser.add_argument("-o", "--out", default="bench.png")
    args = parser.parse_args()

    traces = defaultdict(lambda: ([], []))
    with open(args.csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = traces[row["method"]]
            xs.append(int(row["iteration"]))
            ys.append(float(row["objective"]))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for method, (xs, ys) in sorted(traces.items()):
        ax.plot(xs, ys, label=method, marker="." if len(xs) < 5 else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("reconstruction objective")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
