#!/usr/bin/env python3
"""Synthetic method comparison: ADMM vs the alternating baselines.

Runs the fixed suite (20 seeds x {2:4, 4:8} x rank {0, 2, 8}, 32x32
layers) and writes per-cell medians to CSV, plus an optional per-seed
objective-vs-iteration plot for one cell when matplotlib is available.

Usage: python scripts/compare_methods.py --out results/ [--seeds 20]
"""

import argparse
import csv
from pathlib import Path

import numpy as np

import slrd
from slrd.baselines import AltMinConfig, alt_min, oats


def make_problem(seed, n, pattern, rank, scale=0.2, total=128, lam=0.01):
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((n, n))
    mix = np.eye(n) + rng.standard_normal((n, n)) / np.sqrt(n)
    x = rng.standard_normal((total, n)) @ mix * np.sqrt(scale / total)
    return slrd.LayerProblem.from_activations(weights, x, lam, pattern, rank)


def run_cell(pattern, rank, seeds, n):
    rows = []
    traces = []
    for seed in range(seeds):
        prob = make_problem(1000 * pattern.m + 10 * rank + seed, n, pattern, rank)
        cfg = slrd.RunConfig(
            sparsity=pattern, rank=rank, max_iters=200, tol_abs=0, tol_rel=0
        )
        _, _, rep_admm = slrd.solve_admm(prob, cfg)
        _, _, rep_alt = alt_min(prob, AltMinConfig(steps=80))
        _, _, rep_oats = oats(prob, AltMinConfig(steps=80))
        rows.append(
            (
                rep_admm.final_objective,
                rep_alt.final_objective,
                rep_oats.final_objective,
            )
        )
        traces.append(
            {
                "admm": rep_admm.objectives(),
                "altmin": rep_alt.objectives(),
                "oats": rep_oats.objectives(),
            }
        )
    return np.array(rows), traces


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("results"))
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--n", type=int, default=32)
    parser.add_argument("--plot", action="store_true")
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    cells = []
    plot_traces = None
    for nm in ((2, 4), (4, 8)):
        for rank in (0, 2, 8):
            pattern = slrd.SemiStructured(*nm)
            arr, traces = run_cell(pattern, rank, args.seeds, args.n)
            med = np.median(arr, axis=0)
            cells.append((f"{nm[0]}:{nm[1]}", rank, *med))
            if nm == (2, 4) and rank == 2:
                plot_traces = traces[0]
            print(
                f"{nm[0]}:{nm[1]} rank={rank}: admm {med[0]:.4f}  "
                f"altmin {med[1]:.4f}  oats {med[2]:.4f}"
            )

    with open(args.out / "method_comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pattern", "rank", "admm", "altmin", "oats"])
        writer.writerows(cells)
    print(f"wrote {args.out / 'method_comparison.csv'}")

    if args.plot and plot_traces is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for method, ys in plot_traces.items():
            ax.plot(range(1, len(ys) + 1), ys, label=method)
        ax.set_xlabel("iteration")
        ax.set_ylabel("reconstruction objective")
        ax.set_yscale("log")
        ax.set_title("2:4 + rank 2, one seed")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.out / "objective_traces.png", dpi=150)
        print(f"wrote {args.out / 'objective_traces.png'}")


if __name__ == "__main__":
    main()
