#!/usr/bin/env python3
"""Plot the per-frame dynamic-point ratio series from an eval stage output."""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("ratios_csv", type=Path, help="dynamic_ratios.csv from the eval stage")
    parser.add_argument("--out", type=Path, default=Path("dynamic_ratios.png"))
    args = parser.parse_args()

    frames, ratios = [], []
    with open(args.ratios_csv) as fh:
        for row in csv.DictReader(fh):
            frames.append(int(row["frame"]))
            ratios.append(float(row["dynamic_ratio"]))

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(frames, ratios, lw=1.2, color="firebrick")
    ax.fill_between(frames, ratios, alpha=0.25, color="firebrick")
    ax.set_xlabel("frame")
    ax.set_ylabel("dynamic point ratio")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
