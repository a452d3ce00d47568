#!/usr/bin/env python3
"""Overlaid distribution figure from two or more histogram CSVs.

Each positional argument is LABEL=path/to/hist.csv; all histograms must share
one bin grid. One bar series per source, semi-transparent so overlaps stay
readable.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from plot_common import load_histogram_csv, run_cli, save_both


def parse_sources(items):
    out = []
    for item in items:
        if "=" not in item:
            raise SystemExit(f"usage: sources are LABEL=path.csv, got {item!r}")
        label, path = item.split("=", 1)
        out.append((label, path))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("sources", nargs="+", help="LABEL=path.csv (two or more)")
    ap.add_argument("--out-dir", default="figs")
    ap.add_argument("--stem", default=None, help="output file stem")
    ap.add_argument("--xlabel", default=None)
    args = ap.parse_args(argv)
    sources = parse_sources(args.sources)
    if len(sources) < 2:
        print("error: need at least two sources to overlay", file=sys.stderr)
        return 2

    def render():
        frames = [(label, load_histogram_csv(path)) for label, path in sources]
        edges0 = frames[0][1]["edge_lo"].to_numpy()
        for label, df in frames[1:]:
            if len(df) != len(frames[0][1]) or \
                    not np.allclose(df["edge_lo"], edges0):
                from plot_common import SchemaError
                raise SchemaError(f"{label}: bin grid differs from {frames[0][0]}")
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for label, df in frames:
            lo = df["edge_lo"].to_numpy()
            hi = df["edge_hi"].to_numpy()
            ax.bar(lo, df["normalized"], width=hi - lo, align="edge",
                   alpha=0.55, label=label, edgecolor="none")
        ax.set_xlabel(args.xlabel or "value")
        ax.set_ylabel("probability")
        ax.legend()
        ax.set_title("Distribution comparison")
        stem = args.stem or ("distributions_" +
                             "_".join(label for label, _ in sources))
        written = save_both(fig, Path(args.out_dir), stem)
        plt.close(fig)
        print("wrote " + ", ".join(str(p) for p in written))
        return 0

    return run_cli(render)


if __name__ == "__main__":
    sys.exit(main())
