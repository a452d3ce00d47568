#!/usr/bin/env python3
"""Accident-rate convergence figure (running estimate with its 90% confidence
band) from a per-episode outcome log, plus an accident-type bar chart from
the summary JSON."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from plot_common import (
    load_outcomes_csv,
    load_summary_json,
    run_cli,
    save_both,
)

Z90 = 1.6449  # two-sided 90% normal quantile


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outcomes", required=True, help="av_outcomes.csv")
    ap.add_argument("--summary", default=None, help="accident_rate.json")
    ap.add_argument("--out-dir", default="figs")
    args = ap.parse_args(argv)

    def render():
        df = load_outcomes_csv(args.outcomes)
        outcomes = df["accident"].to_numpy().astype(float)
        n = np.arange(1, len(outcomes) + 1)
        running = np.cumsum(outcomes) / n
        half = Z90 * np.sqrt(np.maximum(running * (1 - running), 0.0) / n)
        fig, ax = plt.subplots(figsize=(8, 4.5))
        ax.plot(n, running, lw=1.2, label="running estimate")
        ax.fill_between(n, np.maximum(running - half, 0.0), running + half,
                        alpha=0.3, label="90% confidence band")
        ax.set_xlabel("number of tests")
        ax.set_ylabel("accident rate")
        ax.set_title("Accident-rate estimate vs number of tests")
        ax.legend()
        stem = "accident_rate_convergence"
        suffix = ""
        summary = None
        if args.summary:
            summary = load_summary_json(args.summary)
            suffix = "_" + summary.get("config_hash", "")[:8] if summary.get("config_hash") else ""
        written = save_both(fig, Path(args.out_dir), stem + suffix)
        plt.close(fig)
        if summary is not None:
            types = summary["accident_types"]
            fig2, ax2 = plt.subplots(figsize=(6, 4))
            labels = sorted(types) or ["none"]
            values = [types.get(k, 0) for k in labels]
            ax2.bar(labels, values, color="tab:red", alpha=0.8)
            ax2.set_ylabel("accidents")
            ax2.set_title("Accident types")
            ax2.tick_params(axis="x", rotation=20)
            written += save_both(fig2, Path(args.out_dir), "accident_types" + suffix)
            plt.close(fig2)
        print("wrote " + ", ".join(str(p) for p in written))
        return 0

    return run_cli(render)


if __name__ == "__main__":
    sys.exit(main())
