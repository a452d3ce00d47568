"""Shared loading/validation for the figure scripts.

These scripts consume the simulator CLI's documented file schemas and nothing
else; any deviation fails fast with a message naming the offending file.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import matplotlib
import pandas as pd

matplotlib.use("Agg")

HIST_COLUMNS = ["edge_lo", "edge_hi", "count", "normalized"]
OUTCOME_COLUMNS = ["episode", "accident", "accident_type", "distance_m", "steps"]


class SchemaError(RuntimeError):
    pass


def load_histogram_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"histogram file not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in HIST_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(
            f"{path}: not a histogram CSV, missing columns {missing} "
            f"(expected {HIST_COLUMNS})")
    if len(df) == 0:
        raise SchemaError(f"{path}: histogram CSV has no rows")
    return df


def load_outcomes_csv(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"outcome log not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in OUTCOME_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(
            f"{path}: not an AV outcome log, missing columns {missing} "
            f"(expected {OUTCOME_COLUMNS})")
    if len(df) == 0:
        raise SchemaError(f"{path}: outcome log has no rows")
    return df


def load_summary_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"summary JSON not found: {path}")
    data = json.loads(path.read_text())
    for key in ("accident_types", "accidents", "tests"):
        if key not in data:
            raise SchemaError(f"{path}: not an accident_rate.json (missing {key!r})")
    return data


def save_both(fig, out_dir: Path, stem: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for ext in ("png", "svg"):
        p = out_dir / f"{stem}.{ext}"
        fig.savefig(p, dpi=150, bbox_inches="tight")
        written.append(p)
    return written


def run_cli(fn) -> int:
    try:
        return fn()
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SchemaError as err:
        print(f"schema mismatch: {err}", file=sys.stderr)
        return 2
