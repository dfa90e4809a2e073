"""Seed-level aggregation of results CSVs into curve tables."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy import stats

CURVE_COLUMNS = [
    "strategy", "rule", "iteration", "n_train_units", "n_seeds",
    "dsc_mean", "dsc_std", "dsc_ci_low", "dsc_ci_high",
    "rac_mean", "rac_std", "rac_ci_low", "rac_ci_high",
]
_REQUIRED = ("run_id", "strategy", "seed", "rule", "iteration", "n_train_units", "dsc_mean", "rac_mean")
_SKIP = {"summary.csv", "curves.csv"}


def mean_std_ci(values) -> tuple[float, float, float, float]:
    """Mean, sample std (ddof=1, 0 for one value) and t-based 95% CI."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    # shifted by the first value so identical inputs give exactly (v, 0, v, v)
    d = x - x[0]
    mean = float(x[0] + d.mean())
    if n < 2:
        return mean, 0.0, mean, mean
    std = float(d.std(ddof=1))
    half = float(stats.t.ppf(0.975, n - 1)) * std / math.sqrt(n)
    return mean, std, mean - half, mean + half


def read_results(results_dir) -> tuple[list[dict], int]:
    """All well-formed rows of every results CSV below ``results_dir``.

    Returns ``(rows, n_skipped)``.
    """
    rows, skipped = [], 0
    for path in sorted(Path(results_dir).rglob("*.csv")):
        if path.name in _SKIP:
            continue
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(_REQUIRED) <= set(reader.fieldnames):
                continue
            for raw in reader:
                try:
                    row = dict(raw)
                    row["seed"] = int(row["seed"])
                    row["iteration"] = int(row["iteration"])
                    row["n_train_units"] = int(row["n_train_units"])
                    row["dsc_mean"] = float(row["dsc_mean"])
                    row["rac_mean"] = float(row["rac_mean"])
                    if not (math.isfinite(row["dsc_mean"]) and math.isfinite(row["rac_mean"])):
                        raise ValueError
                except (TypeError, ValueError, KeyError):
                    skipped += 1
                    continue
                rows.append(row)
    return rows, skipped


def aggregate(rows) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["strategy"], r["rule"], r["iteration"])].append(r)
    out = []
    for (strategy, rule, it), members in sorted(groups.items()):
        members = sorted(members, key=lambda r: r["seed"])
        d = mean_std_ci([m["dsc_mean"] for m in members])
        a = mean_std_ci([m["rac_mean"] for m in members])
        out.append(
            dict(
                strategy=strategy, rule=rule, iteration=it,
                n_train_units=members[0]["n_train_units"], n_seeds=len(members),
                dsc_mean=d[0], dsc_std=d[1], dsc_ci_low=d[2], dsc_ci_high=d[3],
                rac_mean=a[0], rac_std=a[1], rac_ci_low=a[2], rac_ci_high=a[3],
            )
        )
    return out


def curves_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for c in curves:
        w.writerow([repr(c[k]) if isinstance(c[k], float) else str(c[k]) for k in CURVE_COLUMNS])
    return buf.getvalue()


def write_report(results_dir, out_path=None) -> tuple[Path, int]:
    """Aggregate ``results_dir`` into ``curves.csv``; returns path and skip count."""
    rows, skipped = read_results(results_dir)
    if not rows:
        raise FileNotFoundError(f"no results rows under {results_dir}")
    out_path = Path(out_path) if out_path else Path(results_dir) / "curves.csv"
    out_path.write_text(curves_csv(aggregate(rows)))
    return out_path, skipped


def curve(curves, strategy: str, column: str = "dsc_mean") -> dict[int, float]:
    """``{iteration: value}`` for one strategy of an aggregated table."""
    return {c["iteration"]: c[column] for c in curves if c["strategy"] == strategy}


def first_reaching(curves, strategy: str, target: float, tol: float = 0.0, column: str = "dsc_mean"):
    """First iteration whose seed mean is within ``tol`` of ``target``, else None."""
    for it, value in sorted(curve(curves, strategy, column).items()):
        if value >= target - tol:
            return it
    return None
