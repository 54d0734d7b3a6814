"""CSV reports and figures for grid results."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable

from .experiment import ResultRecord, summarize

RECORD_FIELDS = ["method", "eps_p", "eps_f", "seed", "accuracy", "trainable", "total",
                 "achieved_eps_p", "achieved_eps_f", "delta"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_eps(s: str):
    return None if s == "" else float(s)


def _eps_order(e):
    return -math.inf if e is None else e


def _record_order(r):
    return (r.method, _eps_order(r.eps_p), _eps_order(r.eps_f), r.seed)


def write_records_csv(records: Iterable[ResultRecord], path) -> Path:
    """One row per (method, eps_p, eps_f, seed). Wall time is left out so
    reruns produce byte-identical files."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in sorted(records, key=_record_order):
            d = r.to_dict()
            w.writerow([_fmt(d[k]) for k in RECORD_FIELDS])
    return path


def read_records_csv(path) -> list[ResultRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ResultRecord(
                method=row["method"],
                eps_p=_parse_eps(row["eps_p"]),
                eps_f=_parse_eps(row["eps_f"]),
                seed=int(row["seed"]),
                accuracy=float(row["accuracy"]),
                trainable=int(row["trainable"]),
                total=int(row["total"]),
                achieved_eps_p=_parse_eps(row["achieved_eps_p"]),
                achieved_eps_f=_parse_eps(row["achieved_eps_f"]),
                delta=float(row["delta"]),
            ))
    return out


def write_summary_csv(records, path) -> Path:
    path = Path(path)
    summary = summarize(records)
    keys = sorted(summary, key=lambda k: (k[0], _eps_order(k[1]), _eps_order(k[2])))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "eps_p", "eps_f", "mean_accuracy", "std_accuracy", "n_seeds"])
        for k in keys:
            mean, std, n = summary[k]
            w.writerow([k[0], _fmt(k[1]), _fmt(k[2]), repr(mean), repr(std), n])
    return path


def pivot(records, method: str):
    """``(eps_p rows, eps_f cols, {(eps_p, eps_f): (mean, std)})`` for one method."""
    summary = {k[1:]: v[:2] for k, v in summarize(records).items() if k[0] == method}
    rows = sorted({k[0] for k in summary}, key=_eps_order)
    cols = sorted({k[1] for k in summary}, key=_eps_order)
    return rows, cols, summary


def write_pivot_csv(records, method: str, path) -> Path:
    """Pretraining budget down the rows, fine-tuning budget across the columns;
    each cell is ``mean±std`` over seeds."""
    path = Path(path)
    rows, cols, cells = pivot(records, method)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps_p \\ eps_f"] + [_fmt(c) or "none" for c in cols])
        for r in rows:
            line = [_fmt(r) or "none"]
            for c in cols:
                v = cells.get((r, c))
                line.append("" if v is None else f"{v[0]:.4f}±{v[1]:.4f}")
            w.writerow(line)
    return path


def read_pivot_csv(path):
    """Inverse of :func:`write_pivot_csv`: ``{(eps_p, eps_f): (mean, std)}``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [None if c == "none" else float(c) for c in header[1:]]
        out = {}
        for row in reader:
            r = None if row[0] == "none" else float(row[0])
            for c, cell in zip(cols, row[1:]):
                if cell:
                    m, s = cell.split("±")
                    out[(r, c)] = (float(m), float(s))
    return out


def write_param_counts_csv(records, path) -> Path:
    path = Path(path)
    seen = {}
    for r in records:
        seen.setdefault(r.method, (r.trainable, r.total))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "trainable", "total", "reduction_pct"])
        for m in sorted(seen):
            t, tot = seen[m]
            w.writerow([m, t, tot, f"{100.0 * (1 - t / tot):.4f}"])
    return path


def write_reports(records, out_dir, figures=True) -> list[Path]:
    """Write every CSV report (and figures) for ``records`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    paths = [
        write_records_csv(records, out / "records.csv"),
        write_summary_csv(records, out / "summary.csv"),
        write_param_counts_csv(records, out / "param_counts.csv"),
    ]
    for m in sorted({r.method for r in records}):
        paths.append(write_pivot_csv(records, m, out / f"pivot_{m}.csv"))
    if figures and records:
        from .plots import plot_all

        paths += plot_all(records, out / "figures")
    return paths
