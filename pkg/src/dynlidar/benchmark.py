"""Point-level precision/recall evaluation and parameter sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .scan import Label, LabelImage


@dataclass(frozen=True)
class ScanCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class PRReport:
    counts: list
    p_total: float | None
    r_total: float | None
    p_average: float | None
    r_average: float | None
    n_p: int
    n_r: int

    def row(self):
        return [self.p_total, self.r_total, self.p_average, self.r_average]


def _labels(x):
    if isinstance(x, LabelImage):
        return x.labels
    if hasattr(x, "labels"):
        return np.asarray(x.labels)
    return np.asarray(x)


def count_scan(pred, truth, mask=None) -> ScanCounts:
    """TP/FP/FN over cells valid in both grids (optionally also inside ``mask``)."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {t.shape}")
    valid = (p != Label.INVALID) & (t != Label.INVALID)
    if mask is not None:
        valid &= mask
    pd = (p == Label.DYNAMIC) & valid
    td = (t == Label.DYNAMIC) & valid
    return ScanCounts(int(np.sum(pd & td)), int(np.sum(pd & ~td)), int(np.sum(~pd & td & valid)))


def _ratio(num, den, exact=False):
    if den == 0:
        return None
    return Fraction(num, den) if exact else num / den


def pr_total(counts, exact=False):
    """Pooled precision and recall; ``None`` where a denominator is zero."""
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    return _ratio(tp, tp + fp, exact), _ratio(tp, tp + fn, exact)


def pr_average(counts, exact=False):
    """Per-scan precision/recall averaged over scans with defined ratios.

    Returns ``(P_a, R_a, N_p, N_r)``.
    """
    ps = [_ratio(c.tp, c.tp + c.fp, exact) for c in counts]
    rs = [_ratio(c.tp, c.tp + c.fn, exact) for c in counts]
    ps = [p for p in ps if p is not None]
    rs = [r for r in rs if r is not None]
    p_a = sum(ps, Fraction(0) if exact else 0.0) / len(ps) if ps else None
    r_a = sum(rs, Fraction(0) if exact else 0.0) / len(rs) if rs else None
    return p_a, r_a, len(ps), len(rs)


def evaluate(preds, truths) -> PRReport:
    counts = [count_scan(p, t) for p, t in zip(preds, truths, strict=True)]
    return report_from_counts(counts)


def report_from_counts(counts) -> PRReport:
    p_t, r_t = pr_total(counts)
    p_a, r_a, n_p, n_r = pr_average(counts)
    return PRReport(list(counts), p_t, r_t, p_a, r_a, n_p, n_r)


def fmt(v) -> str:
    """CSV token: ``nan`` for absent metrics; strings pass through."""
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return repr(float(v))


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def parse_values(spec: str):
    """``start:step:stop`` (inclusive) or comma-separated values."""
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        start, step, stop = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ValueError("sweep step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(max(n, 0))]
    return [float(x) for x in spec.split(",")]


def sweep(run, cfg, param: str, values):
    """One full detection run per value of ``param``.

    ``run(cfg)`` must return ``(preds, truths)``. Rows are
    ``(value, P_t, R_t, P_a, R_a)`` sorted by value.
    """
    if param not in {f for f in cfg.__dataclass_fields__}:
        raise ValueError(f"unknown sweep parameter {param!r}")
    rows = []
    for v in sorted(values):
        typ = type(getattr(cfg, param)) if getattr(cfg, param) is not None else float
        report = evaluate(*run(cfg.replace(**{param: typ(v)})))
        rows.append([v, *report.row()])
    return rows


SWEEP_HEADER = ["value", "P_t", "R_t", "P_a", "R_a"]
RANGE_HEADER = ["limit", "R_t", "R_a"]


def recall_vs_range(preds, truths, ranges, limits):
    """Total and average recall restricted to cells with range <= limit.

    ``ranges`` holds the per-cell measured range grid of every scan.
    """
    rows = []
    for lim in limits:
        counts = [count_scan(p, t, mask=np.asarray(r) <= lim)
                  for p, t, r in zip(preds, truths, ranges, strict=True)]
        _, r_t = pr_total(counts)
        _, r_a, _, _ = pr_average(counts)
        rows.append([lim, r_t, r_a])
    return rows
