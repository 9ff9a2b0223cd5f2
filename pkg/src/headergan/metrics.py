"""Per-field fidelity metrics: JS divergence for discrete fields, range-normalised EMD for continuous ones."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ShapeError, TraceFormatError
from .trace_io import CONTINUOUS_FIELDS, DISCRETE_FIELDS, TraceDataset

DEFAULT_BINS = 100


@dataclass(frozen=True)
class FieldHistogram:
    kind: str  # "discrete" | "continuous"
    probs: np.ndarray
    support: tuple = ()  # discrete tokens, aligned with probs
    lo: float = 0.0
    hi: float = 0.0

    @property
    def bins(self) -> int:
        return len(self.probs)


def histogram(values, kind: str, support=None, lo=None, hi=None, bins: int = DEFAULT_BINS) -> FieldHistogram:
    """Normalised histogram of ``values``.

    Discrete: mass per token over ``support`` (defaults to the observed tokens, sorted).
    Continuous: mass per equal-width bin over [lo, hi]; a zero-width range is one bin.
    """
    values = list(values)
    if not values:
        raise TraceFormatError("histogram of an empty sample")
    n = len(values)
    if kind == "discrete":
        counts = Counter(str(v) for v in values)
        support = tuple(sorted(counts)) if support is None else tuple(support)
        missing = set(counts) - set(support)
        if missing:
            raise ShapeError(f"values outside the support: {sorted(missing)[:5]}")
        probs = np.array([counts.get(t, 0) for t in support], dtype=float) / n
        return FieldHistogram("discrete", probs, support=support)
    if kind != "continuous":
        raise ValueError(f"unknown histogram kind {kind!r}")
    x = np.asarray(values, dtype=float)
    lo = float(x.min()) if lo is None else float(lo)
    hi = float(x.max()) if hi is None else float(hi)
    if hi <= lo:
        return FieldHistogram("continuous", np.ones(1), lo=lo, hi=lo)
    counts, _ = np.histogram(x, bins=bins, range=(lo, hi))
    return FieldHistogram("continuous", counts / counts.sum(), lo=lo, hi=hi)


def _as_probs(h) -> np.ndarray:
    return np.asarray(h.probs if isinstance(h, FieldHistogram) else h, dtype=float)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits; 0 <= JS <= 1."""
    if isinstance(p, FieldHistogram) and isinstance(q, FieldHistogram) and p.support != q.support:
        raise ShapeError("JS divergence needs histograms over the same support")
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ShapeError(f"support mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return float(min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), 1.0))


def emd_normalized(p, q, lo: float | None = None, hi: float | None = None) -> float:
    """1-D EMD between histograms on shared bins, divided by the value range.

    With bins of width w = (hi - lo) / B the normalised distance is
    sum |CDF_p - CDF_q| / B; ranges come from the histograms when not given.
    """
    if isinstance(p, FieldHistogram) and isinstance(q, FieldHistogram):
        if (p.lo, p.hi, p.bins) != (q.lo, q.hi, q.bins):
            raise ShapeError("EMD needs histograms on identical bins")
        lo, hi = p.lo, p.hi
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ShapeError(f"bin mismatch: {p.shape} vs {q.shape}")
    if lo is not None and hi is not None and hi <= lo:
        return 0.0
    cdf_gap = np.abs(np.cumsum(p) - np.cumsum(q))
    # the last CDF entry is 1 for both; dropping it avoids rounding residue
    return float(min(cdf_gap[:-1].sum() / len(p), 1.0))


@dataclass(frozen=True)
class MetricRow:
    variant: str
    field: str
    metric: str  # "js" | "emd_norm"
    value: float


def evaluate(real: TraceDataset, synth: TraceDataset, schema=None, bins: int = DEFAULT_BINS, variant: str = "synthetic") -> list[MetricRow]:
    """JS for the 7 discrete fields and normalised EMD for the 3 continuous fields."""
    if len(real) == 0 or len(synth) == 0:
        raise TraceFormatError("evaluate needs two non-empty datasets")
    rows = []
    for f in DISCRETE_FIELDS:
        a, b = [str(v) for v in real.column(f)], [str(v) for v in synth.column(f)]
        support = tuple(sorted(set(a) | set(b)))
        rows.append(MetricRow(variant, f, "js", js_divergence(histogram(a, "discrete", support), histogram(b, "discrete", support))))
    for f in CONTINUOUS_FIELDS:
        a, b = np.asarray(real.column(f), float), np.asarray(synth.column(f), float)
        lo, hi = float(min(a.min(), b.min())), float(max(a.max(), b.max()))
        ha = histogram(a, "continuous", lo=lo, hi=hi, bins=bins)
        hb = histogram(b, "continuous", lo=lo, hi=hi, bins=bins)
        rows.append(MetricRow(variant, f, "emd_norm", emd_normalized(ha, hb)))
    return rows


def mean_js(rows: Sequence[MetricRow]) -> float:
    return float(np.mean([r.value for r in rows if r.metric == "js"]))


def write_metrics_csv(rows: Sequence[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "field", "metric", "value"])
        for r in rows:
            w.writerow([r.variant, r.field, r.metric, repr(float(r.value))])


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(r["variant"], r["field"], r["metric"], float(r["value"])) for r in csv.DictReader(fh)]


_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def _panel(rows, fields, metric, x0, title, variants) -> list[str]:
    width, height, top, left = 460, 300, 40, 50
    base = top + height
    out = [
        f'<text x="{x0 + left + width / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{x0 + left}" y1="{base}" x2="{x0 + left + width}" y2="{base}" stroke="black"/>',
        f'<line x1="{x0 + left}" y1="{top}" x2="{x0 + left}" y2="{base}" stroke="black"/>',
    ]
    vals = {(r.variant, r.field): r.value for r in rows if r.metric == metric}
    ymax = max([v for v in vals.values()] + [1e-12])
    for tick in np.linspace(0, ymax, 5):
        y = base - height * tick / ymax
        out.append(f'<text x="{x0 + left - 4}" y="{y + 4:.1f}" text-anchor="end" font-size="9">{tick:.3g}</text>')
    group_w = width / len(fields)
    bar_w = group_w * 0.8 / max(len(variants), 1)
    for gi, f in enumerate(fields):
        gx = x0 + left + gi * group_w + group_w * 0.1
        for vi, v in enumerate(variants):
            if (v, f) not in vals:
                continue
            value = vals[(v, f)]
            h = height * value / ymax
            out.append(
                f'<rect class="bar" data-variant="{escape(v)}" data-field="{f}" data-value="{value!r}" '
                f'x="{gx + vi * bar_w:.2f}" y="{base - h:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
                f'fill="{_PALETTE[vi % len(_PALETTE)]}"/>'
            )
        out.append(
            f'<text x="{gx + group_w * 0.4:.1f}" y="{base + 14}" text-anchor="middle" font-size="9">{f}</text>'
        )
    return out


def render_svg(rows: Sequence[MetricRow]) -> str:
    variants = list(dict.fromkeys(r.variant for r in rows))
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="1040" height="420" font-family="sans-serif">',
        '<rect class="background" x="0" y="0" width="1040" height="420" fill="white"/>',
    ]
    parts += _panel(rows, DISCRETE_FIELDS, "js", 0, "JS divergence (discrete fields)", variants)
    parts += _panel(rows, CONTINUOUS_FIELDS, "emd_norm", 520, "Normalized EMD (continuous fields)", variants)
    for vi, v in enumerate(variants):
        x, y = 60 + 250 * vi, 380
        parts.append(f'<circle cx="{x}" cy="{y}" r="6" fill="{_PALETTE[vi % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{x + 10}" y="{y + 4}" font-size="11">{escape(v)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(rows: Sequence[MetricRow], out_dir) -> tuple[Path, Path]:
    """Write ``metrics.csv`` and the two-panel grouped bar chart ``report.svg``."""
    if not rows:
        raise ValueError("no metric rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / "metrics.csv", out / "report.svg"
    write_metrics_csv(rows, csv_path)
    svg_path.write_text(render_svg(rows), encoding="utf-8")
    return csv_path, svg_path
