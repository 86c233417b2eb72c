"""Dubbing compliance metrics.

Duration compliance at threshold p is the fraction of pairs whose generated
length sits within a relative band of the source length; speed compliance is
the same band test on unit speeds. Ratios are compared exactly (thresholds
are read as decimal literals), so boundary cases like a ratio of exactly
1.2 against p = 0.2 count as compliant rather than depending on float
rounding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_THRESHOLDS = (0.2, 0.4)


def _exact(value) -> Fraction:
    if isinstance(value, Rational):
        return Fraction(value)
    return Fraction(str(float(value)))


def compliance(src: Sequence, gen: Sequence, threshold: float) -> float:
    """Fraction of pairs with ``|gen/src - 1| <= threshold``.

    Source measures must be positive; lists must be aligned and nonempty.
    """
    if len(src) != len(gen):
        raise ValidationError(f"length mismatch: {len(src)} source vs {len(gen)} generated")
    if not src:
        raise ValidationError("compliance needs at least one pair")
    thr = _exact(threshold)
    if thr < 0:
        raise ValidationError(f"threshold must be >= 0, got {threshold}")
    hits = 0
    for i, (s, g) in enumerate(zip(src, gen)):
        s = _exact(s)
        g = _exact(g)
        if s <= 0:
            raise ValidationError(f"source measure at index {i} must be positive, got {s}")
        if g <= 0:
            raise ValidationError(f"generated measure at index {i} must be positive, got {g}")
        if abs(g / s - 1) <= thr:
            hits += 1
    return hits / len(src)


def speed_correlation(src_speeds: Sequence, gen_speeds: Sequence) -> float:
    """Product-moment correlation between aligned speed lists.

    Undefined when either list is constant; that raises instead of being
    reported as 0.
    """
    if len(src_speeds) != len(gen_speeds):
        raise ValidationError(
            f"length mismatch: {len(src_speeds)} source vs {len(gen_speeds)} generated"
        )
    if len(src_speeds) < 2:
        raise ValidationError("correlation needs at least two pairs")
    x = np.asarray([float(v) for v in src_speeds])
    y = np.asarray([float(v) for v in gen_speeds])
    if x.min() == x.max() or y.min() == y.max():
        raise ValidationError("correlation is undefined for a constant speed list")
    return float(np.corrcoef(x, y)[0, 1])


@dataclass(frozen=True)
class Histogram:
    """Fixed-range histogram with explicit out-of-range buckets.

    ``counts`` covers ``edges`` (half-open bins, last bin closed, the
    numpy convention); underflow and overflow hold everything outside
    [lo, hi], so the total always equals the number of inputs.
    """

    edges: tuple[float, ...]
    counts: tuple[int, ...]
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow

    def to_json_obj(self) -> dict:
        return {
            "edges": list(self.edges),
            "counts": list(self.counts),
            "underflow": self.underflow,
            "overflow": self.overflow,
        }


def speed_histogram(values: Sequence, lo: float, hi: float, bins: int = 20) -> Histogram:
    """Histogram of ``values`` over [lo, hi] plus out-of-range buckets."""
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    if not lo < hi:
        raise ValidationError(f"need lo < hi, got [{lo}, {hi}]")
    arr = np.asarray([float(v) for v in values])
    under = int((arr < lo).sum())
    over = int((arr > hi).sum())
    inside = arr[(arr >= lo) & (arr <= hi)]
    counts, edges = np.histogram(inside, bins=bins, range=(lo, hi))
    return Histogram(
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        underflow=under,
        overflow=over,
    )


@dataclass(frozen=True)
class ComplianceReport:
    """Aggregated dubbing metrics for one (source, generated) corpus pair."""

    n: int
    duration_compliance: dict[str, float]
    speed_compliance: dict[str, float]
    speed_correlation: float | None
    correlation_defined: bool
    duration_ratio_histogram: Histogram

    def to_json_obj(self) -> dict:
        return {
            "n": self.n,
            "duration_compliance": dict(self.duration_compliance),
            "speed_compliance": dict(self.speed_compliance),
            "speed_correlation": self.speed_correlation,
            "correlation_defined": self.correlation_defined,
            "duration_ratio_histogram": self.duration_ratio_histogram.to_json_obj(),
        }

    def rows(self) -> list[tuple[str, str, str]]:
        """Flat (metric, key, value) rows for CSV output."""
        out: list[tuple[str, str, str]] = [("n", "", str(self.n))]
        for key, val in self.duration_compliance.items():
            out.append(("duration_compliance", key, repr(val)))
        for key, val in self.speed_compliance.items():
            out.append(("speed_compliance", key, repr(val)))
        corr = repr(self.speed_correlation) if self.correlation_defined else ""
        out.append(("speed_correlation", "", corr))
        return out


def threshold_key(threshold: float) -> str:
    """Stable string key for a threshold, e.g. 0.2 -> "0.2"."""
    return str(float(threshold))


def build_report(
    src_durations: Sequence,
    gen_durations: Sequence,
    src_speeds: Sequence,
    gen_speeds: Sequence,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    hist_range: tuple[float, float] = (0.5, 1.5),
    hist_bins: int = 20,
) -> ComplianceReport:
    """Compute compliance at each threshold plus correlation and histogram.

    An undefined correlation (constant speeds) is reported as None with the
    flag cleared instead of failing the whole report.
    """
    if not thresholds:
        raise ValidationError("need at least one threshold")
    dc = {threshold_key(p): compliance(src_durations, gen_durations, p) for p in thresholds}
    sc = {threshold_key(p): compliance(src_speeds, gen_speeds, p) for p in thresholds}
    try:
        corr: float | None = speed_correlation(src_speeds, gen_speeds)
        defined = True
    except ValidationError:
        corr = None
        defined = False
    ratios = [float(_exact(g) / _exact(s)) for s, g in zip(src_durations, gen_durations)]
    hist = speed_histogram(ratios, hist_range[0], hist_range[1], bins=hist_bins)
    return ComplianceReport(
        n=len(src_durations),
        duration_compliance=dc,
        speed_compliance=sc,
        speed_correlation=corr,
        correlation_defined=defined,
        duration_ratio_histogram=hist,
    )


def write_report_json(path: str, report: ComplianceReport, manifest: dict | None = None) -> None:
    obj: dict = {}
    if manifest is not None:
        obj["manifest"] = manifest
    obj.update(report.to_json_obj())
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path: str, report: ComplianceReport, manifest: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if manifest is not None:
            pairs = ",".join(f"{k}={manifest[k]}" for k in sorted(manifest))
            fh.write(f"# {pairs}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "key", "value"])
        writer.writerows(report.rows())


def write_histogram_csv(path: str, hist: Histogram, manifest: dict | None = None) -> None:
    """Rows of (bin_lo, bin_hi, count); out-of-range buckets use inf edges."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if manifest is not None:
            pairs = ",".join(f"{k}={manifest[k]}" for k in sorted(manifest))
            fh.write(f"# {pairs}\n")
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        writer.writerow(["-inf", repr(hist.edges[0]), hist.underflow])
        for i, count in enumerate(hist.counts):
            writer.writerow([repr(hist.edges[i]), repr(hist.edges[i + 1]), count])
        writer.writerow([repr(hist.edges[-1]), "inf", hist.overflow])
