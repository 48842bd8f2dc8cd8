"""Round-trip metrics: summary statistics, throughput, latency-class shares.

Definitions are pinned here once and used everywhere: the mean is the
arithmetic mean, the median of an even-sized sample is the lower middle
element, the deviation is the population standard deviation, and throughput
is sample count over elapsed wall time of the whole measurement loop (loop
overhead included, which is what a sequential echo benchmark actually
sustains).  Shares count samples at or below each latency class threshold,
cumulatively.

The arithmetic is type-agnostic: feed `float` samples for measurements or
`decimal.Decimal` for exact fixture checks.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
from dataclasses import dataclass
from typing import Sequence

#: Latency classes: worst-case round trip tolerated by each message class
#: of the targeted field protocols (trip/raw-data, other fast, medium, slow).
MessageClassThreshold = tuple[str, int]
DEFAULT_THRESHOLDS: tuple[MessageClassThreshold, ...] = (
    ("1A/4", 6),
    ("1B", 40),
    ("2", 200),
    ("3/5/6", 1000),
)


@dataclass(frozen=True)
class RttSample:
    index: int
    rtt_ms: object  # float in measurements, Decimal in exact fixtures

    def __post_init__(self):
        if self.rtt_ms < 0:
            raise ValueError(f"negative round-trip time {self.rtt_ms}")


@dataclass(frozen=True)
class ShareEntry:
    threshold_ms: int
    label: str
    count: int
    percent: float


@dataclass(frozen=True)
class MetricsReport:
    scheme: str
    n: int
    mean: object
    median: object
    stddev: object
    min: object
    max: object
    range: object
    mid_range: object
    throughput_pps: object
    shares: tuple[ShareEntry, ...]
    timeouts: int = 0
    elapsed_s: object = 0.0

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "n": self.n,
            "mean_ms": float(self.mean),
            "median_ms": float(self.median),
            "stddev_ms": float(self.stddev),
            "min_ms": float(self.min),
            "max_ms": float(self.max),
            "range_ms": float(self.range),
            "mid_range_ms": float(self.mid_range),
            "throughput_pps": float(self.throughput_pps),
            "timeouts": self.timeouts,
            "elapsed_s": float(self.elapsed_s),
            "shares": [
                {
                    "label": s.label,
                    "threshold_ms": s.threshold_ms,
                    "count": s.count,
                    "percent": s.percent,
                }
                for s in self.shares
            ],
        }


def compute_metrics(
    samples: Sequence[RttSample],
    elapsed_s,
    thresholds: Sequence[MessageClassThreshold] = DEFAULT_THRESHOLDS,
    scheme: str = "unknown",
    timeouts: int = 0,
) -> MetricsReport:
    """Summarize a sample set; raises ValueError on an empty one."""
    if not samples:
        raise ValueError("no samples to summarize")
    values = [s.rtt_ms for s in samples]
    n = len(values)
    lo, hi = min(values), max(values)
    shares = []
    for label, threshold in thresholds:
        count = sum(1 for v in values if v <= threshold)
        shares.append(ShareEntry(threshold, label, count, count * 100 / n))
    return MetricsReport(
        scheme=scheme,
        n=n,
        mean=statistics.mean(values),
        median=statistics.median_low(values),
        stddev=statistics.pstdev(values),
        min=lo,
        max=hi,
        range=hi - lo,
        mid_range=(lo + hi) / 2,
        throughput_pps=(n / elapsed_s) if elapsed_s else 0.0,
        shares=tuple(shares),
        timeouts=timeouts,
        elapsed_s=elapsed_s,
    )


def format_report_table(report: MetricsReport) -> str:
    """Two tables in the layout of the published measurement write-ups."""
    head = f"{'Algorithm':<22} {'Mean':>8} {'Median':>8} {'Deviation':>9} {'Min':>8} {'Max':>8} {'Range':>8} {'Mid-Range':>9}"
    row = (
        f"{report.scheme:<22} {float(report.mean):>8.3f} {float(report.median):>8.3f} "
        f"{float(report.stddev):>9.3f} {float(report.min):>8.3f} {float(report.max):>8.3f} "
        f"{float(report.range):>8.3f} {float(report.mid_range):>9.3f}"
    )
    share_head = f"{'Throughput':>12} " + " ".join(
        f"{s.label + ' <=' + str(s.threshold_ms) + 'ms':>18}" for s in report.shares
    )
    share_row = f"{float(report.throughput_pps):>8.1f} PPS " + " ".join(
        f"{s.count:>9} ({s.percent:.2f}%)" for s in report.shares
    )
    lines = [head, row, "", share_head, share_row]
    if report.timeouts:
        lines.append(f"timeouts: {report.timeouts} (excluded from the statistics above)")
    return "\n".join(lines)


def emit_report(report: MetricsReport, samples: Sequence[RttSample], outdir: str) -> dict[str, str]:
    """Write samples.csv and report.json under `outdir`; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "samples.csv")
    json_path = os.path.join(outdir, "report.json")
    with open(csv_path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["index", "rtt_ms"])
        for s in samples:
            writer.writerow([s.index, float(s.rtt_ms)])
    with open(json_path, "w") as fp:
        json.dump(report.as_dict(), fp, indent=2)
        fp.write("\n")
    return {"csv": csv_path, "json": json_path}


def load_report(path: str) -> MetricsReport:
    with open(path) as fp:
        data = json.load(fp)
    shares = tuple(
        ShareEntry(s["threshold_ms"], s["label"], s["count"], s["percent"])
        for s in data["shares"]
    )
    return MetricsReport(
        scheme=data["scheme"],
        n=data["n"],
        mean=data["mean_ms"],
        median=data["median_ms"],
        stddev=data["stddev_ms"],
        min=data["min_ms"],
        max=data["max_ms"],
        range=data["range_ms"],
        mid_range=data["mid_range_ms"],
        throughput_pps=data["throughput_pps"],
        shares=shares,
        timeouts=data.get("timeouts", 0),
        elapsed_s=data.get("elapsed_s", 0.0),
    )


def load_samples(path: str) -> list[RttSample]:
    out = []
    with open(path, newline="") as fp:
        for row in csv.DictReader(fp):
            out.append(RttSample(int(row["index"]), float(row["rtt_ms"])))
    return out
