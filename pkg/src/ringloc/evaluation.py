"""Repeatability statistics over repeated localizations of a stationary marker."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GeometryError

__all__ = [
    "RepeatabilityReport",
    "repeatability",
    "compare",
    "format_table",
    "save_report",
    "load_report",
]


@dataclass(frozen=True)
class RepeatabilityReport:
    n_runs: int
    n_failures: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    deviations: tuple[float, ...]
    mean_deviation: float
    centers: tuple[tuple[float, float, float], ...] = ()
    run_ids: tuple[str, ...] = ()

    @property
    def n_successes(self) -> int:
        return self.n_runs - self.n_failures

    @property
    def failure_rate(self) -> float:
        return self.n_failures / self.n_runs if self.n_runs else 0.0

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "n_failures": self.n_failures,
            "mean": list(self.mean),
            "std": list(self.std),
            "deviations": list(self.deviations),
            "mean_deviation": self.mean_deviation,
            "centers": [list(c) for c in self.centers],
            "run_ids": list(self.run_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RepeatabilityReport":
        return cls(
            n_runs=int(data["n_runs"]),
            n_failures=int(data["n_failures"]),
            mean=tuple(float(v) for v in data["mean"]),
            std=tuple(float(v) for v in data["std"]),
            deviations=tuple(float(v) for v in data["deviations"]),
            mean_deviation=float(data["mean_deviation"]),
            centers=tuple(tuple(float(v) for v in c) for c in data.get("centers", ())),
            run_ids=tuple(str(v) for v in data.get("run_ids", ())),
        )


def _center_of(item):
    """Center of one run, or ``None`` for a failure.

    Accepts ``None``, a 3-vector, or anything with a ``center`` attribute
    plus an optional ``accepted`` flag (pipeline results, marker poses).
    """
    if item is None:
        return None
    if hasattr(item, "center"):
        if not getattr(item, "accepted", True) or item.center is None:
            return None
        c = np.asarray(item.center, dtype=np.float64)
    else:
        c = np.asarray(item, dtype=np.float64)
    if c.shape != (3,):
        raise GeometryError(f"run center must be a 3-vector, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        return None
    return c


def repeatability(results, run_ids=None, ddof: int = 1) -> RepeatabilityReport:
    """Per-axis mean, std, and distance-to-mean deviations.

    The std uses the sample ``n - 1`` denominator by default; ``ddof=0``
    gives the population std, which is how published repeatability tables
    are often computed. Failed runs (``None``, rejected poses, failed frame
    results) are counted in ``n_failures`` and excluded from every statistic.
    """
    if ddof not in (0, 1):
        raise GeometryError(f"ddof must be 0 or 1, got {ddof!r}")
    results = list(results)
    ids = [str(i) for i in range(len(results))] if run_ids is None else [str(i) for i in run_ids]
    if len(ids) != len(results):
        raise GeometryError("run_ids must match results in length")
    centers, kept = [], []
    for rid, item in zip(ids, results):
        c = _center_of(item)
        if c is not None:
            centers.append(c)
            kept.append(rid)
    if len(centers) < 2:
        raise GeometryError(f"repeatability needs at least 2 successful runs, got {len(centers)}")
    pts = np.vstack(centers)
    mean = pts.mean(axis=0)
    std = pts.std(axis=0, ddof=ddof)
    dev = np.linalg.norm(pts - mean, axis=1)
    return RepeatabilityReport(
        n_runs=len(results),
        n_failures=len(results) - len(centers),
        mean=tuple(float(v) for v in mean),
        std=tuple(float(v) for v in std),
        deviations=tuple(float(v) for v in dev),
        mean_deviation=float(dev.mean()),
        centers=tuple(tuple(float(v) for v in c) for c in pts),
        run_ids=tuple(kept),
    )


def _ratio(a: float, b: float) -> float:
    if b == 0.0:
        return 1.0 if a == 0.0 else math.inf
    return a / b


def compare(baseline: RepeatabilityReport, refined: RepeatabilityReport) -> dict:
    """Baseline-over-refined ratios; values above 1 mean the refined method is better."""
    dev = _ratio(baseline.mean_deviation, refined.mean_deviation)
    std = [_ratio(b, r) for b, r in zip(baseline.std, refined.std)]
    fail = _ratio(baseline.failure_rate, refined.failure_rate)
    return {
        "mean_deviation_ratio": dev,
        "std_ratio": std,
        "failure_rate_ratio": fail,
        "baseline": {"mean_deviation": baseline.mean_deviation, "std": list(baseline.std), "failures": baseline.n_failures, "runs": baseline.n_runs},
        "refined": {"mean_deviation": refined.mean_deviation, "std": list(refined.std), "failures": refined.n_failures, "runs": refined.n_runs},
        "improved": {
            "mean_deviation": dev > 1.0,
            "std": [r > 1.0 for r in std],
            "failures": refined.failure_rate <= baseline.failure_rate,
        },
    }


def _fmt(v: float) -> str:
    return f"{v:.9f}"


def format_table(report: RepeatabilityReport) -> str:
    """Aligned text table: one row per successful run, then mean and std rows."""
    header = ["run", "X", "Y", "Z", "distance to mean (+/-)"]
    rows = []
    for rid, c, d in zip(report.run_ids or [str(i) for i in range(len(report.centers))], report.centers, report.deviations):
        rows.append([rid, *(_fmt(v) for v in c), _fmt(d)])
    rows.append(["mean", *(_fmt(v) for v in report.mean), _fmt(report.mean_deviation)])
    rows.append(["std", *(_fmt(v) for v in report.std), ""])
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.append(f"runs: {report.n_runs}  failures: {report.n_failures}")
    return "\n".join(lines) + "\n"


def save_report(path, report: RepeatabilityReport) -> None:
    # repr-precision floats keep the round trip exact
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def load_report(path) -> RepeatabilityReport:
    return RepeatabilityReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
