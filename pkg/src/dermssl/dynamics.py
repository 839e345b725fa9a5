"""Training-dynamics diagnostics over epoch logs.

Series are ordered ``(epoch, value)`` rows as returned by ``EpochLog.series``.
The overfitting gap is signed so that positive means overfitting for both
kinds: ``val - train`` for losses and ``train - val`` for accuracies.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CoverageError
from .logs import EpochLog

Series = Sequence[tuple[int, float]]

EARLY_WINDOW = (0, 29)
LATE_WINDOW = (30, 70)
GAP_EPOCH = 70


def overall_change(series: Series) -> tuple[float, float]:
    """``(last - first, 100 * (last - first) / first)``."""
    if not series:
        raise ValueError("series is empty")
    first, last = series[0][1], series[-1][1]
    change = last - first
    if first == 0:
        raise ValueError("percent change undefined for a zero initial value")
    return change, 100.0 * change / first


def implied_initial(change: float, percent: float) -> float:
    """Initial value consistent with a reported change and percent change."""
    if percent == 0:
        raise ValueError("initial value not recoverable from a zero percent change")
    return 100.0 * change / percent


def window_slope(series: Series, window: tuple[int, int]) -> float:
    """Least-squares slope of value against epoch over rows with epoch in ``window`` (inclusive)."""
    lo, hi = window
    pts = np.array([(e, v) for e, v in series if lo <= e <= hi], dtype=np.float64)
    if len(pts) < 2:
        raise CoverageError(f"window {lo}-{hi} holds {len(pts)} point(s); need at least 2")
    e = pts[:, 0] - pts[:, 0].mean()
    v = pts[:, 1] - pts[:, 1].mean()
    return float((e * v).sum() / (e * e).sum())


def _value_at(series: Series, epoch: int, what: str) -> float:
    for e, v in series:
        if e == epoch:
            return v
    raise CoverageError(f"{what} series has no epoch {epoch}")


def overfitting_gap(train_series: Series, val_series: Series, epoch: int, kind: str) -> float:
    train = _value_at(train_series, epoch, "train")
    val = _value_at(val_series, epoch, "val")
    if kind == "loss":
        return val - train
    if kind == "accuracy":
        return train - val
    raise ValueError(f"kind must be 'loss' or 'accuracy', got {kind!r}")


@dataclass(frozen=True)
class DynamicsReport:
    metric_name: str
    initial_value: float
    final_value: float
    overall_change: float
    percent_change: float
    slope_early: float
    slope_late: float
    overfitting_epoch: int
    overfitting_gap: float


_ROWS = (
    ("Train Loss", "train_loss", "loss"),
    ("Val Loss", "val_loss", "loss"),
    ("Train Acc", "train_acc", "accuracy"),
    ("Val Acc", "val_acc", "accuracy"),
)


def _check_coverage(log: EpochLog, early, late, gap_epoch: int) -> None:
    need = max(early[1], late[1], gap_epoch)
    if not log.rows or log.rows[-1].epoch < need:
        last = log.rows[-1].epoch if log.rows else None
        raise CoverageError(f"log {log.run_id!r} ends at epoch {last}; epochs 0-{need} are required")


def model_report(
    log: EpochLog,
    label: str,
    early: tuple[int, int] = EARLY_WINDOW,
    late: tuple[int, int] = LATE_WINDOW,
    gap_epoch: int = GAP_EPOCH,
) -> list[DynamicsReport]:
    _check_coverage(log, early, late, gap_epoch)
    reports = []
    for name, metric, kind in _ROWS:
        series = log.series(metric)
        change, percent = overall_change(series)
        prefix = metric.split("_")[1]
        gap = overfitting_gap(log.series(f"train_{prefix}"), log.series(f"val_{prefix}"), gap_epoch, kind)
        reports.append(
            DynamicsReport(
                metric_name=f"{name} {label}",
                initial_value=series[0][1],
                final_value=series[-1][1],
                overall_change=change,
                percent_change=percent,
                slope_early=window_slope(series, early),
                slope_late=window_slope(series, late),
                overfitting_epoch=gap_epoch,
                overfitting_gap=gap,
            )
        )
    return reports


def table_report(
    log_a: EpochLog,
    log_b: EpochLog,
    early: tuple[int, int] = EARLY_WINDOW,
    late: tuple[int, int] = LATE_WINDOW,
    gap_epoch: int = GAP_EPOCH,
    labels: tuple[str, str] = ("A", "B"),
) -> list[DynamicsReport]:
    """Eight rows: train/val loss and accuracy for each model, A first."""
    return model_report(log_a, labels[0], early, late, gap_epoch) + model_report(
        log_b, labels[1], early, late, gap_epoch
    )


def headers(early=EARLY_WINDOW, late=LATE_WINDOW, gap_epoch=GAP_EPOCH) -> list[str]:
    return [
        "Metric",
        "Final Value",
        "Overall Change",
        "% Change",
        f"Slope ({early[0]}-{early[1]})",
        f"Slope ({late[0]}-{late[1]})",
        f"Overfitting at {gap_epoch}",
        "Initial (implied)",
    ]


def _cells(r: DynamicsReport) -> list[str]:
    return [
        r.metric_name,
        f"{r.final_value:.4f}",
        f"{r.overall_change:+.4f}",
        f"{r.percent_change:+.2f}%",
        f"{r.slope_early:.4f}",
        f"{r.slope_late:.4f}",
        f"{r.overfitting_gap:+.4f}",
        f"{implied_initial(r.overall_change, r.percent_change) if r.percent_change else r.initial_value:.4f}",
    ]


def render_table(reports: Sequence[DynamicsReport], early=EARLY_WINDOW, late=LATE_WINDOW) -> str:
    """Aligned plain-text table in the column order of the summary table."""
    gap_epoch = reports[0].overfitting_epoch if reports else GAP_EPOCH
    rows = [headers(early, late, gap_epoch)] + [_cells(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]

    def fmt(row):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    lines = [fmt(rows[0]), "  ".join("-" * w for w in widths)]
    for i, row in enumerate(rows[1:]):
        if i and i % 4 == 0:
            lines.append("  ".join("-" * w for w in widths))
        lines.append(fmt(row))
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: Sequence[DynamicsReport]) -> str:
    buf = io.StringIO()
    names = list(asdict(reports[0])) if reports else [f for f in DynamicsReport.__dataclass_fields__]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(asdict(r))
    return buf.getvalue()


def read_reports_csv(path: str | Path) -> list[DynamicsReport]:
    with Path(path).open(newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append(
                DynamicsReport(
                    row["metric_name"],
                    *(float(row[k]) for k in ("initial_value", "final_value", "overall_change", "percent_change", "slope_early", "slope_late")),
                    int(row["overfitting_epoch"]),
                    float(row["overfitting_gap"]),
                )
            )
        return out
