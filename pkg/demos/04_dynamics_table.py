"""Summarize a pair of training curves: final values, change, windowed slopes, gaps.

Run: python3 demos/04_dynamics_table.py A.jsonl B.jsonl
or with no arguments to use two hand-made curves.
"""
import sys

import numpy as np

from dermssl.dynamics import table_report, render_table, window_slope
from dermssl.logs import EpochLog, read_epoch_log


def made_up_log(run_id: str, start_loss: float, end_loss: float, start_acc: float, end_acc: float) -> EpochLog:
    epochs = np.arange(71)
    t = epochs / 70
    rows = [
        {
            "epoch": int(e),
            "train_loss": start_loss + (end_loss - start_loss) * t[e],
            "val_loss": start_loss + (end_loss - start_loss) * t[e] * 0.8,
            "train_acc": start_acc + (end_acc - start_acc) * t[e],
            "val_acc": start_acc + (end_acc - start_acc) * t[e] * 0.9,
        }
        for e in epochs
    ]
    return EpochLog.from_rows(run_id, rows)


if len(sys.argv) == 3:
    log_a, log_b = read_epoch_log(sys.argv[1]), read_epoch_log(sys.argv[2])
else:
    log_a = made_up_log("A", 0.20, 0.15, 0.45, 0.60)
    log_b = made_up_log("B", 0.15, 0.04, 0.60, 0.85)

print(render_table(table_report(log_a, log_b)))
# slopes are least-squares fits over the inclusive epoch window
print("B train-loss slope, epochs 0-9:", round(window_slope(log_b.series("train_loss"), (0, 9)), 5))
