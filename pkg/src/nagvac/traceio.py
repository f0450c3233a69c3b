"""Append-only CSV trace files for training runs."""

from __future__ import annotations

import csv

import numpy as np

from .trainer import TrainTrace

BASE_COLUMNS = ["iteration", "lb", "lb_smoothed", "step_size", "grad_norm", "natgrad_norm", "lb_se"]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


class TraceWriter:
    """Training sink writing one CSV row per iteration (flushed immediately)."""

    def __init__(self, path, n_gamma: int):
        self.path = path
        self.n_gamma = n_gamma
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(BASE_COLUMNS + [f"gamma_{j + 1}" for j in range(n_gamma)])
        self._fh.flush()

    def __call__(self, row: dict) -> None:
        gamma = row.get("gamma")
        gamma = [] if gamma is None else list(np.asarray(gamma, dtype=float))
        gamma = (gamma + [None] * self.n_gamma)[: self.n_gamma]
        self._w.writerow([str(row["iteration"])] + [_fmt(row[k]) for k in BASE_COLUMNS[1:]] + [_fmt(g) for g in gamma])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> TrainTrace:
    """Parse a trace file back into a :class:`TrainTrace` (per-iteration fields)."""
    tr = TrainTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        gcols = [i for i, h in enumerate(header) if h.startswith("gamma_")]
        for row in reader:
            tr.lb.append(float(row[1]))
            if row[2] != "":
                tr.lb_smoothed.append(float(row[2]))
            tr.step_size.append(float(row[3]))
            tr.grad_norm.append(float(row[4]))
            tr.natgrad_norm.append(float(row[5]))
            tr.lb_se.append(float(row[6]))
            if gcols and row[gcols[0]] != "":
                tr.gamma.append(np.array([float(row[i]) for i in gcols]))
    if tr.lb_smoothed:
        k = int(np.argmax(tr.lb_smoothed))
        K = len(tr.lb) - len(tr.lb_smoothed) + 1
        tr.best_lb_smoothed = tr.lb_smoothed[k]
        tr.best_iter = k + K
    tr.stop_iter = len(tr.lb)
    return tr
