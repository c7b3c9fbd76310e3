"""CSV and JSON writers with round-trip float formatting."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_ensemble(path, paths: np.ndarray, times: np.ndarray) -> Path:
    """Columns (particle, t, X); ``paths`` is particle-major ``(M, N + 1)``."""
    ts = [fmt(t) for t in times]
    rows = ((i, ts[k], fmt(v)) for i, row in enumerate(paths) for k, v in enumerate(row))
    return _write_rows(path, ("particle", "t", "X"), rows)


def write_adjoint(path, p: np.ndarray, q: np.ndarray, times: np.ndarray) -> Path:
    """Columns (particle, t, p, q); q lives on cells so it is blank at t = T."""
    ts = [fmt(t) for t in times]
    N = q.shape[1]

    def rows():
        for i in range(p.shape[0]):
            for k in range(N + 1):
                yield i, ts[k], fmt(p[i, k]), fmt(q[i, k]) if k < N else ""

    return _write_rows(path, ("particle", "t", "p", "q"), rows())


def write_trace(path, trace) -> Path:
    rows = ((r.iteration, fmt(r.J), fmt(r.SE), fmt(r.max_grad), fmt(r.step_size)) for r in trace)
    return _write_rows(path, ("iteration", "J", "SE", "max_grad", "step_size"), rows)


def write_control(path, values: np.ndarray, times: np.ndarray) -> Path:
    return _write_rows(path, ("t", "u"), ((fmt(t), fmt(u)) for t, u in zip(times[:-1], values)))


def read_control(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
