"""CSV tables, matrix files and atomic output directories."""

from __future__ import annotations

import csv
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    """Shortest text that parses back to the same value."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) for v in row])


def read_table(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty table")
    return rows[0], rows[1:]


def write_matrix(path, arr, col_prefix: str = "c") -> None:
    """2-D (or 1-D, written as one column) array with a header of column names."""
    a = np.asarray(arr, float)
    if a.ndim == 1:
        a = a[:, None]
    write_table(path, [f"{col_prefix}{j}" for j in range(a.shape[1])], a.tolist())


def read_matrix(path) -> np.ndarray:
    header, rows = read_table(path)
    try:
        a = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if a.size == 0:
        return np.zeros((0, len(header)))
    if a.shape[1] != len(header):
        raise ValueError(f"{path}: rows do not match the header width")
    return a


def write_tensor(path, arr) -> None:
    """(M, A, M') tensor as rows ``s, a, x_0..x_{M'-1}``."""
    t = np.asarray(arr, float)
    rows = [[s, a] + t[s, a].tolist() for s in range(t.shape[0]) for a in range(t.shape[1])]
    write_table(path, ["s", "a"] + [f"x{j}" for j in range(t.shape[2])], rows)


def read_tensor(path) -> np.ndarray:
    header, rows = read_table(path)
    if header[:2] != ["s", "a"]:
        raise ValueError(f"{path}: expected leading columns 's,a'")
    width = len(header) - 2
    idx = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=int)
    if idx.size == 0:
        raise ValueError(f"{path}: no rows")
    M, A = idx[:, 0].max() + 1, idx[:, 1].max() + 1
    if len(rows) != M * A:
        raise ValueError(f"{path}: expected {M * A} rows for {M} states and {A} actions")
    t = np.full((M, A, width), np.nan)
    for (s, a), r in zip(idx, rows):
        t[s, a] = [float(v) for v in r[2:]]
    if np.isnan(t).any():
        raise ValueError(f"{path}: duplicate or missing (s, a) rows")
    return t


def write_result_log(path, result, v_ref=None) -> None:
    """One row per (replication, logged iteration, agent)."""
    mse = result.mse(v_ref)
    dis = result.disagreement()
    p = result.plan.Phi.shape[1]
    header = ["replication", "iteration", "agent", "mse", "disagreement"] + [f"theta_{k}" for k in range(p)]

    def rows():
        for r, run in enumerate(result.runs):
            for l, it in enumerate(run.iterations):
                for i in range(run.theta_log.shape[1]):
                    yield [run.replication, int(it), i, mse[r, l, i], dis[r, l]] + run.theta_log[l, i].tolist()

    write_table(path, header, rows())


@contextmanager
def atomic_dir(out):
    """Yield a scratch directory; on success its files are moved into ``out``.

    Nothing lands in ``out`` if the body raises.
    """
    out = Path(out)
    parent = out.parent if out.parent != Path("") else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=parent))
    try:
        yield tmp
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
