"""Correlation power analysis: Pearson correlation per sample column.

Used here for leakage localization: correlate every trace column against
a per-trace hypothesis (predicted Hamming weight of a targeted value) and
take the strongest columns as points of interest. Accumulation is done in
float64 over two passes, which keeps column statistics exact enough for
trace counts far beyond anything this package simulates.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, DomainError, LengthMismatch

# One value per trace: the predicted leak (e.g. Hamming weight) under the
# label hypothesis being tested. Any 1-D float-convertible sequence works.
HypothesisVector = np.ndarray

_COLUMN_CHUNK = 4096


def pearson(x, y) -> float:
    """Pearson correlation of two equal-length 1-D sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise DegenerateInput("pearson expects 1-D inputs")
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateInput("need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    ssx = float(xc @ xc)
    ssy = float(yc @ yc)
    if ssx == 0.0 or ssy == 0.0:
        raise DegenerateInput("zero variance input")
    return float(xc @ yc) / (ssx * ssy) ** 0.5


def correlation_trace(traces, hypothesis) -> np.ndarray:
    """Correlate every sample column of `traces` against `hypothesis`.

    Returns one float64 correlation per column. Columns with zero
    variance get correlation 0.0 rather than an error: flat columns are
    normal in real traces and simply carry no information.
    """
    traces = np.asarray(traces)
    if traces.ndim != 2:
        raise DegenerateInput("traces must be a 2-D matrix")
    h = np.asarray(hypothesis, dtype=np.float64)
    if h.ndim != 1:
        raise DegenerateInput("hypothesis must be 1-D")
    n = traces.shape[0]
    if h.shape[0] != n:
        raise LengthMismatch(f"{n} traces but {h.shape[0]} hypothesis values")
    if n < 2:
        raise DegenerateInput("need at least two traces")
    hc = h - h.mean()
    ssh = float(hc @ hc)
    if ssh == 0.0:
        raise DegenerateInput("hypothesis has zero variance")
    out = np.empty(traces.shape[1], dtype=np.float64)
    for lo in range(0, traces.shape[1], _COLUMN_CHUNK):
        cols = traces[:, lo : lo + _COLUMN_CHUNK].astype(np.float64)
        cols -= cols.mean(axis=0)
        cov = hc @ cols
        ssc = np.einsum("ij,ij->j", cols, cols)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = cov / np.sqrt(ssc * ssh)
        r[ssc == 0.0] = 0.0
        out[lo : lo + cols.shape[1]] = r
    return out


def find_poi(correlations, count: int = 1) -> np.ndarray:
    """Indices of the `count` largest |correlation| values.

    Sorted by descending magnitude; exact ties resolve to the lower
    index, so results are deterministic.
    """
    corr = np.asarray(correlations, dtype=np.float64)
    if corr.ndim != 1:
        raise DegenerateInput("correlations must be 1-D")
    if not 1 <= count <= corr.shape[0]:
        raise DomainError(f"count must be in [1, {corr.shape[0]}]")
    order = np.argsort(-np.abs(corr), kind="stable")
    return order[:count]
