"""Univariate Gaussian templates and the success model built on them.

A template captures, per point of interest, the sample distribution for
the two values a mask word can take: all zeros or all ones. Because both
classes are Gaussian at a leaking sample, single-trace classification
quality is fully described by the overlap of the two densities, and key
recovery odds follow by raising the per-site success to the number of
independently classified sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DomainError,
    EmptyPoi,
    InsufficientClassData,
    TemplateFormatError,
)
from .traceio import _atomic_write

VAR_FLOOR = 1e-12

_SIGMA_RANGE = 12.0
_SIMPSON_TOL = 1e-15
_SIMPSON_DEPTH = 60


@dataclass(frozen=True)
class ClassStats:
    """Sample mean and unbiased variance of one class at one POI."""

    mu: float
    var: float
    count: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu):
            raise DomainError("mu must be finite")
        if not math.isfinite(self.var) or self.var <= 0.0:
            raise DomainError("var must be finite and positive")
        if self.count < 0:
            raise DomainError("count must be non-negative")


@dataclass(frozen=True)
class Template:
    """Per-POI class statistics for the all-zeros and all-ones classes."""

    pois: tuple[int, ...]
    class0: tuple[ClassStats, ...]
    class1: tuple[ClassStats, ...]

    def __post_init__(self) -> None:
        if not self.pois:
            raise EmptyPoi("template needs at least one POI")
        if len(set(self.pois)) != len(self.pois):
            raise DomainError("POIs must be distinct")
        if len(self.class0) != len(self.pois) or len(self.class1) != len(self.pois):
            raise DomainError("one ClassStats pair per POI required")


def _log_npdf(x: float, mu: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mu) ** 2 / var)


def build_template(traces, labels, pois) -> Template:
    """Estimate a template from labeled traces.

    labels holds the class bit per trace (0: mask was all zeros, 1: all
    ones). Variances are unbiased (ddof 1) and floored at VAR_FLOOR so a
    noiseless class cannot produce a degenerate density.
    """
    traces = np.asarray(traces)
    if traces.ndim != 2:
        raise DomainError("traces must be 2-D")
    labels = np.asarray(labels).astype(bool)
    if labels.ndim != 1 or labels.shape[0] != traces.shape[0]:
        raise DomainError("labels must be 1-D, one per trace")
    pois = tuple(int(p) for p in pois)
    if not pois:
        raise EmptyPoi("no POIs given")
    for p in pois:
        if not 0 <= p < traces.shape[1]:
            raise DomainError(f"POI {p} outside trace of length {traces.shape[1]}")
    stats: list[tuple[ClassStats, ...]] = []
    for cls in (0, 1):
        rows = traces[labels] if cls else traces[~labels]
        if rows.shape[0] < 2:
            raise InsufficientClassData(
                f"class {cls} has {rows.shape[0]} traces, need at least 2"
            )
        cols = rows[:, pois].astype(np.float64)
        mu = cols.mean(axis=0)
        var = np.maximum(cols.var(axis=0, ddof=1), VAR_FLOOR)
        stats.append(
            tuple(
                ClassStats(mu=float(m), var=float(v), count=rows.shape[0])
                for m, v in zip(mu, var)
            )
        )
    return Template(pois=pois, class0=stats[0], class1=stats[1])


def classify(trace, template: Template) -> tuple[int, tuple[float, float]]:
    """Maximum-likelihood class of one trace at the template's POIs.

    Returns (class, (loglik0, loglik1)); an exact tie goes to class 0.
    """
    trace = np.asarray(trace)
    if trace.ndim != 1:
        raise DomainError("trace must be 1-D")
    for p in template.pois:
        if not 0 <= p < trace.shape[0]:
            raise DomainError(f"POI {p} outside trace of length {trace.shape[0]}")
    ll0 = sum(
        _log_npdf(float(trace[p]), s.mu, s.var)
        for p, s in zip(template.pois, template.class0)
    )
    ll1 = sum(
        _log_npdf(float(trace[p]), s.mu, s.var)
        for p, s in zip(template.pois, template.class1)
    )
    return (1 if ll1 > ll0 else 0, (ll0, ll1))


class OverlapResult(NamedTuple):
    """Overlap area A of two densities, and A/2.

    area integrates min(p0, p1), so it lies in [0, 1]; fraction_of_total
    expresses the same quantity relative to the combined area under both
    curves, which is 2.
    """

    area: float
    fraction_of_total: float


def _pdf(x: float, mu: float, var: float) -> float:
    return math.exp(-0.5 * (x - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def _adaptive_simpson(f, a: float, b: float, tol: float) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""

    def step(a, fa, m, fm, b, fb, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm = f(lm)
        frm = f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return step(a, fa, lm, flm, m, fm, left, 0.5 * tol, depth - 1) + step(
            m, fm, rm, frm, b, fb, right, 0.5 * tol, depth - 1
        )

    if b <= a:
        return 0.0
    m = 0.5 * (a + b)
    fa, fm, fb = f(a), f(m), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return step(a, fa, m, fm, b, fb, whole, tol, _SIMPSON_DEPTH)


def _crossings(mu0: float, var0: float, mu1: float, var1: float) -> list[float]:
    """Points where the two densities are equal."""
    if var0 == var1:
        if mu0 == mu1:
            return []
        return [0.5 * (mu0 + mu1)]
    # Quadratic in x from equating log densities.
    a = 1.0 / var1 - 1.0 / var0
    b = -2.0 * (mu1 / var1 - mu0 / var0)
    c = mu1 ** 2 / var1 - mu0 ** 2 / var0 + math.log(var1 / var0)
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return []
    root = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(root, b)) if b != 0.0 else 0.5 * root
    xs = set()
    if q != 0.0:
        xs.add(q / a)
        xs.add(c / q)
    else:
        xs.add(0.0)
        if a != 0.0:
            xs.add(-b / a)
    return sorted(xs)


def gaussian_overlap(
    mu0: float, var0: float, mu1: float, var1: float, method: str = "auto"
) -> OverlapResult:
    """Overlap area A between two Gaussian densities.

    A integrates min(p0, p1) over the real line. With equal variances
    there is a closed form, A = erfc(|mu1 - mu0| / (2 * sqrt(2) * sigma)),
    which `auto` uses; otherwise (or with method="numeric") the integral
    runs piecewise adaptive Simpson between the density crossing points,
    over [min(mu) - 12 sigma_max, max(mu) + 12 sigma_max].
    """
    for name, v in (("var0", var0), ("var1", var1)):
        if not math.isfinite(v) or v <= 0.0:
            raise DomainError(f"{name} must be finite and positive")
    if not math.isfinite(mu0) or not math.isfinite(mu1):
        raise DomainError("means must be finite")
    if method not in ("auto", "numeric", "closed"):
        raise DomainError(f"unknown method {method!r}")
    if method == "closed" and var0 != var1:
        raise DomainError("closed form requires equal variances")
    if method in ("auto", "closed") and var0 == var1:
        area = math.erfc(abs(mu1 - mu0) / (2.0 * math.sqrt(2.0 * var0)))
        return OverlapResult(area=area, fraction_of_total=0.5 * area)

    sigma_max = math.sqrt(max(var0, var1))
    lo = min(mu0, mu1) - _SIGMA_RANGE * sigma_max
    hi = max(mu0, mu1) + _SIGMA_RANGE * sigma_max

    def integrand(x: float) -> float:
        return min(_pdf(x, mu0, var0), _pdf(x, mu1, var1))

    points = [lo] + [x for x in _crossings(mu0, var0, mu1, var1) if lo < x < hi] + [hi]
    tol = _SIMPSON_TOL / (len(points) - 1)
    area = sum(
        _adaptive_simpson(integrand, a, b, tol)
        for a, b in zip(points, points[1:])
    )
    area = min(max(area, 0.0), 1.0)
    return OverlapResult(area=area, fraction_of_total=0.5 * area)


def success_from_overlap(area: float) -> float:
    """Single-trace success probability of the likelihood classifier.

    With equal priors the Bayes error of deciding between two densities
    is half their overlap area, so success is 1 - A/2.
    """
    if not 0.0 <= area <= 1.0:
        raise DomainError("overlap area must lie in [0, 1]")
    return 1.0 - 0.5 * area


@dataclass(frozen=True)
class SuccessModel:
    """Per-site success rates and how many sites one coefficient has."""

    p_inner: float
    p_neg: float
    inner_count: int
    outer_count: int

    def __post_init__(self) -> None:
        for name, p in (("p_inner", self.p_inner), ("p_neg", self.p_neg)):
            if not 0.0 <= p <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        if self.inner_count < 1 or self.outer_count < 1:
            raise DomainError("iteration counts must be positive")


def per_coefficient_success(model: SuccessModel) -> float:
    """All sites of one coefficient classified correctly."""
    return (
        model.p_inner ** (model.inner_count * model.outer_count)
        * model.p_neg ** model.outer_count
    )


def full_key_success(p_coefficient: float, n: int, poly_count: int = 2) -> float:
    """All coefficients of all polynomials of one key recovered."""
    if not 0.0 <= p_coefficient <= 1.0:
        raise DomainError("p_coefficient must lie in [0, 1]")
    if n < 1 or poly_count < 1:
        raise DomainError("n and poly_count must be positive")
    return p_coefficient ** (n * poly_count)


def save_template(template: Template, path) -> None:
    """Write a template as key=value text with full float precision."""
    lines = ["version=1", "pois=" + ",".join(str(p) for p in template.pois)]
    for cls, stats in (("class0", template.class0), ("class1", template.class1)):
        for i, s in enumerate(stats):
            lines.append(f"{cls}.mu.{i}={s.mu!r}")
            lines.append(f"{cls}.var.{i}={s.var!r}")
            lines.append(f"{cls}.count.{i}={s.count}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_template(path) -> Template:
    """Read a template file back, validating structure and invariants."""
    fields: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise TemplateFormatError(f"line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            fields[k.strip()] = v.strip()
    if fields.get("version") != "1":
        raise TemplateFormatError(f"unsupported version {fields.get('version')!r}")
    if "pois" not in fields:
        raise TemplateFormatError("missing pois field")
    try:
        pois = tuple(int(p) for p in fields["pois"].split(","))
        stats = []
        for cls in ("class0", "class1"):
            stats.append(
                tuple(
                    ClassStats(
                        mu=float(fields[f"{cls}.mu.{i}"]),
                        var=float(fields[f"{cls}.var.{i}"]),
                        count=int(fields[f"{cls}.count.{i}"]),
                    )
                    for i in range(len(pois))
                )
            )
        return Template(pois=pois, class0=stats[0], class1=stats[1])
    except KeyError as exc:
        raise TemplateFormatError(f"missing field {exc.args[0]!r}") from None
    except (ValueError, DomainError, EmptyPoi) as exc:
        raise TemplateFormatError(str(exc)) from None
