"""Single-trace key recovery from classified mask writes.

Each coefficient of the secret key is reconstructed from exactly one
trace: every leak site in the trace is classified independently with the
matching template (all-zeros vs all-ones mask), the inner-loop bits are
folded back into the magnitude the scan encoded, the sign bit applies a
two's-complement conditional negation, and the outer iterations are
summed with 32-bit wrap, mirroring the sampler's own arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    LayoutMismatch,
    LengthMismatch,
    MissingTemplate,
    ReportFormatError,
)
from .leakage import TraceLayout
from .sampler import MASK32, SamplerParams
from .template import (
    SuccessModel,
    Template,
    full_key_success,
    gaussian_overlap,
    per_coefficient_success,
    success_from_overlap,
)
from .traceio import LabelSet, TraceSet, _atomic_write

REPORT_VERSION = 1


def reconstruct_v(inner_bits) -> int:
    """Magnitude encoded by the inner mask bits: OR of the set positions.

    Positions are 1-based. A clean record has at most one bit set; if
    classification errors set several, the OR combines them, exactly as
    the mask-select accumulation in the sampler would.
    """
    v = 0
    for k, bit in enumerate(inner_bits, start=1):
        if bit:
            v |= k
    return v


def apply_neg(v: int, neg_bit: bool) -> int:
    """Conditionally negate a magnitude in 32-bit two's complement."""
    if not 0 <= v <= MASK32:
        raise DomainError("v must be a 32-bit value")
    mask = MASK32 if neg_bit else 0
    out = ((v ^ mask) + (1 if neg_bit else 0)) & MASK32
    return out - (1 << 32) if out >> 31 else out


@dataclass(frozen=True)
class OuterDecision:
    """Classified bits of one outer iteration, with confidence margins.

    Margins are signed log-likelihood differences (all-ones minus
    all-zeros); the decision is the margin's sign, ties to all-zeros.
    """

    inner_bits: tuple[bool, ...]
    neg_bit: bool
    inner_margins: tuple[float, ...]
    neg_margin: float


@dataclass(frozen=True)
class ClassifiedLeaks:
    """Per-outer-iteration classification results for one trace."""

    outer: tuple[OuterDecision, ...]


def reconstruct_coefficient(classified: ClassifiedLeaks) -> int:
    """Signed coefficient value from classified leak bits (32-bit wrap)."""
    total = 0
    for dec in classified.outer:
        signed = apply_neg(reconstruct_v(dec.inner_bits), dec.neg_bit)
        total = (total + signed) & MASK32
    return total - (1 << 32) if total >> 31 else total


def _site_pois(template: Template, site_index: int, trace_length: int) -> list[int]:
    """Translate a template's POIs from its profiled site to another site.

    POIs are stored as absolute indices at the profiled site; the first
    POI is the leak sample itself (the strongest-correlation sample), so
    re-anchoring is a constant shift.
    """
    anchor = template.pois[0]
    shifted = [site_index + (p - anchor) for p in template.pois]
    for p in shifted:
        if not 0 <= p < trace_length:
            raise LayoutMismatch(
                f"translated POI {p} falls outside trace of length {trace_length}"
            )
    return shifted


def _margin_columns(samples: np.ndarray, template: Template, site_index: int) -> np.ndarray:
    """Signed log-likelihood margin of every trace at one leak site."""
    pois = _site_pois(template, site_index, samples.shape[1])
    margin = np.zeros(samples.shape[0], dtype=np.float64)
    for p, s0, s1 in zip(pois, template.class0, template.class1):
        x = samples[:, p].astype(np.float64)
        ll0 = -0.5 * (np.log(2.0 * np.pi * s0.var) + (x - s0.mu) ** 2 / s0.var)
        ll1 = -0.5 * (np.log(2.0 * np.pi * s1.var) + (x - s1.mu) ** 2 / s1.var)
        margin += ll1 - ll0
    return margin


def classify_trace(
    trace, template_inner: Template, template_neg: Template, layout: TraceLayout
) -> ClassifiedLeaks:
    """Classify every leak site of a single trace."""
    trace = np.asarray(trace)
    if trace.ndim != 1 or trace.shape[0] != layout.trace_length:
        raise LayoutMismatch("trace does not match layout length")
    row = trace[None, :]
    decisions = []
    for u in range(layout.outer_count):
        margins = tuple(
            float(_margin_columns(row, template_inner, layout.inner_site_index(u, k))[0])
            for k in range(1, layout.inner_count + 1)
        )
        neg_margin = float(_margin_columns(row, template_neg, layout.neg_site_index(u))[0])
        decisions.append(
            OuterDecision(
                inner_bits=tuple(m > 0.0 for m in margins),
                neg_bit=neg_margin > 0.0,
                inner_margins=margins,
                neg_margin=neg_margin,
            )
        )
    return ClassifiedLeaks(outer=tuple(decisions))


@dataclass
class RecoveryReport:
    """Machine-readable outcome of a key-recovery run.

    Predicted rates come from the templates' class statistics through the
    overlap model; empirical fields are present only when ground-truth
    labels were supplied. Recovered coefficient values are kept per key,
    f and g separately, in sampling order.
    """

    n_keys: int
    n: int
    poly_count: int
    outer_count: int
    inner_count: int
    keys_f: list[list[int]]
    keys_g: list[list[int]]
    inner_sites_total: int
    inner_sites_ones: int
    neg_sites_total: int
    neg_sites_ones: int
    anomalous_outer_iterations: int
    mean_abs_margin_inner: float
    mean_abs_margin_neg: float
    overlap_inner: float
    overlap_neg: float
    p_site_inner: float
    p_site_neg: float
    p_coefficient: float
    p_full_key: float
    has_labels: bool = False
    inner_site_errors: int = 0
    neg_site_errors: int = 0
    coefficients_correct: int = 0
    coefficients_total: int = 0
    keys_recovered: int = 0
    correct_flags_f: list[str] = field(default_factory=list)
    correct_flags_g: list[str] = field(default_factory=list)

    def fully_recovered(self) -> bool:
        return self.has_labels and self.keys_recovered == self.n_keys

    def to_text(self) -> str:
        lines = [
            f"report_version={REPORT_VERSION}",
            f"n_keys={self.n_keys}",
            f"n={self.n}",
            f"poly_count={self.poly_count}",
            f"outer_count={self.outer_count}",
            f"inner_count={self.inner_count}",
            f"inner_sites_total={self.inner_sites_total}",
            f"inner_sites_ones={self.inner_sites_ones}",
            f"neg_sites_total={self.neg_sites_total}",
            f"neg_sites_ones={self.neg_sites_ones}",
            f"anomalous_outer_iterations={self.anomalous_outer_iterations}",
            f"mean_abs_margin_inner={self.mean_abs_margin_inner!r}",
            f"mean_abs_margin_neg={self.mean_abs_margin_neg!r}",
            f"overlap_inner={self.overlap_inner!r}",
            f"overlap_neg={self.overlap_neg!r}",
            f"p_site_inner={self.p_site_inner!r}",
            f"p_site_neg={self.p_site_neg!r}",
            f"p_coefficient={self.p_coefficient!r}",
            f"p_full_key={self.p_full_key!r}",
            f"has_labels={int(self.has_labels)}",
        ]
        if self.has_labels:
            lines += [
                f"inner_site_errors={self.inner_site_errors}",
                f"neg_site_errors={self.neg_site_errors}",
                f"coefficients_correct={self.coefficients_correct}",
                f"coefficients_total={self.coefficients_total}",
                f"keys_recovered={self.keys_recovered}",
            ]
        for j in range(self.n_keys):
            lines.append(f"key.{j}.f=" + ",".join(str(v) for v in self.keys_f[j]))
            lines.append(f"key.{j}.g=" + ",".join(str(v) for v in self.keys_g[j]))
            if self.has_labels:
                lines.append(f"key.{j}.f_correct={self.correct_flags_f[j]}")
                lines.append(f"key.{j}.g_correct={self.correct_flags_g[j]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RecoveryReport":
        fields_: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ReportFormatError(f"line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            fields_[k] = v
        try:
            if int(fields_["report_version"]) != REPORT_VERSION:
                raise ReportFormatError(
                    f"unsupported report version {fields_['report_version']}"
                )
            n_keys = int(fields_["n_keys"])
            has_labels = bool(int(fields_["has_labels"]))
            keys_f = [
                [int(v) for v in fields_[f"key.{j}.f"].split(",")]
                for j in range(n_keys)
            ]
            keys_g = [
                [int(v) for v in fields_[f"key.{j}.g"].split(",")]
                for j in range(n_keys)
            ]
            report = cls(
                n_keys=n_keys,
                n=int(fields_["n"]),
                poly_count=int(fields_["poly_count"]),
                outer_count=int(fields_["outer_count"]),
                inner_count=int(fields_["inner_count"]),
                keys_f=keys_f,
                keys_g=keys_g,
                inner_sites_total=int(fields_["inner_sites_total"]),
                inner_sites_ones=int(fields_["inner_sites_ones"]),
                neg_sites_total=int(fields_["neg_sites_total"]),
                neg_sites_ones=int(fields_["neg_sites_ones"]),
                anomalous_outer_iterations=int(fields_["anomalous_outer_iterations"]),
                mean_abs_margin_inner=float(fields_["mean_abs_margin_inner"]),
                mean_abs_margin_neg=float(fields_["mean_abs_margin_neg"]),
                overlap_inner=float(fields_["overlap_inner"]),
                overlap_neg=float(fields_["overlap_neg"]),
                p_site_inner=float(fields_["p_site_inner"]),
                p_site_neg=float(fields_["p_site_neg"]),
                p_coefficient=float(fields_["p_coefficient"]),
                p_full_key=float(fields_["p_full_key"]),
                has_labels=has_labels,
            )
            if has_labels:
                report.inner_site_errors = int(fields_["inner_site_errors"])
                report.neg_site_errors = int(fields_["neg_site_errors"])
                report.coefficients_correct = int(fields_["coefficients_correct"])
                report.coefficients_total = int(fields_["coefficients_total"])
                report.keys_recovered = int(fields_["keys_recovered"])
                report.correct_flags_f = [
                    fields_[f"key.{j}.f_correct"] for j in range(n_keys)
                ]
                report.correct_flags_g = [
                    fields_[f"key.{j}.g_correct"] for j in range(n_keys)
                ]
        except KeyError as exc:
            raise ReportFormatError(f"missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ReportFormatError(str(exc)) from None
        return report


def save_report(report: RecoveryReport, path) -> None:
    _atomic_write(path, report.to_text().encode("utf-8"))


def load_report(path) -> RecoveryReport:
    with open(path, "r", encoding="utf-8") as fh:
        return RecoveryReport.from_text(fh.read())


def recover_key(
    trace_set: TraceSet,
    template_inner: Template,
    template_neg: Template,
    layout: TraceLayout,
    params: SamplerParams,
    labels: LabelSet | None = None,
) -> RecoveryReport:
    """Recover every key in a campaign trace set, one trace per coefficient.

    Rows must be ordered the way synthesize_campaign writes them: key by
    key, f before g. Each row is classified in isolation; nothing is
    averaged across traces. With labels supplied the report additionally
    carries empirical per-site and per-key accuracy, comparable against
    the predicted rates derived from the templates themselves.
    """
    if template_inner is None or template_neg is None:
        raise MissingTemplate("both templates are required")
    samples = np.asarray(trace_set.samples)
    if samples.ndim != 2 or samples.shape[1] != layout.trace_length:
        raise LayoutMismatch("trace set does not match layout length")
    if layout.outer_count != params.outer_count:
        raise LayoutMismatch("layout outer count disagrees with parameters")
    rows = samples.shape[0]
    per_key = 2 * params.n
    if rows == 0 or rows % per_key:
        raise LayoutMismatch(
            f"{rows} traces do not divide into keys of {per_key} coefficients"
        )
    n_keys = rows // per_key

    outer = layout.outer_count
    inner = layout.inner_count
    inner_margins = np.empty((rows, outer, inner), dtype=np.float64)
    neg_margins = np.empty((rows, outer), dtype=np.float64)
    for u in range(outer):
        for k in range(1, inner + 1):
            inner_margins[:, u, k - 1] = _margin_columns(
                samples, template_inner, layout.inner_site_index(u, k)
            )
        neg_margins[:, u] = _margin_columns(
            samples, template_neg, layout.neg_site_index(u)
        )
    inner_bits = inner_margins > 0.0
    neg_bits = neg_margins > 0.0

    # Fold bits back into signed coefficients with the sampler's own
    # wrap-around arithmetic (vectorized over rows and outer iterations).
    v = np.zeros((rows, outer), dtype=np.uint32)
    for k in range(1, inner + 1):
        v |= np.where(inner_bits[:, :, k - 1], np.uint32(k), np.uint32(0))
    neg_mask32 = np.where(neg_bits, np.uint32(MASK32), np.uint32(0))
    signed32 = (v ^ neg_mask32) + neg_bits.astype(np.uint32)
    totals = np.zeros(rows, dtype=np.uint32)
    for u in range(outer):
        totals += signed32[:, u]
    values = totals.astype(np.int32)

    per_poly = values.reshape(n_keys, 2, params.n)
    keys_f = [list(map(int, per_poly[j, 0])) for j in range(n_keys)]
    keys_g = [list(map(int, per_poly[j, 1])) for j in range(n_keys)]

    s0, s1 = template_inner.class0[0], template_inner.class1[0]
    ov_inner = gaussian_overlap(s0.mu, s0.var, s1.mu, s1.var).area
    s0, s1 = template_neg.class0[0], template_neg.class1[0]
    ov_neg = gaussian_overlap(s0.mu, s0.var, s1.mu, s1.var).area
    p_site_inner = success_from_overlap(ov_inner)
    p_site_neg = success_from_overlap(ov_neg)
    p_coeff = per_coefficient_success(
        SuccessModel(
            p_inner=p_site_inner,
            p_neg=p_site_neg,
            inner_count=inner,
            outer_count=outer,
        )
    )
    report = RecoveryReport(
        n_keys=n_keys,
        n=params.n,
        poly_count=2,
        outer_count=outer,
        inner_count=inner,
        keys_f=keys_f,
        keys_g=keys_g,
        inner_sites_total=int(inner_bits.size),
        inner_sites_ones=int(inner_bits.sum()),
        neg_sites_total=int(neg_bits.size),
        neg_sites_ones=int(neg_bits.sum()),
        anomalous_outer_iterations=int((inner_bits.sum(axis=2) > 1).sum()),
        mean_abs_margin_inner=float(np.abs(inner_margins).mean()),
        mean_abs_margin_neg=float(np.abs(neg_margins).mean()),
        overlap_inner=ov_inner,
        overlap_neg=ov_neg,
        p_site_inner=p_site_inner,
        p_site_neg=p_site_neg,
        p_coefficient=p_coeff,
        p_full_key=full_key_success(p_coeff, params.n, 2),
    )
    if labels is None:
        return report

    if labels.n_records != rows:
        raise LengthMismatch(f"{labels.n_records} labels for {rows} traces")
    if labels.outer_count != outer or labels.inner_count != inner:
        raise LayoutMismatch("labels disagree with layout iteration counts")
    true_inner = np.asarray(labels.inner_bits, dtype=bool)
    true_neg = np.asarray(labels.neg_bits, dtype=bool)
    true_values = np.asarray(labels.values, dtype=np.int32)
    correct = values == true_values
    per_key_correct = correct.reshape(n_keys, 2, params.n)
    report.has_labels = True
    report.inner_site_errors = int((inner_bits != true_inner).sum())
    report.neg_site_errors = int((neg_bits != true_neg).sum())
    report.coefficients_correct = int(correct.sum())
    report.coefficients_total = int(correct.size)
    report.keys_recovered = int(per_key_correct.all(axis=(1, 2)).sum())
    report.correct_flags_f = [
        "".join("1" if c else "0" for c in per_key_correct[j, 0]) for j in range(n_keys)
    ]
    report.correct_flags_g = [
        "".join("1" if c else "0" for c in per_key_correct[j, 1]) for j in range(n_keys)
    ]
    return report
