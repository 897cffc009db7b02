"""Hamming-weight power model and synthetic trace generation.

A trace covers one coefficient: for every outer iteration of the sampler,
one block of samples per inner-loop iteration followed by a short tail
block for the sign handling. Exactly one sample inside each block carries
signal, at a configurable offset: the device writes the iteration's mask
word there, so the sample mean shifts by alpha times the mask's Hamming
weight (0 or 64). Everything else is baseline plus Gaussian noise.

Noise is generated from the same deterministic word-source family as the
sampler input, one derived sub-seed per trace, so whole campaigns are
reproducible from a single 64-bit seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import traceio
from .errors import DomainError, LayoutMismatch
from .sampler import (
    _GOLDEN,
    _MIX1,
    _MIX2,
    MASK63,
    MASK64,
    GaussCdtTable,
    SamplerParams,
    SecretCoefficient,
    SecretPolynomial,
    SequenceWordSource,
    WordSource,
    derive_subseed,
    generate_polynomials,
    sample_coefficient,
    word_block,
)

DEFAULT_ALPHA = 30.0 / 64.0
DEFAULT_BETA = 40.0
DEFAULT_NOISE_SIGMA = 4.0


def hamming_weight(word: int) -> int:
    """Number of set bits in a 64-bit word."""
    if not 0 <= word <= MASK64:
        raise DomainError("hamming_weight expects a 64-bit value")
    return word.bit_count()


@dataclass(frozen=True)
class LeakModel:
    """Affine Hamming-weight leakage: sample = beta + alpha * HW + noise.

    Units are millivolts throughout; alpha is the per-bit contribution,
    so a full 64-bit mask shifts the leaking sample by 64 * alpha.
    """

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or not np.isfinite(self.beta):
            raise DomainError("alpha and beta must be finite")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise DomainError("noise_sigma must be finite and non-negative")


@dataclass(frozen=True)
class TraceLayout:
    """Sample bookkeeping for one trace.

    Per outer iteration: inner_count blocks of samples_per_inner samples,
    then samples_per_outer_tail tail samples. The mask write of inner
    iteration k lands at offset leak_offset_inner inside its block; the
    sign-mask write lands at leak_offset_neg inside the tail.
    """

    outer_count: int
    inner_count: int
    samples_per_inner: int = 8
    samples_per_outer_tail: int = 8
    leak_offset_inner: int = 3
    leak_offset_neg: int = 3

    def __post_init__(self) -> None:
        if self.outer_count < 1 or self.inner_count < 1:
            raise DomainError("iteration counts must be positive")
        if self.samples_per_inner < 1 or self.samples_per_outer_tail < 1:
            raise DomainError("block sizes must be positive")
        if not 0 <= self.leak_offset_inner < self.samples_per_inner:
            raise DomainError("leak_offset_inner outside its block")
        if not 0 <= self.leak_offset_neg < self.samples_per_outer_tail:
            raise DomainError("leak_offset_neg outside its block")

    @classmethod
    def for_params(cls, params: SamplerParams, table: GaussCdtTable, **kwargs) -> "TraceLayout":
        return cls(outer_count=params.outer_count, inner_count=table.inner_count, **kwargs)

    @property
    def outer_block(self) -> int:
        return self.inner_count * self.samples_per_inner + self.samples_per_outer_tail

    @property
    def trace_length(self) -> int:
        return self.outer_count * self.outer_block

    def inner_site_index(self, outer: int, k: int) -> int:
        """Sample index of the mask write at inner iteration k (1-based)."""
        if not 0 <= outer < self.outer_count:
            raise DomainError("outer index out of range")
        if not 1 <= k <= self.inner_count:
            raise DomainError("inner index out of range")
        return outer * self.outer_block + (k - 1) * self.samples_per_inner + self.leak_offset_inner

    def neg_site_index(self, outer: int) -> int:
        """Sample index of the sign-mask write in outer iteration `outer`."""
        if not 0 <= outer < self.outer_count:
            raise DomainError("outer index out of range")
        return (
            outer * self.outer_block
            + self.inner_count * self.samples_per_inner
            + self.leak_offset_neg
        )

    def inner_site_matrix(self) -> np.ndarray:
        """All inner leak indices, shape (outer_count, inner_count)."""
        u = np.arange(self.outer_count)[:, None] * self.outer_block
        k = np.arange(self.inner_count)[None, :] * self.samples_per_inner
        return u + k + self.leak_offset_inner

    def neg_site_vector(self) -> np.ndarray:
        """All sign leak indices, shape (outer_count,)."""
        return (
            np.arange(self.outer_count) * self.outer_block
            + self.inner_count * self.samples_per_inner
            + self.leak_offset_neg
        )


def _box_muller(words: np.ndarray) -> np.ndarray:
    """Map uint64 words (even count along last axis) to standard normals."""
    m = words.shape[-1] // 2
    u1 = ((words[..., :m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    u2 = ((words[..., m : 2 * m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def gaussian_block(seed: int, count: int) -> np.ndarray:
    """`count` standard normal deviates, fully determined by `seed`."""
    if count < 0:
        raise DomainError("count must be non-negative")
    if count == 0:
        return np.zeros(0)
    pairs = (count + 1) // 2
    return _box_muller(word_block(seed, 0, 2 * pairs))[:count]


def _gaussian_matrix(subseeds: np.ndarray, count: int) -> np.ndarray:
    """Row i holds gaussian_block(subseeds[i], count); fully vectorized."""
    pairs = (count + 1) // 2
    offsets = np.arange(1, 2 * pairs + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
    x = subseeds.astype(np.uint64)[:, None] + offsets[None, :]
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX2)
    x ^= x >> np.uint64(31)
    return _box_muller(x)[:, :count]


def _check_leaks(leaks, layout: TraceLayout) -> None:
    if len(leaks) != layout.outer_count:
        raise LayoutMismatch(
            f"{len(leaks)} leak records for layout with {layout.outer_count} outer iterations"
        )
    for rec in leaks:
        if len(rec.inner_masks) != layout.inner_count:
            raise LayoutMismatch(
                f"record has {len(rec.inner_masks)} inner masks, layout wants {layout.inner_count}"
            )


def synthesize_trace(leaks, model: LeakModel, layout: TraceLayout, noise_seed: int) -> np.ndarray:
    """Render one coefficient's leak records into a float32 trace."""
    _check_leaks(leaks, layout)
    trace = model.beta + model.noise_sigma * gaussian_block(noise_seed, layout.trace_length)
    for u, rec in enumerate(leaks):
        for k, mask in enumerate(rec.inner_masks, start=1):
            trace[layout.inner_site_index(u, k)] += model.alpha * hamming_weight(mask)
        trace[layout.neg_site_index(u)] += model.alpha * hamming_weight(rec.neg_mask)
    return trace.astype(np.float32)


def _leak_bits(coefficients) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack mask bits and values from coefficients into label arrays."""
    values = np.array([c.value for c in coefficients], dtype=np.int32)
    inner = np.array(
        [[[m != 0 for m in rec.inner_masks] for rec in c.leaks] for c in coefficients],
        dtype=bool,
    )
    neg = np.array(
        [[rec.neg_mask != 0 for rec in c.leaks] for c in coefficients], dtype=bool
    )
    return values, inner, neg


def build_label_set(coefficients) -> traceio.LabelSet:
    """Ground-truth labels for a flat list of sampled coefficients."""
    coefficients = list(coefficients)
    if not coefficients:
        raise DomainError("no coefficients to label")
    values, inner, neg = _leak_bits(coefficients)
    return traceio.LabelSet(values=values, inner_bits=inner, neg_bits=neg)


def _render_traces(
    coefficients,
    model: LeakModel,
    layout: TraceLayout,
    noise_subseeds: np.ndarray,
    threads: int = 1,
) -> np.ndarray:
    """Vectorized synthesize_trace over many coefficients.

    Bit-identical to calling synthesize_trace per coefficient with the
    matching sub-seed; chunks only bound memory, and threads only split
    chunks, so neither changes the output.
    """
    n = len(coefficients)
    length = layout.trace_length
    _, inner_bits, neg_bits = _leak_bits(coefficients)
    inner_cols = layout.inner_site_matrix().reshape(-1)
    neg_cols = layout.neg_site_vector()
    out = np.empty((n, length), dtype=np.float32)
    inner_gain = model.alpha * 64
    chunk = max(1, (1 << 22) // max(length, 1))

    def render(lo: int, hi: int) -> None:
        block = model.beta + model.noise_sigma * _gaussian_matrix(
            noise_subseeds[lo:hi], length
        )
        block[:, inner_cols] += inner_gain * inner_bits[lo:hi].reshape(hi - lo, -1)
        block[:, neg_cols] += inner_gain * neg_bits[lo:hi]
        out[lo:hi] = block.astype(np.float32)

    spans = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda s: render(*s), spans))
    else:
        for lo, hi in spans:
            render(lo, hi)
    return out


def campaign_metadata(
    seed: int,
    params: SamplerParams,
    table: GaussCdtTable,
    model: LeakModel,
    layout: TraceLayout,
    kind: str,
    **extra: str,
) -> dict[str, str]:
    """Self-describing metadata so a trace file can be attacked standalone."""
    md = {
        "kind": kind,
        "seed": str(seed),
        "logn": str(params.logn),
        "q": str(params.q),
        "outer_count": str(layout.outer_count),
        "inner_count": str(layout.inner_count),
        "samples_per_inner": str(layout.samples_per_inner),
        "samples_per_outer_tail": str(layout.samples_per_outer_tail),
        "leak_offset_inner": str(layout.leak_offset_inner),
        "leak_offset_neg": str(layout.leak_offset_neg),
        "alpha": repr(model.alpha),
        "beta": repr(model.beta),
        "noise_sigma": repr(model.noise_sigma),
    }
    md.update(extra)
    return md


def layout_from_metadata(md: dict[str, str]) -> TraceLayout:
    return TraceLayout(
        outer_count=int(md["outer_count"]),
        inner_count=int(md["inner_count"]),
        samples_per_inner=int(md["samples_per_inner"]),
        samples_per_outer_tail=int(md["samples_per_outer_tail"]),
        leak_offset_inner=int(md["leak_offset_inner"]),
        leak_offset_neg=int(md["leak_offset_neg"]),
    )


def model_from_metadata(md: dict[str, str]) -> LeakModel:
    return LeakModel(
        alpha=float(md["alpha"]),
        beta=float(md["beta"]),
        noise_sigma=float(md["noise_sigma"]),
    )


def params_from_metadata(md: dict[str, str]) -> SamplerParams:
    return SamplerParams(logn=int(md["logn"]), q=int(md["q"]))


def synthesize_campaign(
    seed: int,
    params: SamplerParams,
    table: GaussCdtTable,
    model: LeakModel,
    layout: TraceLayout | None = None,
    n_keys: int = 1,
    threads: int = 1,
) -> tuple[traceio.TraceSet, traceio.LabelSet, list[tuple[SecretPolynomial, SecretPolynomial]]]:
    """Simulate full key generations, one trace per coefficient.

    Rows are ordered key by key, f before g, coefficients ascending. The
    sampler stream for key j uses child seed j of `seed`; the noise stream
    for row r uses child seed n_keys + r. Returns the traces, their
    labels, and the sampled keys.
    """
    if n_keys < 1:
        raise DomainError("n_keys must be positive")
    if layout is None:
        layout = TraceLayout.for_params(params, table)
    if (layout.outer_count, layout.inner_count) != (params.outer_count, table.inner_count):
        raise LayoutMismatch("layout disagrees with sampler parameters or table")
    keys = []
    coefficients: list[SecretCoefficient] = []
    for j in range(n_keys):
        f, g = generate_polynomials(derive_subseed(seed, j), params, table)
        keys.append((f, g))
        coefficients.extend(f.coefficients)
        coefficients.extend(g.coefficients)
    subseeds = np.array(
        [derive_subseed(seed, n_keys + r) for r in range(len(coefficients))],
        dtype=np.uint64,
    )
    samples = _render_traces(coefficients, model, layout, subseeds, threads=threads)
    md = campaign_metadata(
        seed, params, table, model, layout, kind="campaign", n_keys=str(n_keys)
    )
    labels = build_label_set(coefficients)
    return traceio.TraceSet(samples=samples, metadata=md), labels, keys


def plant_control_words(
    table: GaussCdtTable, neg_bit: int, fire_slot: int | None, source
) -> tuple[int, int]:
    """Craft the two input words of one outer iteration.

    The returned pair makes the scan take a chosen path: sign bit equal to
    neg_bit, and the inner latch firing exactly at fire_slot, or nowhere
    (magnitude zero) when fire_slot is None. Residual randomness inside
    the chosen ranges comes from `source`.
    """
    entries = table.entries
    if neg_bit not in (0, 1):
        raise DomainError("neg_bit must be 0 or 1")
    if fire_slot is None:
        if entries[0] == 0:
            raise DomainError("table gives zero probability to magnitude 0")
        low = source.next_u64() % entries[0]
        return (neg_bit << 63) | low, source.next_u64() & MASK63
    if not 1 <= fire_slot <= table.inner_count:
        raise DomainError("fire_slot out of range")
    span0 = MASK63 + 1 - entries[0]
    if span0 == 0:
        raise DomainError("table never leaves the zero branch")
    w1 = (neg_bit << 63) | (entries[0] + source.next_u64() % span0)
    hi = MASK63 + 1 if fire_slot == 1 else entries[fire_slot - 1]
    lo = entries[fire_slot]
    if hi <= lo:
        raise DomainError(f"slot {fire_slot} cannot fire: empty threshold range")
    w2 = lo + source.next_u64() % (hi - lo)
    return w1, w2


def synthesize_profiling_set(
    seed: int,
    params: SamplerParams,
    table: GaussCdtTable,
    model: LeakModel,
    layout: TraceLayout | None = None,
    n_traces: int = 10000,
    fire_slot: int = 1,
    threads: int = 1,
) -> tuple[traceio.TraceSet, traceio.LabelSet]:
    """Simulate a profiling campaign with planted classes.

    The first outer iteration of every trace is steered through scripted
    input words: the first half of the traces latches at `fire_slot`
    (mask all ones there), the second half takes the zero branch (no
    inner mask fires); the sign bit alternates trace by trace. The two
    plantings are exactly balanced and mutually orthogonal when n_traces
    is a multiple of 4. Remaining outer iterations run unscripted.

    Class labels are recoverable from the returned LabelSet: the inner
    class of trace i is inner_bits[i, 0, fire_slot - 1], the sign class
    is neg_bits[i, 0].
    """
    if n_traces < 4:
        raise DomainError("n_traces must be at least 4")
    if layout is None:
        layout = TraceLayout.for_params(params, table)
    if (layout.outer_count, layout.inner_count) != (params.outer_count, table.inner_count):
        raise LayoutMismatch("layout disagrees with sampler parameters or table")
    coefficients = []
    for i in range(n_traces):
        plant = WordSource(seed=derive_subseed(seed, i))
        slot = fire_slot if i < n_traces // 2 else None
        w1, w2 = plant_control_words(table, neg_bit=i & 1, fire_slot=slot, source=plant)
        source = SequenceWordSource([w1, w2], fallback=plant)
        coefficients.append(sample_coefficient(table, params, source))
    subseeds = np.array(
        [derive_subseed(seed, n_traces + i) for i in range(n_traces)], dtype=np.uint64
    )
    samples = _render_traces(coefficients, model, layout, subseeds, threads=threads)
    md = campaign_metadata(
        seed,
        params,
        table,
        model,
        layout,
        kind="profiling",
        fire_slot=str(fire_slot),
    )
    return traceio.TraceSet(samples=samples, metadata=md), build_label_set(coefficients)
