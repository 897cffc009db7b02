"""Constant-time CDT Gaussian sampler for lattice key generation.

This module reproduces, bit for bit, the branchless table-scan sampler
used to draw the small secret polynomials (f, g) during FALCON-style key
generation, and records the mask words the scan writes on every
iteration. Those masks are the whole point of the exercise: each one is
either all zeros or all ones, so a power trace of the store instruction
separates the two cases by 64 bits of Hamming weight. The rest of the
package simulates, profiles, and exploits exactly that.

All arithmetic is unsigned two's-complement, 64-bit unless noted, with
explicit wrap masks where Python integers would otherwise grow.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DomainError, TableFormatError

MASK64 = (1 << 64) - 1
MASK63 = (1 << 63) - 1
MASK32 = (1 << 32) - 1

# SplitMix64 constants (Steele, Lea, Flood; widely reproduced).
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

DEFAULT_Q = 12289


def splitmix64(x: int) -> int:
    """Finalizing mix of SplitMix64: bijective scramble of a 64-bit word."""
    x &= MASK64
    x ^= x >> 30
    x = (x * _MIX1) & MASK64
    x ^= x >> 27
    x = (x * _MIX2) & MASK64
    x ^= x >> 31
    return x


@dataclass
class WordSource:
    """Deterministic counter-mode 64-bit word generator.

    The word at counter c is splitmix64(seed + (c + 1) * GOLDEN), i.e. the
    (c + 1)-th output of a SplitMix64 stream seeded with `seed`. Equal
    (seed, counter) pairs always produce equal words, so a source can be
    copied, replayed, or advanced independently per task.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= MASK64:
            raise DomainError("seed must be a 64-bit value")
        if not 0 <= self.counter <= MASK64:
            raise DomainError("counter must be a 64-bit value")

    def next_u64(self) -> int:
        self.counter = (self.counter + 1) & MASK64
        return splitmix64((self.seed + self.counter * _GOLDEN) & MASK64)


class SequenceWordSource:
    """Word source that replays a scripted list, then an optional fallback.

    Used to drive the sampler through chosen control-flow corners: the
    scripted words stand in for the first random draws, and any further
    draws come from `fallback` (or fail loudly if none was given).
    """

    def __init__(self, words, fallback: WordSource | None = None):
        self._words = [int(w) & MASK64 for w in words]
        self._pos = 0
        self._fallback = fallback

    def next_u64(self) -> int:
        if self._pos < len(self._words):
            w = self._words[self._pos]
            self._pos += 1
            return w
        if self._fallback is None:
            raise DomainError("scripted word source exhausted")
        return self._fallback.next_u64()


def next_word(source) -> int:
    """Return the word at the source's current counter and advance it."""
    return source.next_u64()


def word_block(seed: int, counter: int, count: int) -> np.ndarray:
    """Vectorized WordSource: the `count` words following `counter`.

    Equivalent to calling next_word on WordSource(seed, counter) `count`
    times, returned as a uint64 array.
    """
    if count < 0:
        raise DomainError("count must be non-negative")
    idx = np.arange(1, count + 1, dtype=np.uint64) + np.uint64(counter & MASK64)
    x = np.uint64(seed & MASK64) + idx * np.uint64(_GOLDEN)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX2)
    x ^= x >> np.uint64(31)
    return x


def derive_subseed(seed: int, index: int) -> int:
    """Derive the index-th child seed of a master seed.

    Children are the master's own SplitMix64 outputs, so distinct indices
    yield distinct, statistically independent streams.
    """
    if index < 0:
        raise DomainError("index must be non-negative")
    return splitmix64((seed + (index + 1) * _GOLDEN) & MASK64)


def msb_mask(x: int) -> int:
    """Spread bit 63 of x into a full 64-bit word: 0 or 2**64 - 1."""
    if not 0 <= x <= MASK64:
        raise DomainError("msb_mask expects a 64-bit value")
    return (-(x >> 63)) & MASK64


@dataclass(frozen=True)
class GaussCdtTable:
    """Scaled cumulative-distribution table driving the sampler.

    entries[0] thresholds the first draw (probability of drawing zero
    magnitude); entries[1:] threshold the second draw and form a
    non-increasing tail, one entry per inner-loop iteration. Every entry
    keeps bit 63 clear since draws are reduced to 63 bits before the
    subtraction trick.
    """

    entries: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.entries) < 2:
            raise TableFormatError("table needs at least two entries")
        for i, e in enumerate(self.entries):
            if not 0 <= e <= MASK63:
                raise TableFormatError(
                    f"entry {i} must be a 63-bit value, got {e}"
                )
        tail = self.entries[1:]
        for i in range(len(tail) - 1):
            if tail[i] < tail[i + 1]:
                raise TableFormatError(
                    f"tail entries must be non-increasing, "
                    f"entry {i + 1} < entry {i + 2}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def inner_count(self) -> int:
        """Number of inner-loop iterations a single scan performs."""
        return len(self.entries) - 1


def parse_cdt_table(text: str) -> GaussCdtTable:
    """Parse a table from text: one decimal entry per line, '#' comments."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            entries.append(int(line))
        except ValueError:
            raise TableFormatError(
                f"line {lineno}: expected a decimal integer, got {line!r}"
            ) from None
    return GaussCdtTable(entries=tuple(entries))


def load_cdt_table(path) -> GaussCdtTable:
    """Load and validate a CDT table file."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cdt_table(fh.read())


@functools.lru_cache(maxsize=1)
def default_table() -> GaussCdtTable:
    """The bundled key-generation table (q = 12289, 27 entries)."""
    text = resources.files("cdtleak").joinpath("data/gauss_1024_12289.txt").read_text()
    return parse_cdt_table(text)


@dataclass(frozen=True)
class SamplerParams:
    """Ring dimension and modulus for one key-generation run.

    logn selects n = 2**logn; the sampler accumulates 2**(10 - logn)
    table scans per coefficient so the coefficient variance scales with
    1/n while the table itself stays fixed.
    """

    logn: int
    q: int = DEFAULT_Q

    def __post_init__(self) -> None:
        if not 1 <= self.logn <= 10:
            raise DomainError("logn must be in [1, 10]")
        if self.q <= 0:
            raise DomainError("q must be positive")

    @property
    def n(self) -> int:
        return 1 << self.logn

    @property
    def outer_count(self) -> int:
        return 1 << (10 - self.logn)


def sigma_fg(q: int, n: int) -> float:
    """Per-coefficient standard deviation of the secret polynomials.

    sigma = 1.17 * sqrt(q) / sqrt(2n), so that the expected norm of the
    concatenated pair (f, g) lands at 1.17 * sqrt(q).
    """
    if q <= 0 or n <= 0:
        raise DomainError("q and n must be positive")
    return 1.17 * (q ** 0.5) / ((2 * n) ** 0.5)


@dataclass(frozen=True)
class IterationLeakRecord:
    """Everything one outer iteration writes that an attacker can see.

    inner_masks[k-1] is the 64-bit mask computed at inner iteration k: all
    ones exactly when the scan latched at position k, else zero. At most
    one mask per record is all ones. neg_mask spreads the sign draw the
    same way. v_value is the magnitude the masks encode and signed_v the
    32-bit signed result after conditional negation.
    """

    inner_masks: tuple[int, ...]
    neg_mask: int
    v_value: int
    signed_v: int


@dataclass(frozen=True)
class SecretCoefficient:
    """One signed coefficient plus the leak records that produced it."""

    value: int
    leaks: tuple[IterationLeakRecord, ...]


@dataclass(frozen=True)
class SecretPolynomial:
    """A polynomial of sampled coefficients, kept with their leaks."""

    coefficients: tuple[SecretCoefficient, ...]

    def values(self) -> list[int]:
        return [c.value for c in self.coefficients]

    def __len__(self) -> int:
        return len(self.coefficients)


def sample_coefficient(table: GaussCdtTable, params: SamplerParams, source) -> SecretCoefficient:
    """Run the branchless table scan and capture its leak records.

    Per outer iteration: the first draw's top bit chooses the sign and its
    low 63 bits decide, against entries[0], whether the magnitude is
    forced to zero; the second draw is scanned against entries[1:], and a
    one-shot flag turns exactly one comparison flip into an all-ones mask
    that selects the magnitude. The conditional negation and the final
    accumulation both wrap at 32 bits, mirroring the reference arithmetic.
    """
    entries = table.entries
    val = 0
    records = []
    for _ in range(params.outer_count):
        r = next_word(source) & MASK64
        neg = r >> 63
        r &= MASK63
        f = ((r - entries[0]) & MASK64) >> 63
        v = 0
        r = next_word(source) & MASK63
        inner_masks = []
        for k in range(1, len(entries)):
            t = (((r - entries[k]) & MASK64) >> 63) ^ 1
            mask = (-(t & (f ^ 1))) & MASK64
            inner_masks.append(mask)
            v |= k & mask
            f |= t
        neg_mask = (-neg) & MASK64
        signed32 = ((v ^ ((-neg) & MASK32)) + neg) & MASK32
        signed_v = signed32 - (1 << 32) if signed32 >> 31 else signed32
        records.append(
            IterationLeakRecord(
                inner_masks=tuple(inner_masks),
                neg_mask=neg_mask,
                v_value=v,
                signed_v=signed_v,
            )
        )
        val = (val + signed32) & MASK32
    value = val - (1 << 32) if val >> 31 else val
    return SecretCoefficient(value=value, leaks=tuple(records))


def generate_polynomials(
    seed: int, params: SamplerParams, table: GaussCdtTable | None = None
) -> tuple[SecretPolynomial, SecretPolynomial]:
    """Sample the key pair (f, g): 2n coefficients off one seeded stream."""
    if table is None:
        table = default_table()
    source = WordSource(seed=seed & MASK64)
    polys = []
    for _ in range(2):
        coeffs = tuple(
            sample_coefficient(table, params, source) for _ in range(params.n)
        )
        polys.append(SecretPolynomial(coefficients=coeffs))
    return polys[0], polys[1]
