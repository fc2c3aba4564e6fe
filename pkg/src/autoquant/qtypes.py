"""Fixed-point quantized types: encode/decode, dithered rounding, range tracking.

A quantity is stored as a signed integer ``u`` with ``b + 1`` physical bits
(two's complement, ``u in [-2**b, 2**b - 1]``) and decoded as ``u * delta``
where ``delta = R * 2**-b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

B_MIN = 0
B_MAX = 56
DEFAULT_SAFETY_FACTOR = 2.0
DEFAULT_MIN_RANGE = 1.0


class QuantizationError(ValueError):
    """Raised on contract violations such as non-finite inputs."""


@dataclass(frozen=True)
class QuantSpec:
    fraction_bits: int
    range: float
    b_min: int = field(default=B_MIN, repr=False, compare=False)
    b_max: int = field(default=B_MAX, repr=False, compare=False)

    def __post_init__(self):
        if not (self.range > 0 and math.isfinite(self.range)):
            raise QuantizationError(f"range must be positive and finite, got {self.range}")
        if int(self.fraction_bits) != self.fraction_bits:
            raise QuantizationError("fraction_bits must be an integer")
        if not self.b_min <= self.fraction_bits <= self.b_max:
            raise QuantizationError(
                f"fraction_bits {self.fraction_bits} outside [{self.b_min}, {self.b_max}]"
            )
        object.__setattr__(self, "fraction_bits", int(self.fraction_bits))
        object.__setattr__(self, "range", float(self.range))

    @property
    def resolution(self) -> float:
        return math.ldexp(self.range, -self.fraction_bits)

    @property
    def physical_bits(self) -> int:
        return self.fraction_bits + 1

    @property
    def min_code(self) -> int:
        return -(1 << self.fraction_bits)

    @property
    def max_code(self) -> int:
        return (1 << self.fraction_bits) - 1

    def with_bits(self, fraction_bits: int) -> "QuantSpec":
        b = min(max(int(fraction_bits), self.b_min), self.b_max)
        return QuantSpec(b, self.range, self.b_min, self.b_max)


@dataclass
class QuantStats:
    """Running counters for one quantity's store operations."""

    stores: int = 0
    saturated: int = 0
    round_ups: int = 0
    round_downs: int = 0

    def merge(self, other: "QuantStats") -> "QuantStats":
        return QuantStats(
            self.stores + other.stores,
            self.saturated + other.saturated,
            self.round_ups + other.round_ups,
            self.round_downs + other.round_downs,
        )

    @property
    def saturation_rate(self) -> float:
        return self.saturated / self.stores if self.stores else 0.0

    @property
    def round_ratio(self) -> float:
        """round-ups / round-downs; ``nan`` when nothing was rounded down."""
        return self.round_ups / self.round_downs if self.round_downs else float("nan")


class DitherRng:
    """Counter-based uniform noise on ``[-1/2, 1/2)``.

    Values are a pure function of ``(seed, stream, counter)``: every draw
    starts at a fresh Philox block, so replaying a counter replays the noise.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def at(self, counter: int, n: int) -> np.ndarray:
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([counter & 0xFFFFFFFFFFFFFFFF, counter >> 64, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen).random(n) - 0.5

    def draw(self, n: int) -> np.ndarray:
        xi = self.at(self.counter, n)
        # Philox emits four 64-bit words per block; one double per word.
        self.counter += max(1, -(-n // 4))
        return xi

    def spawn(self, stream: int) -> "DitherRng":
        return DitherRng(self.seed, stream)


def _as_checked_array(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("cannot encode non-finite value")
    return arr


def _saturate(scaled: np.ndarray, spec: QuantSpec, stats: QuantStats | None) -> np.ndarray:
    lo, hi = spec.min_code, spec.max_code
    # clip in float first so the int64 cast cannot overflow
    clipped = np.clip(scaled, float(lo), float(hi) + 1.0)
    u = clipped.astype(np.int64)
    u = np.clip(u, lo, hi)
    if stats is not None:
        stats.saturated += int(np.count_nonzero((scaled < lo) | (scaled > hi)))
    return u


def _tally_rounding(u: np.ndarray, scaled_exact: np.ndarray, stats: QuantStats | None) -> None:
    if stats is None:
        return
    stats.stores += int(u.size)
    stats.round_ups += int(np.count_nonzero(u > scaled_exact))
    stats.round_downs += int(np.count_nonzero(u < scaled_exact))


def encode(v, spec: QuantSpec, stats: QuantStats | None = None):
    """Round ``v / delta`` half-to-even and saturate to the stored range."""
    arr = _as_checked_array(v)
    scaled = arr / spec.resolution
    u = _saturate(np.rint(scaled), spec, stats)
    _tally_rounding(u, scaled, stats)
    return int(u) if u.ndim == 0 else u


def encode_dithered(v, spec: QuantSpec, rng: DitherRng, stats: QuantStats | None = None):
    """Round ``v / delta + xi`` with ``xi ~ U(-1/2, 1/2)`` (floor(x + 1/2) convention)."""
    arr = np.asarray(v, dtype=np.float64)
    return encode_with_noise(arr, spec, rng.draw(arr.size).reshape(arr.shape), stats)


def encode_with_noise(v, spec: QuantSpec, xi, stats: QuantStats | None = None):
    """Dithered encode with caller-supplied noise ``xi`` in ``[-1/2, 1/2)``."""
    arr = _as_checked_array(v)
    scaled = arr / spec.resolution
    u = _saturate(np.floor(scaled + xi + 0.5), spec, stats)
    _tally_rounding(u, scaled, stats)
    return int(u) if u.ndim == 0 else u


def decode(u, spec: QuantSpec):
    arr = np.asarray(u)
    out = arr.astype(np.float64) * spec.resolution
    return float(out) if out.ndim == 0 else out


def quantize(v, spec: QuantSpec, rng: DitherRng | None = None, stats: QuantStats | None = None):
    """decode(encode(v)), dithered when ``rng`` is given."""
    u = encode(v, spec, stats) if rng is None else encode_dithered(v, spec, rng, stats)
    return decode(u, spec)


@dataclass
class RangeTracker:
    max_abs: float = 0.0
    safety_factor: float = DEFAULT_SAFETY_FACTOR
    min_range: float = DEFAULT_MIN_RANGE

    def __post_init__(self):
        if self.safety_factor < 1:
            raise ValueError("safety_factor must be >= 1")

    def observe(self, v) -> "RangeTracker":
        arr = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise QuantizationError("range tracker observed a non-finite value")
        if arr.size:
            self.max_abs = max(self.max_abs, float(np.max(np.abs(arr))))
        return self

    def merge(self, other: "RangeTracker") -> "RangeTracker":
        return RangeTracker(max(self.max_abs, other.max_abs), self.safety_factor, self.min_range)

    @property
    def range(self) -> float:
        if self.max_abs == 0.0:
            return self.min_range
        return self.safety_factor * self.max_abs
