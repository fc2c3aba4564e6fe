"""Per-quantity bit allocation from squared-adjoint tallies.

Quantization errors are modeled as independent and uniform on
``[-delta/2, delta/2]``, so the expected squared deviation of ``z`` is
``sum_h delta_h**2 g_h / 12``.  Two closed-form allocations are offered:

* error-bounded: fewest fraction bits ``sum_h P_h b_h`` such that the
  predicted standard deviation is at most ``eps_err * |z|``;
* memory-bounded: smallest predicted error whose physical bits
  ``sum_h P_h (b_h + 1)`` fit into ``eps_mem * M``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .qtypes import B_MAX, B_MIN, DEFAULT_MIN_RANGE, QuantSpec

log = logging.getLogger(__name__)

DEFAULT_Z_FLOOR = 1e-12


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class QuantityInfo:
    name: str
    count: int
    range: float
    g: float

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"{self.name}: element count must be >= 1")
        if not self.g >= 0:
            raise ValueError(f"{self.name}: gradient tally must be >= 0")
        if not self.range >= 0:
            raise ValueError(f"{self.name}: range must be >= 0")


@dataclass
class SolverRequest:
    mode: str  # "error_bounded" | "memory_bounded"
    tolerance: float
    z: float
    quantities: list[QuantityInfo]
    reference_bits: int = 32
    b_min: int = B_MIN
    b_max: int = B_MAX
    z_floor: float = DEFAULT_Z_FLOOR
    min_range: float = DEFAULT_MIN_RANGE

    def __post_init__(self):
        if self.mode not in ("error_bounded", "memory_bounded"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "error_bounded" and not self.tolerance > 0:
            raise ValueError("error tolerance must be positive")
        if self.mode == "memory_bounded" and not 0 < self.tolerance < 1:
            raise ValueError("compression rate must lie in (0, 1)")
        if self.reference_bits not in (32, 64):
            raise ValueError("reference_bits must be 32 or 64")

    @property
    def reference_memory(self) -> int:
        """M: bits the quantized attributes take at reference precision."""
        return self.reference_bits * sum(q.count for q in self.quantities)

    @property
    def error_target(self) -> float:
        """Absolute standard-deviation budget ``eps_err * max(|z|, z_floor)``."""
        return self.tolerance * max(abs(self.z), self.z_floor)


@dataclass
class QuantScheme:
    specs: dict[str, QuantSpec]
    counts: dict[str, int]
    tallies: dict[str, float]
    mode: str = ""
    tolerance: float = math.nan
    reference_bits: int = 32
    continuous_bits: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def fraction_bits(self) -> int:
        return sum(self.counts[k] * s.fraction_bits for k, s in self.specs.items())

    @property
    def physical_bits(self) -> int:
        return sum(self.counts[k] * s.physical_bits for k, s in self.specs.items())

    @property
    def reference_memory(self) -> int:
        return self.reference_bits * sum(self.counts.values())

    @property
    def compression_rate(self) -> float:
        """Physical bits over reference bits (lower is smaller)."""
        return self.physical_bits / self.reference_memory

    @property
    def sigma_pred(self) -> float:
        return predict_error(self, self.tallies)

    def with_bits(self, bits: Mapping[str, int]) -> "QuantScheme":
        specs = {k: s.with_bits(bits.get(k, s.fraction_bits)) for k, s in self.specs.items()}
        return QuantScheme(specs, dict(self.counts), dict(self.tallies), self.mode, self.tolerance,
                           self.reference_bits)

    def bits(self) -> dict[str, int]:
        return {k: s.fraction_bits for k, s in self.specs.items()}


def predict_error(scheme, tallies: Mapping[str, float]) -> float:
    """sqrt(sum_h delta_h**2 g_h / 12)."""
    specs = getattr(scheme, "specs", scheme)
    total = math.fsum(_resolution(specs[k]) ** 2 * tallies[k] for k in specs)
    return math.sqrt(total / 12.0)


def predicted_variance(deltas: Mapping[str, float], tallies: Mapping[str, float]) -> float:
    return math.fsum(deltas[k] ** 2 * tallies[k] for k in deltas) / 12.0


def _resolution(spec) -> float:
    return spec.resolution if isinstance(spec, QuantSpec) else float(spec)


def _range_of(q: QuantityInfo, req: SolverRequest) -> float:
    return q.range if q.range > 0 else req.min_range


def _scheme(req: SolverRequest, bits: dict[str, int], cont: dict[str, float]) -> QuantScheme:
    specs = {q.name: QuantSpec(bits[q.name], _range_of(q, req), req.b_min, req.b_max) for q in req.quantities}
    return QuantScheme(
        specs,
        {q.name: q.count for q in req.quantities},
        {q.name: q.g for q in req.quantities},
        req.mode,
        req.tolerance,
        req.reference_bits,
        cont,
    )


def optimal_resolutions(req: SolverRequest) -> dict[str, float]:
    """Continuous error-bounded optimum ``delta_h``.

    ``delta_h = sqrt(12 P_h target**2 / (g_h sum P))`` with the sum over
    quantities that carry gradient; ``g_h = 0`` quantities are unconstrained
    and get ``inf``.
    """
    active = [q for q in req.quantities if q.g > 0]
    total_p = sum(q.count for q in active)
    target = req.error_target
    out = {}
    for q in req.quantities:
        if q.g > 0:
            out[q.name] = math.sqrt(12.0 * q.count * target**2 / (q.g * total_p))
        else:
            out[q.name] = math.inf
    return out


def solve_error_bounded(req: SolverRequest) -> QuantScheme:
    if req.mode != "error_bounded":
        raise ValueError("request is not error-bounded")
    deltas = optimal_resolutions(req)
    bits, cont = {}, {}
    warnings = []
    for q in req.quantities:
        d = deltas[q.name]
        if math.isinf(d):
            cont[q.name] = -math.inf
            bits[q.name] = req.b_min
            continue
        b = -math.log2(d / _range_of(q, req))
        cont[q.name] = b
        b_int = math.ceil(b)
        if b_int > req.b_max:
            warnings.append(f"{q.name}: needs {b_int} fraction bits, clamped to {req.b_max}")
        bits[q.name] = min(max(b_int, req.b_min), req.b_max)
    if not any(q.g > 0 for q in req.quantities):
        warnings.append("all gradient tallies are zero; every quantity gets the minimum width")
    scheme = _scheme(req, bits, cont)
    scheme.warnings = warnings
    for w in warnings:
        log.warning(w)
    return scheme


def fraction_bit_budget(req: SolverRequest) -> float:
    """``eps_mem * M`` less one sign bit per stored element."""
    return req.tolerance * req.reference_memory - sum(q.count for q in req.quantities)


def _waterfill(quantities: Sequence[QuantityInfo], ranges: dict[str, float], budget: float,
               b_min: int, b_max: int) -> dict[str, float]:
    """Continuous bits minimizing sum g R^2 4^-b subject to sum P b = budget, b in [b_min, b_max].

    Unbounded stationarity gives ``delta_h = c sqrt(P_h / g_h)``; quantities
    pushed outside the box are pinned to the bound and the rest re-solved.
    """
    free = {q.name: q for q in quantities}
    fixed: dict[str, float] = {}
    while True:
        rest = budget - sum(q.count * fixed[q.name] for q in quantities if q.name in fixed)
        if not free:
            return fixed
        total_p = sum(q.count for q in free.values())
        log2c = (
            sum(q.count * (math.log2(ranges[q.name]) - 0.5 * math.log2(q.count / q.g)) for q in free.values()) - rest
        ) / total_p
        cont = {
            k: math.log2(ranges[k]) - (log2c + 0.5 * math.log2(q.count / q.g)) for k, q in free.items()
        }
        low = {k for k, b in cont.items() if b < b_min}
        high = {k for k, b in cont.items() if b > b_max}
        if not low and not high:
            fixed.update(cont)
            return fixed
        # pin the side with the larger violation first; the other side may resolve itself
        if low and (not high or max(b_min - cont[k] for k in low) >= max(cont[k] - b_max for k in high)):
            for k in low:
                fixed[k] = float(b_min)
                del free[k]
        else:
            for k in high:
                fixed[k] = float(b_max)
                del free[k]


def solve_memory_bounded(req: SolverRequest) -> QuantScheme:
    if req.mode != "memory_bounded":
        raise ValueError("request is not memory-bounded")
    budget = fraction_bit_budget(req)
    floor_cost = sum(q.count * req.b_min for q in req.quantities)
    if budget < floor_cost or budget <= 0:
        raise InfeasibleBudget(
            f"fraction-bit budget {budget:.0f} below the minimum {floor_cost} "
            f"(compression {req.tolerance} of {req.reference_memory} bits)"
        )
    ranges = {q.name: _range_of(q, req) for q in req.quantities}
    active = [q for q in req.quantities if q.g > 0]
    idle = [q for q in req.quantities if q.g == 0]
    remaining = budget - sum(q.count * req.b_min for q in idle)
    cont: dict[str, float] = {q.name: float(req.b_min) for q in idle}
    cont.update(_waterfill(active, ranges, remaining, req.b_min, req.b_max))
    bits = {k: min(max(math.floor(b + 1e-9 * max(1.0, abs(b))), req.b_min), req.b_max) for k, b in cont.items()}
    # the tolerance above only absorbs log2 round-off at exact integers; re-check the hard budget
    while sum(q.count * bits[q.name] for q in req.quantities) > budget:
        worst = max((q for q in active if bits[q.name] > req.b_min), key=lambda q: bits[q.name] - cont[q.name])
        bits[worst.name] -= 1
    if not active:
        log.warning("all gradient tallies are zero; every quantity gets the minimum width")
    return _scheme(req, bits, cont)


def solve(req: SolverRequest) -> QuantScheme:
    if req.mode == "error_bounded":
        return solve_error_bounded(req)
    return solve_memory_bounded(req)


# -- validation --------------------------------------------------------------


@dataclass
class TrialRow:
    seed: int
    z: float
    success: bool
    saturated: int
    failed: bool = False


@dataclass
class ValidationReport:
    z_ref: float
    tolerance: float | None
    sigma_pred: float
    rows: list[TrialRow]
    round_ratio: dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.z for r in self.rows if not r.failed])

    @property
    def mu_sim(self) -> float:
        v = self.values
        return float(v.mean()) if v.size else math.nan

    @property
    def sigma_sim(self) -> float:
        v = self.values
        return float(v.std(ddof=1)) if v.size >= 2 else math.nan

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.rows)

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.rows)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else math.nan

    @property
    def calibration(self) -> float:
        """sigma_sim / sigma_pred."""
        return self.sigma_sim / self.sigma_pred if self.sigma_pred > 0 else math.nan

    @property
    def relative_error(self) -> float:
        """sqrt(sigma_sim**2 + (mu_sim - z_ref)**2) / |z_ref|."""
        s = self.sigma_sim if self.n >= 2 else 0.0
        return math.sqrt(s**2 + (self.mu_sim - self.z_ref) ** 2) / abs(self.z_ref)

    @property
    def saturated(self) -> int:
        return sum(r.saturated for r in self.rows)


def success(z: float, z_ref: float, tolerance: float) -> bool:
    return bool(np.isfinite(z)) and abs(z - z_ref) <= 3.0 * tolerance * abs(z_ref)


def validate(
    scheme: QuantScheme,
    trial: Callable[[int], "object"],
    z_ref: float,
    n: int,
    seeds: Sequence[int] | None = None,
    tolerance: float | None = None,
) -> ValidationReport:
    """Run ``n`` quantized trials and compare their spread with the prediction.

    ``trial(seed)`` must return an object with ``z``, ``failed``, ``stats``
    (per-quantity :class:`QuantStats`), e.g. a :class:`~autoquant.sims.RunResult`.
    A trial succeeds when ``|z - z_ref| <= 3 tolerance |z_ref|``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(range(n)) if seeds is None else list(seeds)[:n]
    if tolerance is None and scheme.mode == "error_bounded":
        tolerance = scheme.tolerance
    rows = []
    ups: dict[str, int] = {}
    downs: dict[str, int] = {}
    for seed in seeds:
        res = trial(seed)
        failed = bool(res.failed or not np.isfinite(res.z))
        ok = (not failed) and tolerance is not None and success(res.z, z_ref, tolerance)
        sat = sum(s.saturated for s in res.stats.values())
        rows.append(TrialRow(seed, float(res.z), ok, sat, failed))
        for k, s in res.stats.items():
            ups[k] = ups.get(k, 0) + s.round_ups
            downs[k] = downs.get(k, 0) + s.round_downs
    ratio = {k: (ups[k] / downs[k] if downs[k] else math.nan) for k in ups}
    return ValidationReport(z_ref, tolerance, scheme.sigma_pred, rows, ratio)


# -- optimality probe -------------------------------------------------------


@dataclass
class ProbeRow:
    label: str
    bits: dict[str, int]
    successes: int
    trials: int
    mu: float
    sigma: float

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else math.nan


def perturbations(
    scheme: QuantScheme,
    ks: Sequence[int] = (1, 2, 3),
    seed: int = 0,
    move_pairs: Sequence[tuple[str, str]] = (),
) -> list[tuple[str, dict[str, int]]]:
    """Bit vectors near ``scheme``: reduce all, reduce a random half, move bits."""
    base = scheme.bits()
    names = sorted(base)
    rng = np.random.default_rng(seed)
    out = [("base", dict(base))]
    half = sorted(rng.choice(names, size=max(1, len(names) // 2), replace=False).tolist())
    for k in ks:
        out.append((f"all-{k}", {n: base[n] - k for n in names}))
    for k in ks:
        out.append((f"half-{k}", {n: base[n] - (k if n in half else 0) for n in names}))
    for src, dst in move_pairs:
        for k in ks:
            moved = dict(base)
            moved[src] -= k
            moved[dst] += k
            out.append((f"move-{k}:{src}->{dst}", moved))
    return out


def optimality_probe(
    scheme: QuantScheme,
    trial_for: Callable[[QuantScheme, int], "object"],
    z_ref: float,
    tolerance: float,
    candidates: Sequence[tuple[str, dict[str, int]]],
    n: int = 20,
) -> list[ProbeRow]:
    rows = []
    for label, bits in candidates:
        s = scheme.with_bits(bits)
        rep = validate(s, lambda seed: trial_for(s, seed), z_ref, n, tolerance=tolerance)
        rows.append(ProbeRow(label, s.bits(), rep.successes, rep.n, rep.mu_sim, rep.sigma_sim))
    return rows
