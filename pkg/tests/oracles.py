"""Exhaustive integer-bit oracles for small allocation problems."""
import itertools
import math

import numpy as np


def _grid(h, b_max):
    return np.array(list(itertools.product(range(b_max + 1), repeat=h)), dtype=np.int64)


def _variance(bits, counts, ranges, tallies):
    delta = np.asarray(ranges) * np.exp2(-bits.astype(np.float64))
    return (delta**2 * np.asarray(tallies)).sum(axis=1) / 12.0


def best_error_bounded(counts, ranges, tallies, target, b_max=20):
    """Fewest sum P_h b_h with predicted std <= target; returns (cost, bits)."""
    bits = _grid(len(counts), b_max)
    ok = np.sqrt(_variance(bits, counts, ranges, tallies)) <= target
    if not ok.any():
        return math.inf, None
    cost = bits @ np.asarray(counts)
    cost = np.where(ok, cost, np.iinfo(np.int64).max)
    i = int(np.argmin(cost))
    return int(cost[i]), bits[i]


def best_memory_bounded(counts, ranges, tallies, budget, b_max=20):
    """Smallest predicted std with sum P_h b_h <= budget; returns (sigma, bits)."""
    bits = _grid(len(counts), b_max)
    ok = bits @ np.asarray(counts) <= budget
    var = np.where(ok, _variance(bits, counts, ranges, tallies), np.inf)
    i = int(np.argmin(var))
    return math.sqrt(var[i]), bits[i]


class BitVector:
    """Plain list-of-bits model of a packed buffer (LSB first per word)."""

    def __init__(self, layout, count):
        self.layout = layout
        self.stride = layout.words_needed * layout.word_bits
        self.bits = [0] * (self.stride * count)

    def store(self, index, name, value):
        f = self.layout.field(name)
        base = index * self.stride + f.offset
        for k in range(f.width):
            self.bits[base + k] = (value >> k) & 1

    def load(self, index, name):
        f = self.layout.field(name)
        base = index * self.stride + f.offset
        return sum(self.bits[base + k] << k for k in range(f.width))

    def words(self):
        wb = self.layout.word_bits
        out = []
        for w in range(len(self.bits) // wb):
            out.append(sum(self.bits[w * wb + k] << k for k in range(wb)))
        return out
