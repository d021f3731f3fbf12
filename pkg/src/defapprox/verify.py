"""Self-checks behind the ``verify`` subcommand: truth tables, exhaustive and random multiplier sweeps, codec round-trips."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .floats import bf16_bits_to_f32_bits, compose_bits, decompose_bits, f32_bits_to_bf16_bits
from .gates import AdderKind, Wiring, array_multiply, full_adder

PAIRS_PER_CHUNK = 1 << 20


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: int

    @property
    def ok(self):
        return self.failures == 0

    def to_dict(self):
        return {**asdict(self), "ok": self.ok}


def full_adder_tables():
    exact_bad = ama5_bad = 0
    for a, b, c in itertools.product((0, 1), repeat=3):
        s, co = full_adder(AdderKind.EXACT, a, b, c)
        exact_bad += (s + 2 * co) != (a + b + c)
        s, co = full_adder(AdderKind.AMA5, a, b, c)
        ama5_bad += (s, co) != (b, a)
    return [CheckResult("full_adder_exact", 8, int(exact_bad)), CheckResult("full_adder_ama5", 8, int(ama5_bad))]


def exhaustive_multiply(n, m, wiring=Wiring.RIPPLE_ROWS):
    """Exact-cell array vs integer product over all 2^(n+m) operand pairs."""
    total = 1 << (n + m)
    failures = 0
    for start in range(0, total, PAIRS_PER_CHUNK):
        k = np.arange(start, min(start + PAIRS_PER_CHUNK, total), dtype=np.uint64)
        a = k >> np.uint64(m)
        b = k & np.uint64((1 << m) - 1)
        failures += int(np.count_nonzero(array_multiply(AdderKind.EXACT, a, b, n, m, wiring) != a * b))
    return CheckResult(f"exhaustive_{n}x{m}_{wiring.value}", total, failures)


def random_multiply(n, m, count, seed, wiring=Wiring.RIPPLE_ROWS):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 1 << n, count, dtype=np.uint64)
    b = rng.integers(0, 1 << m, count, dtype=np.uint64)
    bad = int(np.count_nonzero(array_multiply(AdderKind.EXACT, a, b, n, m, wiring) != a * b))
    return CheckResult(f"random_{n}x{m}_{wiring.value}", count, bad)


def f32_roundtrip(count, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 1 << 32, count, dtype=np.uint64).tolist()
    bad = sum(compose_bits(decompose_bits(x)) != x for x in bits)
    return CheckResult("f32_decompose_compose", count, bad)


def bf16_roundtrip():
    bits = np.arange(1 << 16, dtype=np.uint32)
    back = f32_bits_to_bf16_bits(bf16_bits_to_f32_bits(bits))
    return CheckResult("bf16_widen_narrow", 1 << 16, int(np.count_nonzero(back != bits)))


def run_all(seed=0, exhaustive=((4, 4), (8, 8)), random_pairs=100_000):
    results = full_adder_tables()
    for wiring in Wiring:
        for n, m in exhaustive:
            results.append(exhaustive_multiply(n, m, wiring))
        results.append(random_multiply(24, 24, random_pairs, seed, wiring))
    results.append(f32_roundtrip(1_000_000, seed))
    results.append(bf16_roundtrip())
    return results
