"""Gate-level emulation of exact and AMA5 full adders and unsigned array multipliers.

Every function works on Python ints and, elementwise, on numpy ``uint64``
arrays, so the same netlist code serves scalar checks and vectorized sweeps.
Bit index 0 is the least significant bit everywhere.

Two array wirings are provided:

``RIPPLE_ROWS``
    The accumulator of width n+m starts as partial-product row 0 and each
    further row (shifted left by its index) is added with an n+m-bit
    ripple-carry adder. Carry-out past the MSB is dropped.

``CARRY_SAVE``
    The classic Braun array: row i has n cells, cell j adds the partial
    product a[j]&b[i], the sum coming down-left from cell j+1 of row i-1
    and the carry coming down from cell j of row i-1; inputs map to the
    full adder as (A, B, Cin) in that order. A final n-cell ripple row
    (A = sum, B = carry, Cin = ripple carry) merges the last row.

With exact cells both wirings compute a*b. With AMA5 cells (Sum = B,
Cout = A) every cell is two buffers, so the whole array degenerates into a
fixed routing of partial-product bits to output bits; ``ama5_routing``
extracts that routing and ``RoutedMultiplier`` evaluates it quickly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError

MAX_OPERAND_WIDTH = 32


class AdderKind(enum.Enum):
    EXACT = "exact"
    AMA5 = "ama5"


class Wiring(enum.Enum):
    RIPPLE_ROWS = "ripple_rows"
    CARRY_SAVE = "carry_save"


@dataclass(frozen=True)
class GateCountReport:
    adder_kind: AdderKind
    wiring: Wiring
    n: int
    m: int
    cells: int
    and_gates: int


def full_adder(kind, a, b, cin):
    """One full-adder cell; returns ``(sum, cout)``."""
    if kind is AdderKind.AMA5:
        return b, a
    return a ^ b ^ cin, (a & b) | (a & cin) | (b & cin)


def _bits(x, width):
    if isinstance(x, (np.ndarray, np.generic)):
        # one byte per bit plane keeps the netlist sweep memory-light
        return [np.asarray((x >> np.uint64(k)) & np.uint64(1), dtype=np.uint8) for k in range(width)]
    return [(x >> k) & 1 for k in range(width)]


def _pack(bits):
    out = 0
    for k, bit in enumerate(bits):
        if isinstance(bit, (np.ndarray, np.generic)):
            out = out | (np.asarray(bit, dtype=np.uint64) << np.uint64(k))
        else:
            out = out | (bit << k)
    return out


def _check_width(x, width, name):
    if isinstance(x, np.ndarray):
        if x.dtype != np.uint64:
            raise ContractError(f"{name} must be a uint64 array, got {x.dtype}")
        if width < 64 and np.any(x >> np.uint64(width)):
            raise ContractError(f"{name} has bits set above width {width}")
    else:
        if x < 0 or x >> width:
            raise ContractError(f"{name}={x} does not fit in {width} bits")


def _ripple_bits(kind, xs, ys, cin):
    out = []
    c = cin
    for x, y in zip(xs, ys):
        s, c = full_adder(kind, x, y, c)
        out.append(s)
    return out, c


def ripple_add(kind, x, y, cin, width):
    """Add two ``width``-bit words through a chain of full-adder cells.

    Bit i's carry-out feeds bit i+1's carry-in; returns ``(sum, cout)``.
    """
    if not 1 <= width <= 64:
        raise ContractError(f"width must be in 1..64, got {width}")
    _check_width(x, width, "x")
    _check_width(y, width, "y")
    s, c = _ripple_bits(kind, _bits(x, width), _bits(y, width), cin)
    return _pack(s), c


def _ripple_rows_netlist(kind, pp, n, m, zero):
    width = n + m
    acc = [zero] * width
    for j in range(n):
        acc[j] = pp(0, j)
    for i in range(1, m):
        row = [zero] * width
        for j in range(n):
            row[i + j] = pp(i, j)
        acc, _ = _ripple_bits(kind, acc, row, zero)
    return acc


def _carry_save_netlist(kind, pp, n, m, zero):
    out = [zero] * (n + m)
    sums = [pp(0, j) for j in range(n)] + [zero]
    carries = [zero] * n
    out[0] = sums[0]
    for i in range(1, m):
        new_sums = [zero] * (n + 1)
        new_carries = [zero] * n
        for j in range(n):
            new_sums[j], new_carries[j] = full_adder(kind, pp(i, j), sums[j + 1], carries[j])
        sums, carries = new_sums, new_carries
        out[i] = sums[0]
    ripple = zero
    for k in range(n):
        out[m + k], ripple = full_adder(kind, sums[k + 1], carries[k], ripple)
    return out


_NETLISTS = {
    Wiring.RIPPLE_ROWS: _ripple_rows_netlist,
    Wiring.CARRY_SAVE: _carry_save_netlist,
}


def _check_dims(n, m):
    if not (1 <= n <= MAX_OPERAND_WIDTH and 1 <= m <= MAX_OPERAND_WIDTH):
        raise ContractError(f"operand widths must be in 1..{MAX_OPERAND_WIDTH}, got {n}x{m}")


def array_multiply(kind, a, b, n, m, wiring=Wiring.RIPPLE_ROWS):
    """Multiply an n-bit multiplicand ``a`` by an m-bit multiplier ``b``.

    Partial products are ``a[j] & b[i]``; the result has n+m bits.
    """
    _check_dims(n, m)
    _check_width(a, n, "a")
    _check_width(b, m, "b")
    a_bits = _bits(a, n)
    b_bits = _bits(b, m)
    zero = np.zeros(np.shape(a), dtype=np.uint8) if isinstance(a, np.ndarray) else 0
    out = _NETLISTS[wiring](kind, lambda i, j: a_bits[j] & b_bits[i], n, m, zero)
    return _pack(out)


def gate_counts(kind, n, m, wiring=Wiring.RIPPLE_ROWS):
    _check_dims(n, m)
    if wiring is Wiring.RIPPLE_ROWS:
        cells = (m - 1) * (n + m)
    else:
        cells = (m - 1) * n + n
    return GateCountReport(kind, wiring, n, m, cells=cells, and_gates=n * m)


@lru_cache(maxsize=None)
def ama5_routing(n, m, wiring=Wiring.CARRY_SAVE):
    """Return ``(out_bit, i, j)`` triples: output bit = a[j] & b[i].

    Output bits absent from the list are constant zero. Obtained by pushing
    symbolic partial-product labels through the AMA5 netlist.
    """
    _check_dims(n, m)
    out = _NETLISTS[wiring](AdderKind.AMA5, lambda i, j: (i, j), n, m, None)
    return tuple((k, src[0], src[1]) for k, src in enumerate(out) if src is not None)


class RoutedMultiplier:
    """Fast evaluator of an AMA5 array multiplier via its routing table.

    Output bits fed by the same multiplier bit with the same shift are
    grouped, so a carry-save 24x24 array costs two masked shifts.
    """

    def __init__(self, n, m, wiring=Wiring.CARRY_SAVE):
        self.n, self.m, self.wiring = n, m, wiring
        groups = {}
        for k, i, j in ama5_routing(n, m, wiring):
            key = (i, k - j)
            groups[key] = groups.get(key, 0) | (1 << j)
        self._groups = tuple(
            (np.uint64(i), np.int64(shift), np.uint64(mask)) for (i, shift), mask in sorted(groups.items())
        )

    def __call__(self, a, b):
        a = np.asarray(a, dtype=np.uint64)
        b = np.asarray(b, dtype=np.uint64)
        out = np.zeros(np.broadcast(a, b).shape, dtype=np.uint64)
        one = np.uint64(1)
        for i, shift, mask in self._groups:
            term = a & mask
            term = term << np.uint64(shift) if shift >= 0 else term >> np.uint64(-shift)
            out |= term * ((b >> i) & one)
        return out
