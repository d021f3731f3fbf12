"""Error statistics for approximate multipliers (MRED, NMED, noise profiles)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ContractError, MetricUndefinedError

CHUNK = 1 << 18


class ErrorSample(NamedTuple):
    exact: float
    approx: float


def _as_pairs(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        return np.empty(0), np.empty(0)
    arr = arr.reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def mred(samples):
    """Mean relative error distance over samples with a nonzero exact value.

    ``samples`` is an iterable of ``(exact, approx)`` pairs.
    """
    exact, approx = _as_pairs(samples)
    keep = exact != 0
    if not np.any(keep):
        raise MetricUndefinedError("MRED undefined: no sample has a nonzero exact value")
    return float(np.mean(np.abs(approx[keep] - exact[keep]) / np.abs(exact[keep])))


def nmed(samples, p_max):
    if not p_max > 0:
        raise ContractError(f"p_max must be positive, got {p_max}")
    exact, approx = _as_pairs(samples)
    if exact.size == 0:
        raise MetricUndefinedError("NMED undefined for an empty sample set")
    return float(np.mean(np.abs(approx - exact)) / p_max)


@dataclass
class NoiseProfile:
    n: int
    range_lo: float
    range_hi: float
    seed: int
    frac_magnitude_increase: float
    ties: int
    mean_error: float
    mean_abs_error: float
    mred: float
    mred_excluded: int
    nmed: float
    p_max: float
    histogram: list  # (bin_lo, bin_hi, count)

    def to_dict(self):
        return asdict(self)


def _chunk_operands(range_lo, range_hi, n, seed):
    for index, start in enumerate(range(0, n, CHUNK)):
        size = min(CHUNK, n - start)
        rng = np.random.default_rng([seed, index])
        a = rng.uniform(range_lo, range_hi, size).astype(np.float32)
        b = rng.uniform(range_lo, range_hi, size).astype(np.float32)
        yield a, b


def noise_profile(
    multiplier: Callable[[np.ndarray, np.ndarray], np.ndarray],
    range_lo: float,
    range_hi: float,
    n: int,
    bins: int,
    seed: int,
    exact: Callable[[np.ndarray, np.ndarray], np.ndarray] = np.multiply,
) -> NoiseProfile:
    """Profile ``multiplier`` against binary32 multiplication on random operands.

    ``multiplier`` is elementwise over float32 arrays. Operands are drawn
    uniformly from ``[range_lo, range_hi)`` in fixed-size chunks, each with
    its own seeded generator, so the result depends only on ``seed`` and
    ``n``.
    """
    if not range_lo < range_hi:
        raise ContractError(f"empty range [{range_lo}, {range_hi})")
    if n < 1 or bins < 1:
        raise ContractError("n and bins must be positive")

    increases = decreases = ties = 0
    err_sum = abs_sum = rel_sum = 0.0
    rel_count = 0
    p_max = 0.0
    errors = []
    for a, b in _chunk_operands(range_lo, range_hi, n, seed):
        ex = np.asarray(exact(a, b), dtype=np.float32).astype(np.float64)
        ap = np.asarray(multiplier(a, b), dtype=np.float32).astype(np.float64)
        err = ap - ex
        mag_ap, mag_ex = np.abs(ap), np.abs(ex)
        increases += int(np.count_nonzero(mag_ap > mag_ex))
        decreases += int(np.count_nonzero(mag_ap < mag_ex))
        ties += int(np.count_nonzero(mag_ap == mag_ex))
        err_sum += float(err.sum())
        abs_sum += float(np.abs(err).sum())
        nz = ex != 0
        rel_sum += float((np.abs(err[nz]) / mag_ex[nz]).sum())
        rel_count += int(nz.sum())
        p_max = max(p_max, float(mag_ex.max()))
        errors.append(err)

    err_all = np.concatenate(errors)
    counts, edges = np.histogram(err_all, bins=bins)
    histogram = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    decided = increases + decreases
    return NoiseProfile(
        n=n,
        range_lo=float(range_lo),
        range_hi=float(range_hi),
        seed=seed,
        frac_magnitude_increase=increases / decided if decided else 0.0,
        ties=ties,
        mean_error=err_sum / n,
        mean_abs_error=abs_sum / n,
        mred=rel_sum / rel_count if rel_count else float("nan"),
        mred_excluded=n - rel_count,
        nmed=abs_sum / n / p_max if p_max > 0 else float("nan"),
        p_max=p_max,
        histogram=histogram,
    )
