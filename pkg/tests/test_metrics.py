import numpy as np
import pytest

from defapprox.errors import ContractError, MetricUndefinedError
from defapprox.floats import ax_fpm_multiply
from defapprox.metrics import ErrorSample, mred, nmed, noise_profile


def test_mred_examples():
    assert mred([ErrorSample(2.0, 1.8)]) == pytest.approx(0.1)
    assert mred([(3.5, 3.5), (-1.0, -1.0)]) == 0
    assert mred([(2.0, 1.8), (1.0, 1.1)]) == pytest.approx(0.1)


def test_mred_excludes_zero_and_fails_when_empty():
    assert mred([(0.0, 1.0), (2.0, 1.8)]) == pytest.approx(0.1)
    with pytest.raises(MetricUndefinedError):
        mred([(0.0, 0.5)])
    with pytest.raises(MetricUndefinedError):
        mred([])


def test_mred_sign_flip_invariance():
    s = [(2.0, 1.7), (-0.5, -0.4), (3.0, 3.3)]
    assert mred(s) == pytest.approx(mred([(-e, -a) for e, a in s]))


def test_nmed_examples():
    assert nmed([(2.0, 1.8)], 2.0) == pytest.approx(0.1)
    assert nmed([(1.0, 1.0)], 1.0) == 0
    assert nmed([(1.0, 0.5), (1.0, 1.5)], 1.0) == pytest.approx(0.5)
    assert nmed([(1.0, 0.5)], 0.5) == pytest.approx(2 * nmed([(1.0, 0.5)], 1.0))
    with pytest.raises(ContractError):
        nmed([(1.0, 0.5)], 0.0)


def test_noise_profile_exact_multiplier():
    prof = noise_profile(lambda a, b: a * b, 0.0, 1.0, 5000, 10, seed=1)
    assert prof.mred == 0 and prof.nmed == 0 and prof.ties == 5000
    assert prof.frac_magnitude_increase == 0.0


def test_noise_profile_histogram_and_reproducibility():
    a = noise_profile(ax_fpm_multiply, -1.0, 1.0, 300_000, 17, seed=4)
    b = noise_profile(ax_fpm_multiply, -1.0, 1.0, 300_000, 17, seed=4)
    assert a.to_dict() == b.to_dict()
    assert sum(c for _, _, c in a.histogram) == a.n
    edges = [(lo, hi) for lo, hi, _ in a.histogram]
    assert all(h0 == l1 for (_, h0), (l1, _) in zip(edges, edges[1:]))
    assert a.mred >= 0 and a.nmed >= 0


def test_noise_profile_rejects_empty_range():
    with pytest.raises(ContractError):
        noise_profile(ax_fpm_multiply, 1.0, 1.0, 10, 5, seed=0)
