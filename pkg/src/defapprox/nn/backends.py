"""Scalar-multiplication backends and per-layer precision policies."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..floats import approx_bf16_multiply, ax_fpm_multiply, truncate_to_bf16


class MulBackend(enum.Enum):
    EXACT = "exact"
    AXFPM = "axfpm"
    BF16_EXACT = "bf16"
    BF16_APPROX = "bf16approx"

    def multiply(self, a, b):
        """Elementwise product of two broadcastable float32 arrays.

        ``a`` is fed to the multiplicand side of the mantissa array, ``b``
        to the multiplier side; the engine passes weights as ``a``.
        """
        if self is MulBackend.EXACT:
            return np.multiply(a, b, dtype=np.float32)
        if self is MulBackend.AXFPM:
            return ax_fpm_multiply(a, b)
        if self is MulBackend.BF16_EXACT:
            # product of two 8-bit significands is exact in binary32
            return np.multiply(truncate_to_bf16(a), truncate_to_bf16(b), dtype=np.float32)
        return approx_bf16_multiply(a, b)

    @property
    def is_exact(self):
        return self is MulBackend.EXACT


@dataclass(frozen=True)
class PrecisionPolicy:
    default_backend: MulBackend = MulBackend.EXACT
    overrides: dict = field(default_factory=dict)

    def backend_for(self, layer_index):
        return self.overrides.get(layer_index, self.default_backend)

    @classmethod
    def uniform(cls, backend):
        return cls(MulBackend(backend))

    def describe(self):
        return {
            "default_backend": self.default_backend.value,
            "overrides": {str(k): v.value for k, v in sorted(self.overrides.items())},
        }


EXACT_POLICY = PrecisionPolicy()
