"""Sinusoidal positional encoding (NeRF-style 2^i * pi frequencies)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape


@dataclass(frozen=True)
class EncodingSpec:
    frequency_count: int
    include_input: bool = True

    def __post_init__(self):
        if self.frequency_count < 0:
            raise ValueError("frequency_count must be >= 0")

    def output_dim(self, input_dim):
        return input_dim * (2 * self.frequency_count + (1 if self.include_input else 0))


def pe_encode(p, spec):
    """Encode points/vectors along the last axis.

    Output layout: [p (optional), sin(2^0 pi p), cos(2^0 pi p), ...,
    sin(2^{F-1} pi p), cos(2^{F-1} pi p)].
    """
    p = tape.as_tensor(p)
    parts = []
    if spec.include_input:
        parts.append(p)
    for i in range(spec.frequency_count):
        w = (2.0 ** i) * np.pi
        parts.append(tape.sin(w * p))
        parts.append(tape.cos(w * p))
    if not parts:
        raise ValueError("encoding with F=0 and include_input=False is empty")
    return tape.concatenate(parts, axis=-1)
