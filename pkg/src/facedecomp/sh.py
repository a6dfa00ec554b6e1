"""Real spherical harmonics on the tape.

Graphics convention (no Condon-Shortley phase), orthonormal on the sphere,
ordering l = 0..k, m = -l..l. Works on plain arrays and tape tensors alike
since the recurrences only use tape primitives.
"""

from __future__ import annotations

import math

import numpy as np

from . import tape
from .tape import UsageError


def sh_index(l, m):
    return l * (l + 1) + m


def _norm_k(l, m):
    return math.sqrt((2 * l + 1) / (4.0 * math.pi)
                     * math.factorial(l - m) / math.factorial(l + m))


def sh_basis(dirs, order, check_unit=True):
    """Basis values for unit directions, shape (..., (order+1)^2)."""
    dirs = tape.as_tensor(dirs)
    if check_unit:
        n = np.linalg.norm(dirs.data, axis=-1)
        if not np.all(np.abs(n - 1.0) < 1e-6):
            raise UsageError("sh_basis requires unit directions")
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    one = tape.Tensor(np.ones_like(x.data))

    # A_m = sin^m(theta) cos(m phi), B_m = sin^m(theta) sin(m phi)
    A = [one]
    B = [tape.Tensor(np.zeros_like(x.data))]
    for m in range(1, order + 1):
        A.append(x * A[m - 1] - y * B[m - 1])
        B.append(x * B[m - 1] + y * A[m - 1])

    # P[l][m]: associated Legendre with the sin^m(theta) factor divided out
    P = [[None] * (order + 1) for _ in range(order + 1)]
    for m in range(order + 1):
        pmm = one * float(_double_factorial(2 * m - 1))
        P[m][m] = pmm
        if m + 1 <= order:
            P[m + 1][m] = (2 * m + 1) * z * pmm
        for l in range(m + 2, order + 1):
            P[l][m] = ((2 * l - 1) * z * P[l - 1][m]
                       - (l + m - 1) * P[l - 2][m]) * (1.0 / (l - m))

    cols = [None] * ((order + 1) ** 2)
    for l in range(order + 1):
        cols[sh_index(l, 0)] = _norm_k(l, 0) * P[l][0]
        for m in range(1, l + 1):
            k = math.sqrt(2.0) * _norm_k(l, m)
            cols[sh_index(l, m)] = k * P[l][m] * A[m]
            cols[sh_index(l, -m)] = k * P[l][m] * B[m]
    return tape.stack(cols, axis=-1)


def _double_factorial(n):
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def band_index_table(order):
    """Array of band l per coefficient index."""
    out = np.empty((order + 1) ** 2, dtype=np.int64)
    for l in range(order + 1):
        out[sh_index(l, -l):sh_index(l, l) + 1] = l
    return out
