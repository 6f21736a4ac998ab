"""Counter-based random streams for the path simulator.

Each path owns a Philox4x32-10 stream keyed by (seed, path index), so a
draw depends only on its path and its position in that path's sequence,
never on scheduling.  Paths can therefore run on any number of threads
and still produce bit-identical results.

Uniforms are built from 53 high bits and offset into the open interval
(0, 1); normals come in Box-Muller pairs so consumption per call is fixed.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_TWO_M53 = float(2.0 ** -53)


@nb.njit(cache=True, inline="always")
def _philox_round(c0, c1, c2, c3, k0, k1):
    p0 = _M0 * np.uint64(c0)
    p1 = _M1 * np.uint64(c2)
    hi0 = np.uint32(p0 >> np.uint64(32))
    lo0 = np.uint32(p0 & _MASK32)
    hi1 = np.uint32(p1 >> np.uint64(32))
    lo1 = np.uint32(p1 & _MASK32)
    return hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0


@nb.njit(cache=True)
def philox4(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32; returns four mixed 32-bit words."""
    for _ in range(10):
        c0, c1, c2, c3 = _philox_round(c0, c1, c2, c3, k0, k1)
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@nb.njit(cache=True)
def splitmix64(z):
    z = np.uint64(z) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def path_key(seed, path_index):
    """64-bit Philox key for one path, split into two 32-bit words."""
    mixed = splitmix64(np.uint64(seed) ^ splitmix64(np.uint64(path_index)))
    return np.uint32(mixed & _MASK32), np.uint32(mixed >> np.uint64(32))


@nb.njit(cache=True, inline="always")
def _to_unit(hi, lo):
    bits = (np.uint64(hi) << np.uint64(32)) | np.uint64(lo)
    return (float(bits >> np.uint64(11)) + 0.5) * _TWO_M53


@nb.njit(cache=True)
def uniform_pair(k0, k1, ctr):
    """Two uniforms in (0, 1) from counter ``ctr``; caller advances ctr."""
    c0 = np.uint32(np.uint64(ctr) & _MASK32)
    c1 = np.uint32(np.uint64(ctr) >> np.uint64(32))
    x0, x1, x2, x3 = philox4(c0, c1, np.uint32(0), np.uint32(0), k0, k1)
    return _to_unit(x0, x1), _to_unit(x2, x3)


@nb.njit(cache=True)
def normal_pair(k0, k1, ctr):
    """Box-Muller pair from one counter value."""
    u1, u2 = uniform_pair(k0, k1, ctr)
    rad = math.sqrt(-2.0 * math.log(u1))
    ang = 2.0 * math.pi * u2
    return rad * math.cos(ang), rad * math.sin(ang)
