"""Counter-based random numbers: one independent stream per particle.

A variate is a pure function of ``(seed, particle id, step, lane)``, obtained
by chaining the SplitMix64 finaliser.  Results therefore do not depend on how
particles are chunked or scheduled, and any step can be regenerated without
replaying the ones before it.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def raw_bits(seed: int, ids, step: int, lane: int):
    """64 random bits for every particle id."""
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        ctr = np.uint64(((step & 0xFFFFFFFFFFFF) << 8) | (lane & 0xFF))
        return _mix(_mix(key ^ np.asarray(ids, np.uint64)) + ctr)


def uniforms(seed: int, ids, step: int, lane: int):
    """Uniform variates in the open interval (0, 1)."""
    bits = raw_bits(seed, ids, step, lane) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * _TWO_M53


def normals(seed: int, ids, step: int, lane: int = 0):
    """Standard normal variates by Box-Muller; uses lanes ``lane`` and ``lane + 1``."""
    u1 = uniforms(seed, ids, step, lane)
    u2 = uniforms(seed, ids, step, lane + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
