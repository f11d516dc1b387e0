"""Compiled inner loops for the finite-volume transport step."""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _minmod(a, b):
    if a * b <= 0.0:
        return 0.0
    if abs(a) < abs(b):
        return a
    return b


@njit(cache=True)
def transport_rhs(f, inv_fc, fx, fy, c, s, ma, hx, hy, ha, order, out):
    """Flux divergence ``-div(m phi)`` of the well-balanced upwind scheme.

    ``phi = f / F`` is reconstructed (piecewise constant, or MUSCL with the
    minmod limiter when ``order == 2``) and carried by the face mass fluxes
    ``fx[i, j] * c[k]`` (x faces), ``fy[i, j] * s[k]`` (y faces) and
    ``ma[i, j, k]`` (angle face ``k + 1/2``, periodic).  Cells outside the
    box hold ``phi = 0`` (no inflow).  Returns the outflow rate through the
    box boundary in units of mass per unit time.
    """
    nx, ny, na = f.shape
    outflow = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(na):
                out[i, j, k] = 0.0
    lim = 1.0 if order == 2 else 0.0

    # x faces: face i sits between cells i-1 and i, i = 0..nx
    for j in range(ny):
        for k in range(na):
            ck = c[k]
            for i in range(nx + 1):
                m = fx[i, j] * ck
                if m >= 0.0:
                    if i == 0:
                        continue
                    p0 = f[i - 1, j, k] * inv_fc[i - 1, j]
                    pm = f[i - 2, j, k] * inv_fc[i - 2, j] if i >= 2 else 0.0
                    pp = f[i, j, k] * inv_fc[i, j] if i < nx else 0.0
                    pf = p0 + 0.5 * lim * _minmod(p0 - pm, pp - p0)
                else:
                    if i == nx:
                        continue
                    p0 = f[i, j, k] * inv_fc[i, j]
                    pm = f[i - 1, j, k] * inv_fc[i - 1, j] if i >= 1 else 0.0
                    pp = f[i + 1, j, k] * inv_fc[i + 1, j] if i + 1 < nx else 0.0
                    pf = p0 - 0.5 * lim * _minmod(p0 - pm, pp - p0)
                flux = m * pf / hx
                if i >= 1:
                    out[i - 1, j, k] -= flux
                else:
                    outflow -= flux
                if i < nx:
                    out[i, j, k] += flux
                else:
                    outflow += flux

    # y faces
    for i in range(nx):
        for k in range(na):
            sk = s[k]
            for j in range(ny + 1):
                m = fy[i, j] * sk
                if m >= 0.0:
                    if j == 0:
                        continue
                    p0 = f[i, j - 1, k] * inv_fc[i, j - 1]
                    pm = f[i, j - 2, k] * inv_fc[i, j - 2] if j >= 2 else 0.0
                    pp = f[i, j, k] * inv_fc[i, j] if j < ny else 0.0
                    pf = p0 + 0.5 * lim * _minmod(p0 - pm, pp - p0)
                else:
                    if j == ny:
                        continue
                    p0 = f[i, j, k] * inv_fc[i, j]
                    pm = f[i, j - 1, k] * inv_fc[i, j - 1] if j >= 1 else 0.0
                    pp = f[i, j + 1, k] * inv_fc[i, j + 1] if j + 1 < ny else 0.0
                    pf = p0 - 0.5 * lim * _minmod(p0 - pm, pp - p0)
                flux = m * pf / hy
                if j >= 1:
                    out[i, j - 1, k] -= flux
                else:
                    outflow -= flux
                if j < ny:
                    out[i, j, k] += flux
                else:
                    outflow += flux

    # angle faces k + 1/2, periodic; phi = f/F shares the cell's F
    for i in range(nx):
        for j in range(ny):
            w = inv_fc[i, j]
            for k in range(na):
                kp = (k + 1) % na
                m = ma[i, j, k]
                if m >= 0.0:
                    p0 = f[i, j, k]
                    pm = f[i, j, (k - 1) % na]
                    pp = f[i, j, kp]
                    pf = p0 + 0.5 * lim * _minmod(p0 - pm, pp - p0)
                else:
                    p0 = f[i, j, kp]
                    pm = f[i, j, k]
                    pp = f[i, j, (k + 2) % na]
                    pf = p0 - 0.5 * lim * _minmod(p0 - pm, pp - p0)
                flux = m * pf * w / ha
                out[i, j, k] -= flux
                out[i, j, kp] += flux
    return outflow * hx * hy / na


@njit(cache=True)
def cfl_rate(inv_fc, fx, fy, c, s, ma, hx, hy, ha):
    """Largest per-cell outflow rate ``sum_out |m| / (h F)``."""
    nx, ny = inv_fc.shape
    na = c.shape[0]
    worst = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(na):
                r = 0.0
                if c[k] > 0.0:
                    r += fx[i + 1, j] * c[k] / hx
                else:
                    r -= fx[i, j] * c[k] / hx
                if s[k] > 0.0:
                    r += fy[i, j + 1] * s[k] / hy
                else:
                    r -= fy[i, j] * s[k] / hy
                r *= inv_fc[i, j]
                up = ma[i, j, k]
                dn = ma[i, j, (k - 1) % na]
                if up > 0.0:
                    r += up * inv_fc[i, j] / ha
                if dn < 0.0:
                    r -= dn * inv_fc[i, j] / ha
                if r > worst:
                    worst = r
    return worst


def warmup():
    f = np.ones((3, 3, 4))
    inv = np.ones((3, 3))
    fx = np.ones((4, 3))
    fy = np.ones((3, 4))
    c = np.array([1.0, 0.0, -1.0, 0.0])
    ma = np.zeros((3, 3, 4))
    transport_rhs(f, inv, fx, fy, c, c, ma, 1.0, 1.0, 1.0, 2, np.empty_like(f))
    cfl_rate(inv, fx, fy, c, c, ma, 1.0, 1.0, 1.0)
