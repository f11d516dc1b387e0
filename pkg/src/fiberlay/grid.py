"""Deterministic Fokker-Planck solver on a truncated box times the circle.

Fields are arrays of shape ``(nx, ny, na)`` sampled at cell centres
``x_i = -L + (i + 1/2) h`` and angles ``alpha_k = 2 pi k / na``.  The inner
product is the weighted one, ``<f, g> = sum f g / F  hx hy / na``, i.e. the
angle is integrated against ``d alpha / (2 pi)``.

Two discretisations of ``T f = tau . grad_x f - d_alpha(tau_perp . grad V f)``
are provided:

* :meth:`DiscreteOperators.T` is the *structure-preserving* one used by all
  hypocoercivity diagnostics.  It is the skew-symmetric average of the
  conservative and the advective forms, with central differences in ``x``
  (zero values outside the box) and Fourier differentiation in ``alpha``.
  The potential gradient entering it is ``-D_h F / F - D_h 1``: the discrete
  logarithmic derivative plus an edge correction, which makes ``T F = 0``
  hold exactly, not only to truncation order.  A periodic closure would
  also do that, but it creates a spurious near-zero macroscopic mode living
  on the wrap-around seam where ``F`` is tiny.
* :meth:`DiscreteOperators.transport_rhs` is a finite-volume upwind scheme
  (MUSCL with minmod on ``phi = f / F``) whose face mass fluxes are exactly
  divergence free, so ``F`` is a discrete steady state, mass is conserved up
  to boundary outflow and positivity holds under the CFL bound.

``L`` is applied spectrally (``-k^2``) for diagnostics.  Time evolution uses
the exact exponential of the periodic second difference, computed by FFT,
which is unconditionally stable and positivity preserving.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .model import PotentialSpec, _box_mass, equilibrium_density

_SNAPSHOT_MAGIC = b"FLPF"


class CFLError(ValueError):
    def __init__(self, dt, dt_max):
        super().__init__(f"time step {dt:.6g} violates the CFL bound; "
                         f"admissible dt <= {dt_max:.6g}")
        self.dt = dt
        self.dt_max = dt_max


@dataclass(frozen=True)
class PhaseGrid:
    nx: int = 64
    ny: int = 64
    na: int = 32
    box: float = 6.0

    def __post_init__(self):
        if self.na < 4 or self.na % 2:
            raise ValueError(f"angle resolution must be even and >= 4, got {self.na}")
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"spatial resolution must be >= 4, got {self.nx}x{self.ny}")
        if not self.box > 0:
            raise ValueError(f"box half-width must be positive, got {self.box}")

    @property
    def shape(self):
        return (self.nx, self.ny, self.na)

    @property
    def hx(self):
        return 2 * self.box / self.nx

    @property
    def hy(self):
        return 2 * self.box / self.ny

    @property
    def ha(self):
        return 2 * math.pi / self.na

    @property
    def x(self):
        return -self.box + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def y(self):
        return -self.box + (np.arange(self.ny) + 0.5) * self.hy

    @property
    def alpha(self):
        return np.arange(self.na) * self.ha

    @property
    def cell_measure(self):
        """Measure of one cell under ``dx d alpha / (2 pi)``."""
        return self.hx * self.hy / self.na

    def points(self):
        X1, X2 = np.meshgrid(self.x, self.y, indexing="ij")
        return np.stack([X1, X2], -1)

    def refined(self, factor: int = 2) -> "PhaseGrid":
        return PhaseGrid(self.nx * factor, self.ny * factor, self.na * factor, self.box)


@dataclass
class PhaseField:
    values: np.ndarray
    grid: PhaseGrid
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match "
                             f"grid {self.grid.shape}")

    def copy(self):
        return PhaseField(self.values.copy(), self.grid, self.t)

    @classmethod
    def from_function(cls, grid: PhaseGrid, func: Callable, t: float = 0.0,
                      average: bool = False) -> "PhaseField":
        """Sample ``func(x1, x2, alpha)`` (broadcasting) at cell centres.

        With ``average=True`` the cell averages are taken instead, by 3-point
        Gauss-Legendre quadrature in each of the three directions.
        """
        X1, X2, AL = np.meshgrid(grid.x, grid.y, grid.alpha, indexing="ij")
        if not average:
            return cls(np.broadcast_to(func(X1, X2, AL), grid.shape).copy(), grid, t)
        nodes, weights = np.polynomial.legendre.leggauss(3)
        acc = np.zeros(grid.shape)
        for a, wa in zip(nodes, weights):
            for b, wb in zip(nodes, weights):
                for c, wc in zip(nodes, weights):
                    acc += (wa * wb * wc / 8.0) * func(X1 + 0.5 * a * grid.hx,
                                                       X2 + 0.5 * b * grid.hy,
                                                       AL + 0.5 * c * grid.ha)
        return cls(acc, grid, t)


def write_snapshot(path, field_: PhaseField):
    """Flat binary snapshot: magic, dims (3 x int64), box, time, then doubles."""
    g = field_.grid
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<3q2d", g.nx, g.ny, g.na, g.box, field_.t))
        fh.write(np.ascontiguousarray(field_.values, dtype="<f8").tobytes())


def read_snapshot(path) -> PhaseField:
    data = Path(path).read_bytes()
    if data[:4] != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a phase-field snapshot")
    nx, ny, na, box, t = struct.unpack_from("<3q2d", data, 4)
    offset = 4 + struct.calcsize("<3q2d")
    values = np.frombuffer(data, dtype="<f8", offset=offset)
    if values.size != nx * ny * na:
        raise ValueError(f"{path}: truncated snapshot")
    return PhaseField(values.reshape(nx, ny, na).astype(float), PhaseGrid(nx, ny, na, box), t)


def _shift(a, step, axis):
    """Neighbour values ``a[i + step]`` along ``axis``, zero outside the box."""
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(step, None), slice(None, -step)
    else:
        src[axis], dst[axis] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _edge_masks(n, axis):
    """1 where the +/- neighbour along ``axis`` exists, broadcastable to (nx, ny)."""
    plus = np.ones(n)
    minus = np.ones(n)
    plus[-1] = 0.0
    minus[0] = 0.0
    shape = (n, 1) if axis == 0 else (1, n)
    return plus.reshape(shape), minus.reshape(shape)


def _safe(a):
    return np.where(a > 0, a, 1.0)


class DiscreteOperators:
    """Both operator sets plus potential data on one grid.  Immutable after build."""

    def __init__(self, spec: PotentialSpec, grid: PhaseGrid):
        self.spec = spec
        self.grid = grid
        g = grid
        F = equilibrium_density(spec, g.points())
        if not np.all(F > 0) or not np.all(np.isfinite(F)):
            raise ValueError("e^{-V} underflows or overflows on the grid; shrink the box")
        self.F = F
        self.inv_F = 1.0 / F

        # neighbour masks and ratios F_i / F_{i+-1}; zero across the box edge
        self.mxp, self.mxm = _edge_masks(g.nx, 0)
        self.myp, self.mym = _edge_masks(g.ny, 1)
        self.Rxp = self.mxp * F / _safe(_shift(F, 1, 0))
        self.Rxm = self.mxm * F / _safe(_shift(F, -1, 0))
        self.Ryp = self.myp * F / _safe(_shift(F, 1, 1))
        self.Rym = self.mym * F / _safe(_shift(F, -1, 1))
        # G = -(D_h F)/F - D_h 1 makes T_h F vanish exactly with the edge closure
        self.Gx = -((_shift(F, 1, 0) - _shift(F, -1, 0)) / F + self.mxp - self.mxm) / (2 * g.hx)
        self.Gy = -((_shift(F, 1, 1) - _shift(F, -1, 1)) / F + self.myp - self.mym) / (2 * g.hy)

        a = g.alpha
        self.cos = np.cos(a)
        self.sin = np.sin(a)
        # angular drift of the structure-preserving form, -tau_perp . grad V
        self.X = self.sin * self.Gx[..., None] - self.cos * self.Gy[..., None]

        k = np.arange(g.na // 2 + 1, dtype=float)
        ik = 1j * k
        ik[-1] = 0.0  # Nyquist mode has no real derivative
        self._ik = ik
        self._k2 = k ** 2
        self._fd_symbol = (2 * np.sin(0.5 * k * g.ha) / g.ha) ** 2

        self._build_upwind()
        self._cache = {}

    # upwind data -------------------------------------------------------
    def _build_upwind(self):
        g = self.grid
        xf = -g.box + np.arange(g.nx + 1) * g.hx
        yf = -g.box + np.arange(g.ny + 1) * g.hy
        Xf1, Xf2 = np.meshgrid(xf, g.y, indexing="ij")
        Yf1, Yf2 = np.meshgrid(g.x, yf, indexing="ij")
        self.fx = equilibrium_density(self.spec, np.stack([Xf1, Xf2], -1))
        self.fy = equilibrium_density(self.spec, np.stack([Yf1, Yf2], -1))
        ah = g.alpha + 0.5 * g.ha  # faces alpha_{k+1/2}
        # cell averages of cos and sin over each angle cell
        self.c_avg = (np.sin(ah) - np.sin(ah - g.ha)) / g.ha
        self.s_avg = -(np.cos(ah) - np.cos(ah - g.ha)) / g.ha
        dxF = (self.fx[1:] - self.fx[:-1]) / g.hx
        dyF = (self.fy[:, 1:] - self.fy[:, :-1]) / g.hy
        self.ma = -(np.sin(ah) * dxF[..., None] - np.cos(ah) * dyF[..., None])
        rate = _kernels.cfl_rate(self.inv_F, self.fx, self.fy, self.c_avg,
                                 self.s_avg, self.ma, g.hx, g.hy, g.ha)
        # minmod face values stay within 3/2 of the cell value
        self.dt_max = 1.0 / (1.5 * rate)

    # inner products ------------------------------------------------------
    def inner(self, f, g):
        return float(np.einsum("ijk,ijk,ij->", f, g, self.inv_F) * self.grid.cell_measure)

    def norm(self, f):
        return math.sqrt(max(self.inner(f, f), 0.0))

    def mass(self, f):
        return float(f.sum() * self.grid.cell_measure)

    def macro_inner(self, r, s):
        return float(np.sum(r * s * self.inv_F) * self.grid.hx * self.grid.hy)

    def macro_norm(self, r):
        return math.sqrt(max(self.macro_inner(r, r), 0.0))

    def equilibrium(self):
        return np.broadcast_to(self.F[..., None], self.grid.shape).copy()

    # angle operators -----------------------------------------------------
    def project(self, f):
        """Angle average, the orthogonal projection onto alpha-independent fields."""
        return f.mean(axis=2)

    def embed(self, rho):
        return np.broadcast_to(rho[..., None], self.grid.shape)

    def d_alpha(self, f):
        return np.fft.irfft(self._ik * np.fft.rfft(f, axis=2), n=self.grid.na, axis=2)

    def L(self, f):
        """Spectral ``d^2/d alpha^2``."""
        return np.fft.irfft(-self._k2 * np.fft.rfft(f, axis=2), n=self.grid.na, axis=2)

    def L_fd(self, f):
        """Periodic second difference in alpha."""
        return (np.roll(f, -1, 2) - 2 * f + np.roll(f, 1, 2)) / self.grid.ha ** 2

    def diffuse(self, f, D, t, kind="fd"):
        """Exact solution of ``df/dt = D L f`` over time ``t``.

        ``kind="fd"`` applies the heat kernel of the periodic second
        difference as a circulant matrix whose round-off negatives are
        clipped, so it maps nonnegative data to nonnegative data and keeps
        angle sums exactly.  ``kind="spectral"`` multiplies Fourier modes by
        ``exp(-D t k^2)``.
        """
        if kind == "spectral":
            return np.fft.irfft(np.exp(-D * t * self._k2) * np.fft.rfft(f, axis=2),
                                n=self.grid.na, axis=2)
        return f @ self._heat_matrix(D * t)

    def _heat_matrix(self, Dt):
        key = ("heat", float(Dt))
        M = self._cache.get(key)
        if M is None:
            na = self.grid.na
            kernel = np.fft.irfft(np.exp(-Dt * self._fd_symbol), n=na)
            kernel = np.clip(kernel, 0.0, None)
            kernel /= kernel.sum()
            idx = (np.arange(na)[None, :] - np.arange(na)[:, None]) % na
            M = self._cache[key] = kernel[idx]
        return M

    # transport -----------------------------------------------------------
    def T(self, f):
        """Structure-preserving (skew-symmetric) transport operator."""
        g = self.grid
        c = self.cos
        s = self.sin
        cf = c * f
        sf = s * f
        fxp, fxm = _shift(f, 1, 0), _shift(f, -1, 0)
        fyp, fym = _shift(f, 1, 1), _shift(f, -1, 1)
        out = (_shift(cf, 1, 0) - _shift(cf, -1, 0)
               + c * (self.Rxp[..., None] * fxp - self.Rxm[..., None] * fxm)) / (4 * g.hx)
        out += (_shift(sf, 1, 1) - _shift(sf, -1, 1)
                + s * (self.Ryp[..., None] * fyp - self.Rym[..., None] * fym)) / (4 * g.hy)
        out += 0.5 * (self.d_alpha(self.X * f) + self.X * self.d_alpha(f))
        return out

    def macro_flux(self, rho):
        """``(J1, J2)`` with ``T embed(rho) = cos J1 + sin J2``."""
        g = self.grid
        xp, xm = _shift(rho, 1, 0), _shift(rho, -1, 0)
        yp, ym = _shift(rho, 1, 1), _shift(rho, -1, 1)
        J1 = 0.5 * ((xp - xm + self.Rxp * xp - self.Rxm * xm) / (2 * g.hx) + self.Gx * rho)
        J2 = 0.5 * ((yp - ym + self.Ryp * yp - self.Rym * ym) / (2 * g.hy) + self.Gy * rho)
        return J1, J2

    def transport_rhs(self, f, order=2):
        """Upwind right-hand side ``-T_up f`` and the boundary outflow rate."""
        g = self.grid
        out = np.empty_like(f)
        outflow = _kernels.transport_rhs(np.ascontiguousarray(f), self.inv_F, self.fx,
                                         self.fy, self.c_avg, self.s_avg, self.ma,
                                         g.hx, g.hy, g.ha, order, out)
        return out, outflow


def tail_mass(spec: PotentialSpec, box: float) -> float:
    """Mass of ``e^{-V}`` outside ``[-box, box]^2`` for a normalised potential."""
    n = max(16, int(8 * box))
    return max(0.0, 1.0 - _box_mass(spec, box, n))


def build_operators(spec: PotentialSpec, grid: PhaseGrid = PhaseGrid(),
                    tail_tol: Optional[float] = 1e-8) -> DiscreteOperators:
    """Assemble both operator sets; refuse boxes that cut off too much mass."""
    if tail_tol is not None and spec.family in ("quadratic", "power"):
        tail = tail_mass(spec, grid.box)
        if tail > tail_tol:
            raise ValueError(f"box [-{grid.box}, {grid.box}]^2 leaves tail mass "
                             f"{tail:.3g} of e^(-V) outside (limit {tail_tol:g})")
    return DiscreteOperators(spec, grid)


# time stepping ---------------------------------------------------------------

def _upwind_step(f, ops, D, dt, order):
    """Strang splitting: half diffusion, SSP-RK2 transport, half diffusion."""
    f = ops.diffuse(f, D, 0.5 * dt)
    r1, o1 = ops.transport_rhs(f, order)
    f1 = f + dt * r1
    r2, o2 = ops.transport_rhs(f1, order)
    f = 0.5 * f + 0.5 * (f1 + dt * r2)
    f = ops.diffuse(f, D, 0.5 * dt)
    return f, 0.5 * dt * (o1 + o2)


def _central_step(f, ops, D, dt):
    """Classical RK4 for the structure-preserving semi-discretisation."""
    def rhs(u):
        return -ops.T(u) + D * ops.L(u)
    k1 = rhs(f)
    k2 = rhs(f + 0.5 * dt * k1)
    k3 = rhs(f + 0.5 * dt * k2)
    k4 = rhs(f + dt * k3)
    return f + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0


def step(f: PhaseField, ops: DiscreteOperators, D: float, dt: float,
         scheme: str = "upwind", order: int = 2) -> PhaseField:
    """Advance one time step.  Raises :class:`CFLError` for an unstable ``dt``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if scheme == "upwind":
        if dt > ops.dt_max * (1 + 1e-12):
            raise CFLError(dt, ops.dt_max)
        values, _ = _upwind_step(f.values, ops, D, dt, order)
    elif scheme == "central":
        values, _ = _central_step(f.values, ops, D, dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return PhaseField(values, f.grid, f.t + dt)


@dataclass
class EntropyRecord:
    t: float
    half_norm_sq: float
    dissipation: float
    modified_entropy: float = float("nan")
    mass: float = float("nan")
    min_f: float = float("nan")

    def as_row(self):
        return (self.t, self.half_norm_sq, self.dissipation, self.modified_entropy,
                self.mass, self.min_f)


FP_SERIES_COLUMNS = ("t", "half_norm_sq", "dissipation", "modified_entropy", "mass", "min_f")


def entropy_record(f: PhaseField, ops: DiscreteOperators, D: float,
                   eps: Optional[float] = None) -> EntropyRecord:
    v = f.values
    gdev = v - ops.F[..., None]
    half = 0.5 * ops.inner(gdev, gdev)
    diss = -D * ops.inner(ops.L(v), v) + 0.0  # no negative zero in outputs
    H = float("nan")
    if eps is not None:
        from .hypo import modified_entropy
        H = modified_entropy(gdev, eps, ops)
    return EntropyRecord(f.t, half, diss, H, ops.mass(v), float(v.min()))


def entropy_series(trajectory, ops: DiscreteOperators, D: float,
                   eps: Optional[float] = None) -> list:
    """``(t, ||f-F||^2/2, D ||d_alpha f||^2, H[f-F])`` for each field."""
    return [entropy_record(f, ops, D, eps) for f in trajectory]


@dataclass
class FPSolution:
    series: list
    final: PhaseField
    trajectory: list = field(default_factory=list)
    outflow: float = 0.0
    dt: float = 0.0


def solve(f0: PhaseField, ops: DiscreteOperators, D: float, T_final: float,
          dt: Optional[float] = None, sample_times=None, scheme: str = "upwind",
          order: int = 2, eps: Optional[float] = None,
          keep_fields: bool = False) -> FPSolution:
    """March from ``f0`` to ``T_final`` recording diagnostics at ``sample_times``.

    Between consecutive sample times the interval is split into equal steps no
    longer than ``dt`` (default: 90% of the CFL bound for the upwind scheme).
    """
    if T_final < 0:
        raise ValueError("T_final must be >= 0")
    if f0.grid != ops.grid:
        raise ValueError("initial field and operators live on different grids")
    if dt is None:
        if scheme != "upwind":
            raise ValueError("dt is required for the central scheme")
        dt = 0.9 * ops.dt_max
    if scheme == "upwind" and dt > ops.dt_max * (1 + 1e-12):
        raise CFLError(dt, ops.dt_max)
    times = sorted(set([0.0, float(T_final)] if sample_times is None
                       else [0.0] + [float(t) for t in sample_times]))
    if times[0] < 0 or times[-1] > T_final + 1e-12:
        raise ValueError("sample times must lie in [0, T_final]")

    f = f0.values.copy()
    t = f0.t
    t0 = f0.t
    outflow = 0.0
    series = []
    traj = []
    current = PhaseField(f, ops.grid, t)
    for target in times:
        span = t0 + target - t
        if span > 1e-14:
            n = max(1, math.ceil(span / dt - 1e-9))
            h = span / n
            for _ in range(n):
                if scheme == "upwind":
                    f, out = _upwind_step(f, ops, D, h, order)
                else:
                    f, out = _central_step(f, ops, D, h)
                outflow += out
            t = t0 + target
        current = PhaseField(f, ops.grid, t)
        series.append(entropy_record(current, ops, D, eps))
        if keep_fields:
            traj.append(current.copy())
    return FPSolution(series=series, final=current, trajectory=traj,
                      outflow=outflow, dt=dt)
