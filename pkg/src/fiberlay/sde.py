"""Monte-Carlo simulation of the lay-down process.

Each particle follows

    dx = (tau(alpha) + kappa e1) dt,
    d alpha = -tau_perp(alpha) . grad V(x) dt + A dW,

discretised by the explicit Euler-Maruyama scheme.  Gaussian increments come
from :mod:`fiberlay.rng`, so particle ``i`` at step ``n`` always receives the
same variate for a given seed.

Densities are histograms on a :class:`~fiberlay.grid.PhaseGrid`, normalised
against ``dx d alpha / (2 pi)`` like the grid solver, so weighted norms of
both backends are directly comparable.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .grid import PhaseField, PhaseGrid
from .model import ModelParams, PotentialSpec, equilibrium_density, potential_grad

TWO_PI = 2.0 * math.pi
F_CUTOFF = 1e-30
_DUMP_MAGIC = b"FLPE"
_DUMP_HEADER = "<QdQQ"  # N, t, seed, step

# lanes of the counter-based generator
_LANE_NOISE = 0
_LANE_INIT = 8


@dataclass
class ParticleEnsemble:
    x: np.ndarray            # (N, 2)
    alpha: np.ndarray        # (N,), reduced to [0, 2 pi)
    seed: int
    step: int = 0            # stream counter shared by all particles
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, float).reshape(-1, 2)
        self.alpha = np.mod(np.asarray(self.alpha, float).ravel(), TWO_PI)
        if self.alpha.shape[0] != self.x.shape[0]:
            raise ValueError("x and alpha hold different numbers of particles")

    @property
    def N(self) -> int:
        return self.alpha.shape[0]

    @property
    def ids(self):
        return np.arange(self.N, dtype=np.uint64)

    def copy(self):
        return ParticleEnsemble(self.x.copy(), self.alpha.copy(), self.seed, self.step, self.t)


@dataclass(frozen=True)
class InitialCondition:
    """Initial distribution of the particles.

    ``kind`` is one of

    ``point``
        all particles at ``(x0, alpha0)``;
    ``uniform``
        uniform on ``[-half_width, half_width]^2`` times the circle;
    ``gaussian``
        ``N(mean, std^2 I)`` in ``x`` and uniform in ``alpha``.
    """
    kind: str = "gaussian"
    x0: tuple = (0.0, 0.0)
    alpha0: float = 0.0
    half_width: float = 1.0
    mean: tuple = (0.0, 0.0)
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "uniform", "gaussian"):
            raise ValueError(f"unknown initial distribution {self.kind!r}")
        if len(self.x0) != 2 or len(self.mean) != 2:
            raise ValueError("x0 and mean must have two components")
        if self.kind == "uniform" and not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")
        if self.kind == "gaussian" and not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")

    def density(self, x1, x2, alpha):
        """Density w.r.t. ``dx d alpha / (2 pi)``; not defined for point masses."""
        if self.kind == "point":
            raise ValueError("a point mass has no density")
        if self.kind == "uniform":
            w = self.half_width
            inside = (np.abs(x1) <= w) & (np.abs(x2) <= w)
            return np.where(inside, 1.0 / (4 * w * w), 0.0) + 0.0 * alpha
        m1, m2 = self.mean
        s2 = self.std ** 2
        return np.exp(-((x1 - m1) ** 2 + (x2 - m2) ** 2) / (2 * s2)) / (TWO_PI * s2) + 0.0 * alpha


def init_ensemble(N: int, init: InitialCondition = InitialCondition(), seed: int = 0) -> ParticleEnsemble:
    """Sample ``N`` i.i.d. particles from ``init``; deterministic in ``seed``."""
    if N < 1:
        raise ValueError(f"need at least one particle, got N={N}")
    ids = np.arange(N, dtype=np.uint64)
    if init.kind == "point":
        x = np.tile(np.asarray(init.x0, float), (N, 1))
        alpha = np.full(N, float(init.alpha0))
    else:
        alpha = TWO_PI * rng.uniforms(seed, ids, 0, _LANE_INIT)
        if init.kind == "uniform":
            w = init.half_width
            x = np.stack([w * (2 * rng.uniforms(seed, ids, 0, _LANE_INIT + k) - 1)
                          for k in (1, 2)], -1)
        else:
            x = np.stack([init.mean[k] + init.std * rng.normals(seed, ids, 0, _LANE_INIT + 1 + 2 * k)
                          for k in (0, 1)], -1)
    return ParticleEnsemble(x, alpha, seed)


def em_step(ens: ParticleEnsemble, params: ModelParams, spec: PotentialSpec,
            dt: float) -> ParticleEnsemble:
    """One Euler-Maruyama step; both updates use the pre-step angle."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a = ens.alpha
    ca, sa = np.cos(a), np.sin(a)
    grad = potential_grad(spec, ens.x)
    drift = -(-sa * grad[:, 0] + ca * grad[:, 1])
    alpha = a + drift * dt
    if params.A > 0:
        alpha += params.A * math.sqrt(dt) * rng.normals(ens.seed, ens.ids, ens.step + 1, _LANE_NOISE)
    x = np.empty_like(ens.x)
    x[:, 0] = ens.x[:, 0] + (ca + params.kappa) * dt
    x[:, 1] = ens.x[:, 1] + sa * dt
    return ParticleEnsemble(x, alpha, ens.seed, ens.step + 1, ens.t + dt)


@dataclass
class DensityEstimate:
    field: PhaseField
    cell_volume: float
    n_used: int
    n_total: int

    @property
    def escaped_fraction(self) -> float:
        return 1.0 - self.n_used / self.n_total

    @property
    def grid(self) -> PhaseGrid:
        return self.field.grid


def estimate_density(ens: ParticleEnsemble, grid: PhaseGrid) -> DensityEstimate:
    """Histogram density on ``grid``; particles outside the box count as escaped."""
    if ens.N == 0:
        raise ValueError("empty ensemble")
    L = grid.box
    i = np.floor((ens.x[:, 0] + L) / grid.hx).astype(np.int64)
    j = np.floor((ens.x[:, 1] + L) / grid.hy).astype(np.int64)
    # angle cells are centred on alpha_k = k h_alpha
    k = np.floor(ens.alpha / grid.ha + 0.5).astype(np.int64) % grid.na
    inside = (i >= 0) & (i < grid.nx) & (j >= 0) & (j < grid.ny)
    flat = np.ravel_multi_index((i[inside], j[inside], k[inside]), grid.shape)
    counts = np.bincount(flat, minlength=grid.nx * grid.ny * grid.na).reshape(grid.shape)
    vol = grid.cell_measure
    return DensityEstimate(PhaseField(counts / (ens.N * vol), grid, ens.t), vol,
                           int(inside.sum()), ens.N)


def cell_average_equilibrium(spec: PotentialSpec, grid: PhaseGrid, order: int = 3):
    """Cell averages of ``F`` on the spatial grid by Gauss-Legendre quadrature."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    pts = grid.points()
    acc = np.zeros((grid.nx, grid.ny))
    for a, wa in zip(nodes, weights):
        for b, wb in zip(nodes, weights):
            shifted = pts + np.array([0.5 * a * grid.hx, 0.5 * b * grid.hy])
            acc += 0.25 * wa * wb * equilibrium_density(spec, shifted)
    return acc


def weighted_l2_distance(est: DensityEstimate, spec: PotentialSpec, full: bool = False):
    """``||f - F||`` in the weighted norm, ``F`` taken as cell averages.

    Cells with ``F < 1e-30`` are excluded.  With ``full=True`` returns
    ``(distance, excluded_mass)`` where the excluded mass is the estimated
    probability carried by the excluded cells.
    """
    g = est.grid
    F = cell_average_equilibrium(spec, g)
    keep = F >= F_CUTOFF
    f = est.field.values
    diff = f - F[..., None]
    w = np.where(keep, 1.0 / np.where(keep, F, 1.0), 0.0)
    d = math.sqrt(float(np.einsum("ijk,ijk,ij->", diff, diff, w)) * g.cell_measure)
    if full:
        excluded = float(f[~keep].sum() * g.cell_measure)
        return d, excluded
    return d


@dataclass
class SDESample:
    t: float
    density: DensityEstimate
    l2_dist: float
    excluded_mass: float

    @property
    def escaped_fraction(self) -> float:
        return self.density.escaped_fraction

    def as_row(self):
        d2 = self.l2_dist ** 2
        return (self.t, self.l2_dist, math.log(d2) if d2 > 0 else -math.inf,
                self.escaped_fraction)


SDE_SERIES_COLUMNS = ("t", "l2_dist", "l2_dist_sq_log", "escaped_mass_fraction")


def simulate(ens: ParticleEnsemble, params: ModelParams, spec: PotentialSpec,
             T_final: float, dt: float, sample_times: Optional[Sequence[float]] = None,
             grid: PhaseGrid = PhaseGrid(16, 16, 8, 5.0),
             keep_final: bool = True):
    """March the ensemble to ``T_final`` and record diagnostics at ``sample_times``.

    Between consecutive sample times the interval is split into equal steps
    no longer than ``dt``.  Returns ``(samples, final_ensemble)``.
    """
    if T_final < 0 or not dt > 0:
        raise ValueError("need T_final >= 0 and dt > 0")
    times = sorted(set([0.0, float(T_final)] if sample_times is None
                       else [0.0] + [float(t) for t in sample_times]))
    if times[0] < 0 or times[-1] > T_final + 1e-12:
        raise ValueError("sample times must lie in [0, T_final]")
    t0 = ens.t
    cur = ens
    out = []
    for target in times:
        span = t0 + target - cur.t
        if span > 1e-14:
            n = max(1, math.ceil(span / dt - 1e-9))
            h = span / n
            for _ in range(n):
                cur = em_step(cur, params, spec, h)
            cur.t = t0 + target
        est = estimate_density(cur, grid)
        d, excl = weighted_l2_distance(est, spec, full=True)
        out.append(SDESample(cur.t, est, d, excl))
    return out, cur


def write_ensemble(path, ens: ParticleEnsemble):
    """Binary dump: magic, header (N, t, seed, step), then N x (x1, x2, alpha) doubles."""
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack(_DUMP_HEADER, ens.N, ens.t, ens.seed, ens.step))
        data = np.column_stack([ens.x, ens.alpha]).astype("<f8")
        fh.write(data.tobytes())


def read_ensemble(path) -> ParticleEnsemble:
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ValueError(f"{path}: not an ensemble dump")
    N, t, seed, step = struct.unpack_from(_DUMP_HEADER, raw, 4)
    off = 4 + struct.calcsize(_DUMP_HEADER)
    data = np.frombuffer(raw, dtype="<f8", offset=off)
    if data.size != 3 * N:
        raise ValueError(f"{path}: truncated ensemble dump")
    data = data.reshape(N, 3)
    return ParticleEnsemble(data[:, :2].copy(), data[:, 2].copy(), seed, step, t)
