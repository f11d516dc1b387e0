"""Potentials, phase-space geometry and the equilibrium of the lay-down model.

The position ``x`` lives in the plane and the fiber angle ``alpha`` on the
circle.  Every other module goes through :func:`potential_eval` to obtain the
confining potential and its derivatives, so a potential only has to be
described once, by a :class:`PotentialSpec`.

Built-in families
-----------------
``quadratic``
    ``V(x) = |x|^2/2 + log(2 pi)``, normalised exactly.
``power``
    ``V(x) = (1 + |x|^2)^beta + shift`` with ``beta >= 1/2`` and the shift
    fixed by radial quadrature so that ``e^{-V}`` has unit mass.
``tabulated``
    Values of ``V`` on a rectangular grid, read from a text file; interpolated
    by a bicubic spline.
``custom``
    Python callables for ``V``, its gradient and its Hessian.  Not reachable
    from configuration files; used for experiments and tests.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate

FAMILIES = ("quadratic", "power", "tabulated", "custom")


@dataclass(frozen=True)
class ModelParams:
    """Noise amplitude ``A`` and belt speed ``kappa``.

    The diffusivity is derived, never stored: ``D = A**2 / 2``.
    """

    A: float
    kappa: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.A) or self.A < 0:
            raise ValueError(f"noise amplitude A must be >= 0, got {self.A}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(
                f"belt speed kappa must lie in [0, 1] (it cannot exceed the "
                f"lay-down speed), got {self.kappa}")

    @property
    def D(self) -> float:
        return 0.5 * self.A ** 2

    @classmethod
    def from_diffusivity(cls, D: float, kappa: float = 0.0) -> "ModelParams":
        if D < 0:
            raise ValueError(f"diffusivity must be >= 0, got {D}")
        return cls(A=math.sqrt(2.0 * D), kappa=kappa)


@dataclass(frozen=True)
class PotentialSpec:
    """Confining potential plus the constants the hypotheses refer to.

    ``shift`` is the additive normalisation constant.  ``Lambda`` (spectral
    gap) and ``c1`` (pointwise Hessian bound) are optional; ``Lambda`` is
    normally filled in by :func:`fiberlay.hypo.estimate_lambda_spec`.
    """

    family: str = "quadratic"
    beta: float = 1.0
    shift: float = 0.0
    Lambda: Optional[float] = None
    c1: Optional[float] = None
    metadata: str = ""
    table: Optional["_Table"] = field(default=None, repr=False, compare=False)
    funcs: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown potential family {self.family!r}; "
                             f"expected one of {FAMILIES}")
        if self.family == "power" and self.beta < 0.5:
            raise ValueError(f"power family needs beta >= 1/2, got {self.beta}")
        if self.family == "tabulated" and self.table is None:
            raise ValueError("tabulated potential without table data")
        if self.family == "custom" and (self.funcs is None or len(self.funcs) != 3):
            raise ValueError("custom potential needs (V, grad, hess) callables")
        if self.Lambda is not None and not self.Lambda > 0:
            raise ValueError(f"Lambda must be positive, got {self.Lambda}")
        if self.c1 is not None and not self.c1 > 0:
            raise ValueError(f"c1 must be positive, got {self.c1}")

    @classmethod
    def quadratic(cls) -> "PotentialSpec":
        return cls(family="quadratic", shift=math.log(2 * math.pi), Lambda=1.0,
                   c1=math.sqrt(2.0), metadata="V = |x|^2/2 + log(2 pi)")

    @classmethod
    def power(cls, beta: float) -> "PotentialSpec":
        if beta < 0.5:
            raise ValueError(f"power family needs beta >= 1/2, got {beta}")
        return cls(family="power", beta=float(beta),
                   shift=_power_log_mass(float(beta)),
                   metadata=f"V = (1+|x|^2)^{beta} + shift")

    @classmethod
    def from_table(cls, x1, x2, values, normalize: bool = True,
                   metadata: str = "") -> "PotentialSpec":
        table = _Table.build(np.asarray(x1, float), np.asarray(x2, float),
                             np.asarray(values, float))
        spec = cls(family="tabulated", table=table, metadata=metadata)
        if normalize:
            spec = replace(spec, shift=math.log(table.raw_mass()))
        return spec

    @classmethod
    def from_table_file(cls, path, normalize: bool = True) -> "PotentialSpec":
        x1, x2, values = read_table_file(path)
        return cls.from_table(x1, x2, values, normalize=normalize,
                              metadata=f"table:{Path(path).name}")

    @classmethod
    def custom(cls, V: Callable, grad: Callable, hess: Callable,
               shift: float = 0.0, metadata: str = "custom") -> "PotentialSpec":
        return cls(family="custom", funcs=(V, grad, hess), shift=shift,
                   metadata=metadata)

    def with_constants(self, Lambda=None, c1=None) -> "PotentialSpec":
        return replace(self,
                       Lambda=self.Lambda if Lambda is None else float(Lambda),
                       c1=self.c1 if c1 is None else float(c1))


@dataclass(frozen=True, eq=False)
class _Table:
    x1: np.ndarray
    x2: np.ndarray
    values: np.ndarray
    spline: interpolate.RectBivariateSpline

    @classmethod
    def build(cls, x1, x2, values):
        if values.shape != (x1.size, x2.size):
            raise ValueError(f"table values have shape {values.shape}, "
                             f"expected {(x1.size, x2.size)}")
        if x1.size < 4 or x2.size < 4:
            raise ValueError("tabulated potential needs at least 4x4 nodes")
        if np.any(np.diff(x1) <= 0) or np.any(np.diff(x2) <= 0):
            raise ValueError("table coordinates must be strictly increasing")
        spline = interpolate.RectBivariateSpline(x1, x2, values, kx=3, ky=3)
        return cls(x1, x2, values, spline)

    def contains(self, x1, x2):
        return ((x1 >= self.x1[0]) & (x1 <= self.x1[-1])
                & (x2 >= self.x2[0]) & (x2 <= self.x2[-1]))

    def raw_mass(self):
        xs = np.linspace(self.x1[0], self.x1[-1], 4 * self.x1.size)
        ys = np.linspace(self.x2[0], self.x2[-1], 4 * self.x2.size)
        vals = np.exp(-self.spline(xs, ys))
        return integrate.trapezoid(integrate.trapezoid(vals, ys, axis=1), xs)


def read_table_file(path):
    """Read a potential table: one header line, then rows ``x1 x2 V``.

    The rows must cover a full rectangular grid (any row order).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"potential table not found: {path}")
    data = np.loadtxt(path, skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns (x1 x2 V), got {data.shape[1]}")
    x1 = np.unique(data[:, 0])
    x2 = np.unique(data[:, 1])
    if x1.size * x2.size != data.shape[0]:
        raise ValueError(f"{path}: rows do not form a rectangular grid")
    values = np.full((x1.size, x2.size), np.nan)
    i = np.searchsorted(x1, data[:, 0])
    j = np.searchsorted(x2, data[:, 1])
    values[i, j] = data[:, 2]
    if np.isnan(values).any():
        raise ValueError(f"{path}: duplicated or missing grid points")
    return x1, x2, values


def write_table_file(path, x1, x2, values):
    x1g, x2g = np.meshgrid(x1, x2, indexing="ij")
    rows = np.column_stack([x1g.ravel(), x2g.ravel(), np.asarray(values).ravel()])
    np.savetxt(path, rows, header="x1 x2 V", comments="", fmt="%.17g")


@functools.lru_cache(maxsize=None)
def _power_log_mass(beta: float) -> float:
    # int_{R^2} e^{-(1+r^2)^beta} dx = 2 pi int_0^inf r e^{-(1+r^2)^beta} dr
    val, _ = integrate.quad(lambda r: r * math.exp(-(1.0 + r * r) ** beta),
                            0.0, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return math.log(2 * math.pi * val)


def tau(alpha):
    """Unit tangent ``(cos alpha, sin alpha)``; trailing axis has length 2."""
    alpha = np.asarray(alpha, dtype=float)
    return np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)


def tau_perp(alpha):
    """Derivative of :func:`tau` in alpha, ``(-sin alpha, cos alpha)``."""
    alpha = np.asarray(alpha, dtype=float)
    return np.stack([-np.sin(alpha), np.cos(alpha)], axis=-1)


def potential_eval(spec: PotentialSpec, x):
    """Return ``(V, grad V, Hess V)`` at points ``x`` of shape ``(..., 2)``.

    Shapes of the outputs are ``(...)``, ``(..., 2)`` and ``(..., 2, 2)``.
    Raises ``ValueError`` for points outside a tabulated domain.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"points must have a trailing axis of length 2, got {x.shape}")
    x1, x2 = x[..., 0], x[..., 1]

    if spec.family == "quadratic":
        V = 0.5 * (x1 ** 2 + x2 ** 2) + spec.shift
        grad = x.copy()
        hess = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
    elif spec.family == "power":
        b = spec.beta
        s = 1.0 + x1 ** 2 + x2 ** 2
        V = s ** b + spec.shift
        g1 = 2 * b * s ** (b - 1)
        grad = g1[..., None] * x
        g2 = 4 * b * (b - 1) * s ** (b - 2)
        hess = (g1[..., None, None] * np.eye(2)
                + g2[..., None, None] * x[..., :, None] * x[..., None, :])
    elif spec.family == "tabulated":
        tab = spec.table
        if not np.all(tab.contains(x1, x2)):
            raise ValueError("potential evaluated outside the tabulated domain "
                             f"[{tab.x1[0]}, {tab.x1[-1]}] x [{tab.x2[0]}, {tab.x2[-1]}]")
        a, b_ = x1.ravel(), x2.ravel()
        ev = tab.spline.ev
        V = ev(a, b_).reshape(x1.shape) + spec.shift
        grad = np.stack([ev(a, b_, dx=1), ev(a, b_, dy=1)], -1).reshape(x.shape)
        h11 = ev(a, b_, dx=2)
        h12 = ev(a, b_, dx=1, dy=1)
        h22 = ev(a, b_, dy=2)
        hess = np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)],
                        -2).reshape(x.shape[:-1] + (2, 2))
    else:
        fV, fg, fh = spec.funcs
        V = np.asarray(fV(x), float) + spec.shift
        grad = np.asarray(fg(x), float)
        hess = np.asarray(fh(x), float)
    return V, grad, hess


def potential_grad(spec: PotentialSpec, x):
    """``grad V`` only, without forming Hessians (hot path of the particle code)."""
    x = np.asarray(x, dtype=float)
    if spec.family == "quadratic":
        return x.copy()
    if spec.family == "power":
        s = 1.0 + x[..., 0] ** 2 + x[..., 1] ** 2
        return (2 * spec.beta * s ** (spec.beta - 1))[..., None] * x
    return potential_eval(spec, x)[1]


def potential_values(spec: PotentialSpec, x):
    """``V`` only; cheaper than :func:`potential_eval` for tabulated data."""
    if spec.family == "tabulated":
        x = np.asarray(x, float)
        if not np.all(spec.table.contains(x[..., 0], x[..., 1])):
            raise ValueError("potential evaluated outside the tabulated domain")
        return spec.table.spline.ev(x[..., 0].ravel(), x[..., 1].ravel()).reshape(
            x.shape[:-1]) + spec.shift
    return potential_eval(spec, x)[0]


def equilibrium_density(spec: PotentialSpec, x, alpha=None):
    """``F(x, alpha) = exp(-V(x))``.  The angle argument is accepted and ignored."""
    return np.exp(-potential_values(spec, x))


@dataclass
class HypothesisReport:
    box: float
    resolution: int
    mass: float
    h2_mass_error: float
    h4_worst_ratio: float
    c1: float
    theta: float
    c0: float
    h2_pass: bool
    h4_pass: bool
    integrable: bool
    h4_bounded: bool
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.h2_pass and self.h4_pass

    def rows(self):
        return [
            ("H2_mass_error", self.h2_mass_error, self.h2_pass),
            ("H4_worst_ratio", self.h4_worst_ratio, self.h4_pass),
            ("c1", self.c1, self.h4_pass),
            ("theta", self.theta, True),
            ("c0", self.c0, True),
        ]


def _box_mass(spec, L, n):
    # Gauss-Legendre per cell: exponentially accurate for smooth e^{-V}
    nodes, weights = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(-L, L, n + 1)
    h = edges[1] - edges[0]
    pts = (edges[:-1, None] + 0.5 * h * (nodes[None, :] + 1.0)).ravel()
    w = np.tile(0.5 * h * weights, n)
    X1, X2 = np.meshgrid(pts, pts, indexing="ij")
    F = equilibrium_density(spec, np.stack([X1, X2], -1))
    return float(w @ F @ w)


def check_hypotheses(spec: PotentialSpec, box: float = 8.0, resolution: int = 256,
                     mass_tol: float = 1e-6) -> HypothesisReport:
    """Numerical check of normalisation (H2) and the pointwise bound (H4).

    ``|Hess V|`` is the Frobenius norm.  When ``spec.c1`` is unset the
    smallest admissible constant (the observed worst ratio) is reported.
    The potential is flagged non-integrable when the mass keeps growing as the
    box is enlarged, and H4 is flagged unbounded when the worst ratio sits on
    the outer ring of the sample box and exceeds the interior supremum.
    """
    notes = []
    mass = _box_mass(spec, box, resolution // 4 or 1)
    integrable = True
    if spec.family != "tabulated":
        try:
            bigger = _box_mass(spec, 2 * box, resolution // 2 or 1)
        except (OverflowError, FloatingPointError):
            bigger = np.inf
        if not np.isfinite(bigger) or abs(bigger - mass) > max(mass_tol, 1e-3 * mass):
            integrable = False
            notes.append("mass grows under box enlargement: e^{-V} not integrable")
    mass_error = abs(mass - 1.0)

    xs = np.linspace(-box, box, resolution)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    with np.errstate(over="ignore", invalid="ignore"):
        _, grad, hess = potential_eval(spec, np.stack([X1, X2], -1))
        ratio = np.linalg.norm(hess, axis=(-2, -1)) / (1.0 + np.linalg.norm(grad, axis=-1))
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    worst = float(ratio.max())
    ring = max(2, resolution // 16)
    inner = ratio[ring:-ring, ring:-ring].max()
    h4_bounded = bool(np.isfinite(worst) and worst <= inner * (1 + 1e-2))
    if not h4_bounded:
        notes.append("H4 ratio grows towards the box boundary: no finite c1")

    c1 = spec.c1 if spec.c1 is not None else worst
    h4_pass = bool(h4_bounded and worst <= c1)
    return HypothesisReport(
        box=box, resolution=resolution, mass=mass, h2_mass_error=mass_error,
        h4_worst_ratio=worst, c1=float(c1), theta=0.5, c0=float(c1 + 2 * c1 ** 2),
        h2_pass=bool(integrable and mass_error <= mass_tol), h4_pass=h4_pass,
        integrable=integrable, h4_bounded=h4_bounded, notes=notes)
