"""Decay-rate fitting and the sweep of the rate over the noise amplitude.

Rates are read off ``y(t) = log ||f(t) - F||^2`` by ordinary least squares:
``lambda = -slope / 2``, so that ``||f - F|| ~ exp(-lambda t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .grid import PhaseField, PhaseGrid, build_operators, solve
from .hypo import estimate_cv, estimate_lambda_spec, lambda_theory, eps_bar_max
from .model import ModelParams, PotentialSpec
from . import sde

MIN_POINTS = 5
R2_CONFIDENT = 0.9


@dataclass
class DecayFit:
    t_lo: float
    t_hi: float
    slope: float
    intercept: float
    lam: float
    r_squared: float
    stderr: float
    n_points: int
    residual_rms: float

    @property
    def low_confidence(self) -> bool:
        return not (self.r_squared >= R2_CONFIDENT)

    @property
    def lam_stderr(self) -> float:
        return 0.5 * self.stderr


def default_window(t, y, start_fraction: float = 0.2, flat_fraction: float = 0.5):
    """Fitting window ``(i_lo, i_hi)`` (inclusive indices) for a decay series.

    Starts where ``y`` has fallen by ``start_fraction`` of its total observed
    drop.  Ends just before the first local slope (over a sliding block of
    points) that is flatter than ``flat_fraction`` of the typical early slope,
    which is where a Monte-Carlo noise floor takes over.
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    n = len(y)
    drop = y[0] - y.min()
    if n < MIN_POINTS or not drop > 0:
        return 0, n - 1
    lo = int(np.argmax(y[0] - y >= start_fraction * drop))
    lo = min(lo, n - MIN_POINTS)
    w = max(MIN_POINTS, (n - lo) // 8)
    if n - lo < 2 * w:
        return lo, n - 1
    starts = np.arange(lo, n - w + 1)
    slopes = np.array([np.polyfit(t[s:s + w], y[s:s + w], 1)[0] for s in starts])
    ref = np.median(slopes[: max(1, len(slopes) // 2)])
    if not ref < 0:
        return lo, n - 1
    flat = np.nonzero(slopes > flat_fraction * ref)[0]
    if len(flat) == 0:
        return lo, n - 1
    hi = int(starts[flat[0]] + w // 2)
    return lo, max(hi, lo + MIN_POINTS - 1)


def fit_rate(t, y, window: Optional[tuple] = None) -> DecayFit:
    """Least-squares decay rate of ``y = log ||f - F||^2`` over a time window.

    ``window`` is ``(t_lo, t_hi)``; by default it is chosen by
    :func:`default_window`.  A constant series gives ``lambda = 0`` with an
    undefined ``R^2`` (reported as nan, hence low confidence).
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("t and y must be 1-d arrays of equal length")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise ValueError("series contains non-finite values")
    if window is None:
        i0, i1 = default_window(t, y)
        sel = slice(i0, i1 + 1)
    else:
        lo, hi = window
        sel = (t >= lo) & (t <= hi)
    ts, ys = t[sel], y[sel]
    if len(ts) < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points in the window, got {len(ts)}")
    if np.ptp(ts) == 0:
        raise ValueError("degenerate window: all times are equal")
    if np.ptp(ys) == 0:
        return DecayFit(float(ts[0]), float(ts[-1]), 0.0, float(ys[0]), 0.0,
                        float("nan"), 0.0, len(ts), 0.0)
    res = stats.linregress(ts, ys)
    resid = ys - (res.intercept + res.slope * ts)
    return DecayFit(float(ts[0]), float(ts[-1]), float(res.slope), float(res.intercept),
                    -0.5 * float(res.slope), float(res.rvalue ** 2), float(res.stderr),
                    len(ts), float(np.sqrt(np.mean(resid ** 2))))


# the sweep over A ------------------------------------------------------------

@dataclass
class SweepSettings:
    """Everything one sweep row needs besides the value of ``A``."""
    spec: PotentialSpec = field(default_factory=PotentialSpec.quadratic)
    backend: str = "fp"
    grid: PhaseGrid = PhaseGrid(48, 48, 16, 6.0)        # fp solver grid
    hist_grid: PhaseGrid = PhaseGrid(16, 16, 8, 5.0)    # sde histogram grid
    init: sde.InitialCondition = sde.InitialCondition("gaussian", mean=(1.0, 0.0), std=0.6)
    N: int = 100_000
    dt: float = 0.01            # sde step; the fp step follows its CFL bound
    seed: int = 0
    eta: float = 1.0
    t_final: Optional[float] = None
    sample_interval: float = 0.25
    Lambda: Optional[float] = None
    C_V: Optional[float] = None

    def horizon(self, A: float) -> float:
        """Default run length: long enough for a clean decay window at both small and large D."""
        if self.t_final is not None:
            return self.t_final
        D = 0.5 * A * A
        return float(np.clip(8.0 * max(D, 1.0 / D) ** 0.5, 8.0, 40.0))


@dataclass
class SweepRow:
    A: float
    D: float
    lambda_fit: float
    lambda_theory: float
    r_squared: float
    window_lo: float
    window_hi: float
    backend: str
    status: str = "ok"

    def as_row(self):
        return (self.A, self.D, self.lambda_fit, self.lambda_theory, self.r_squared,
                self.window_lo, self.window_hi, self.backend)


SWEEP_COLUMNS = ("A", "D", "lambda_fit", "lambda_theory", "r_squared", "window_lo",
                 "window_hi", "backend")


def decay_series(A: float, settings: SweepSettings):
    """``(t, log ||f - F||^2)`` for one noise amplitude on the chosen backend."""
    params = ModelParams(A)
    T = settings.horizon(A)
    times = np.arange(0.0, T + 1e-9, settings.sample_interval)
    if settings.backend == "fp":
        ops = build_operators(settings.spec, settings.grid)
        f0 = PhaseField.from_function(ops.grid, settings.init.density, average=True)
        sol = solve(f0, ops, params.D, T, sample_times=times)
        y = np.log([2.0 * r.half_norm_sq for r in sol.series])
        return np.array([r.t for r in sol.series]), y
    if settings.backend == "sde":
        ens = sde.init_ensemble(settings.N, settings.init, settings.seed)
        samples, _ = sde.simulate(ens, params, settings.spec, T, settings.dt, times,
                                  grid=settings.hist_grid)
        return (np.array([s.t for s in samples]),
                np.log([max(s.l2_dist, 1e-300) ** 2 for s in samples]))
    raise ValueError(f"unknown backend {settings.backend!r}")


def theory_constants(settings: SweepSettings, grid: Optional[PhaseGrid] = None):
    """``(Lambda, C_V)`` from the settings, estimated on ``grid`` when missing."""
    Lambda, C_V = settings.Lambda, settings.C_V
    if Lambda is None or C_V is None:
        ops = build_operators(settings.spec, grid or PhaseGrid(64, 64, 32, 6.0))
        if Lambda is None:
            Lambda = estimate_lambda_spec(ops).Lambda
        if C_V is None:
            C_V = estimate_cv(ops, np.random.default_rng(settings.seed)).C_V
    return Lambda, C_V


def sweep_a(A_values: Sequence[float], settings: SweepSettings = SweepSettings()) -> list:
    """One row per ``A``: fitted rate, theoretical rate and fit diagnostics.

    A failing row is recorded with ``status`` set to the error message and
    nan entries; the sweep carries on with the next ``A``.
    """
    Lambda, C_V = theory_constants(settings)
    ebm, _ = eps_bar_max(Lambda, C_V)
    rows = []
    for A in A_values:
        A = float(A)
        D = 0.5 * A * A
        lam_th = float(lambda_theory(D, Lambda, C_V, settings.eta, ebm)) if D > 0 else 0.0
        try:
            if A <= 0:
                raise ValueError("A must be positive for a decay fit")
            t, y = decay_series(A, settings)
            fit = fit_rate(t, y)
            status = "ok" if not fit.low_confidence else "low_confidence"
            rows.append(SweepRow(A, D, fit.lam, lam_th, fit.r_squared, fit.t_lo,
                                 fit.t_hi, settings.backend, status))
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            nan = float("nan")
            rows.append(SweepRow(A, D, nan, lam_th, nan, nan, nan, settings.backend,
                                 f"failed: {exc}"))
    return rows


def has_interior_maximum(values) -> bool:
    """True when the largest entry is neither the first nor the last."""
    v = np.asarray(values, float)
    if len(v) < 3 or not np.all(np.isfinite(v)):
        return False
    i = int(np.argmax(v))
    return 0 < i < len(v) - 1
