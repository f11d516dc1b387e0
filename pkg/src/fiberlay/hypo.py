"""Discrete hypocoercivity machinery for the lay-down Fokker-Planck operator.

Everything here acts on fields of a :class:`~fiberlay.grid.DiscreteOperators`
instance and uses its structure-preserving transport ``ops.T`` and spectral
``ops.L``.  Macroscopic (angle-independent) fields are plain ``(nx, ny)``
arrays; the helpers :func:`project_pi` and ``ops.embed`` move between the two
levels.

The macroscopic operator ``K = (T Pi)^* (T Pi) = -Pi T T Pi`` is assembled as
a sparse matrix.  Working in the variable ``v = rho / sqrt(F)`` turns the
weighted inner product into the Euclidean one, so ``K`` becomes the symmetric
matrix ``K_v = (J1^T J1 + J2^T J2) / 2`` built from the discrete fluxes of
``T Pi``.  The same matrix defines the elliptic problem solved by ``A``, the
discrete spectral gap ``Lambda`` and therefore the macroscopic coercivity
constant, which keeps all inequalities exact at the discrete level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import linalg as splinalg

from .grid import DiscreteOperators, _safe
from .linalg import (ConvergenceError, block_inverse_iteration, conjugate_gradient,
                     power_iteration)

SLACK = 1e-8

# MacroField: an (nx, ny) array of angle averages
MacroField = np.ndarray


class MacroSystem:
    """Sparse macroscopic operator ``K`` and a factorisation of ``1 + K``."""

    def __init__(self, ops: DiscreteOperators):
        g = ops.grid
        nx, ny = g.nx, g.ny
        self.ops = ops
        self.sqrtF = np.sqrt(ops.F)
        idx = np.arange(nx * ny).reshape(nx, ny)
        self.J1 = self._flux_matrix(idx, np.roll(idx, -1, 0), np.roll(idx, 1, 0),
                                    ops.Rxp, ops.Rxm, ops.Gx, g.hx)
        self.J2 = self._flux_matrix(idx, np.roll(idx, -1, 1), np.roll(idx, 1, 1),
                                    ops.Ryp, ops.Rym, ops.Gy, g.hy)
        self.Kv = (0.5 * (self.J1.T @ self.J1 + self.J2.T @ self.J2)).tocsc()
        self.n = nx * ny
        self._lu = splinalg.splu((sparse.identity(self.n, format="csc") + self.Kv).tocsc())
        kernel = self.sqrtF.ravel()
        self.kernel = (kernel / np.linalg.norm(kernel))[:, None]

    @staticmethod
    def _flux_matrix(idx, plus, minus, Rp, Rm, G, h):
        # v-variable flux: F^{-1/2} J F^{1/2}, entries built from sqrt ratios
        cp = np.where(Rp > 0, np.sqrt(Rp) + 1.0 / np.sqrt(_safe(Rp)), 0.0) / (4 * h)
        cm = -np.where(Rm > 0, np.sqrt(Rm) + 1.0 / np.sqrt(_safe(Rm)), 0.0) / (4 * h)
        rows = np.concatenate([idx.ravel()] * 3)
        cols = np.concatenate([plus.ravel(), minus.ravel(), idx.ravel()])
        vals = np.concatenate([cp.ravel(), cm.ravel(), 0.5 * G.ravel()])
        n = idx.size
        J = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        J.eliminate_zeros()
        return J

    def to_v(self, rho):
        return (rho / self.sqrtF).ravel()

    def from_v(self, v):
        return v.reshape(self.sqrtF.shape) * self.sqrtF

    def K(self, rho):
        return self.from_v(self.Kv @ self.to_v(rho))

    def solve(self, w, method="direct", tol=1e-12):
        """Solve ``(1 + K) h = w``.  Returns ``(h, relative_residual)``."""
        b = self.to_v(w)
        if method == "direct":
            v = self._lu.solve(b)
        elif method == "cg":
            diag = 1.0 + self.Kv.diagonal()
            v, _, _ = conjugate_gradient(lambda x: x + self.Kv @ x, b, tol=tol,
                                         precond=lambda r: r / diag)
        else:
            raise ValueError(f"unknown solver {method!r}")
        bn = np.linalg.norm(b)
        res = np.linalg.norm(v + self.Kv @ v - b) / bn if bn > 0 else 0.0
        return self.from_v(v), float(res)


def macro_system(ops: DiscreteOperators) -> MacroSystem:
    sys_ = ops._cache.get("macro")
    if sys_ is None:
        sys_ = ops._cache["macro"] = MacroSystem(ops)
    return sys_


# projections and the auxiliary operator ----------------------------------------

def project_pi(g, ops: DiscreteOperators) -> MacroField:
    """Angle average ``rho_g = int g d nu`` (exact for the uniform angle grid)."""
    return ops.project(g)


def apply_t_pi(rho: MacroField, ops: DiscreteOperators):
    """``T Pi g`` for a macroscopic density: ``tau . e^{-V} grad(e^V rho)``."""
    J1, J2 = ops.macro_flux(rho)
    return J1[..., None] * ops.cos + J2[..., None] * ops.sin


def t_pi_adjoint(g, ops: DiscreteOperators) -> MacroField:
    """``(T Pi)^* g = -Pi T g`` by skew-symmetry of the discrete transport."""
    return -ops.project(ops.T(g))


def solve_elliptic(rho_g: MacroField, ops: DiscreteOperators, method: str = "direct",
                   tol: float = 1e-10):
    """Solve ``e^{-V} u - (1/2) div(e^{-V} grad u) = rho_g`` for ``u``.

    The divergence form is the adjoint-of-flux discretisation shared with
    ``T Pi``.  Returns ``(u, relative_residual)``; raises
    :class:`~fiberlay.linalg.ConvergenceError` above ``tol``.
    """
    h, res = macro_system(ops).solve(rho_g, method=method)
    if not res <= tol:
        raise ConvergenceError("elliptic solve missed its tolerance", res)
    return h / ops.F, res


def apply_a(g, ops: DiscreteOperators, method: str = "direct") -> MacroField:
    """``A g = (1 + (T Pi)^* T Pi)^{-1} (T Pi)^* g`` as a macroscopic field."""
    h, _ = macro_system(ops).solve(t_pi_adjoint(g, ops), method=method)
    return h


def modified_entropy(g, eps: float, ops: DiscreteOperators) -> float:
    """``H[g] = ||g||^2 / 2 + eps <A g, g>``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must lie in [0, 1), got {eps}")
    Ag = apply_a(g, ops)
    return 0.5 * ops.inner(g, g) + eps * ops.macro_inner(Ag, ops.project(g))


@dataclass
class DissipationTerms:
    micro: float           # -D <L g, g>
    macro: float           # eps <A T Pi g, g>
    mixed: float           # eps <A T (1-Pi) g, g>
    transport_a: float     # -eps <T A g, g>
    collision_a: float     # -eps D <A L g, g>

    @property
    def total(self) -> float:
        return self.micro + self.macro + self.mixed + self.transport_a + self.collision_a

    def as_tuple(self):
        return (self.micro, self.macro, self.mixed, self.transport_a, self.collision_a)


def dissipation(g, eps: float, D: float, ops: DiscreteOperators) -> DissipationTerms:
    """The five terms of the entropy dissipation ``-dH/dt``."""
    rho = ops.project(g)
    micro_part = g - rho[..., None]
    A_Tpi = apply_a(apply_t_pi(rho, ops), ops)
    A_Tmicro = apply_a(ops.T(micro_part), ops)
    Ag = apply_a(g, ops)
    TAg = apply_t_pi(Ag, ops)
    ALg = apply_a(ops.L(g), ops)
    return DissipationTerms(
        micro=-D * ops.inner(ops.L(g), g),
        macro=eps * ops.macro_inner(A_Tpi, rho),
        mixed=eps * ops.macro_inner(A_Tmicro, rho),
        transport_a=-eps * ops.inner(TAg, g),
        collision_a=-eps * D * ops.macro_inner(ALg, rho),
    )


# random test fields ---------------------------------------------------------

def random_field(ops: DiscreteOperators, rng: np.random.Generator, smooth: bool = False,
                 zero_mass: bool = True, modes: int = 4):
    """Random deviation field scaled by ``sqrt(F)`` (unit weighted variance per cell).

    ``smooth=True`` keeps only Fourier modes up to ``modes`` in each direction
    and multiplies by ``F`` instead.  ``zero_mass`` removes a multiple of
    ``F`` so the macroscopic part has zero total mass, as ``f - F`` does.
    """
    g = ops.grid
    if smooth:
        xi = rng.standard_normal(g.shape)
        spec = np.fft.fftn(xi)
        kx = np.abs(np.fft.fftfreq(g.nx, 1.0 / g.nx))
        ky = np.abs(np.fft.fftfreq(g.ny, 1.0 / g.ny))
        ka = np.abs(np.fft.fftfreq(g.na, 1.0 / g.na))
        keep = ((kx[:, None, None] <= modes) & (ky[None, :, None] <= modes)
                & (ka[None, None, :] <= min(modes, g.na // 2 - 1)))
        field_ = np.real(np.fft.ifftn(spec * keep)) * ops.F[..., None]
    else:
        field_ = rng.standard_normal(g.shape) * np.sqrt(ops.F)[..., None]
    if zero_mass:
        rho = field_.mean(axis=2)
        field_ = field_ - (rho.sum() / ops.F.sum()) * ops.F[..., None]
    return field_


# spectral gap and the elliptic-regularity constant -----------------------------

@dataclass
class SpectralGap:
    Lambda: float
    residual: float
    iterations: int
    eigenvector: np.ndarray = field(repr=False, default=None)


def estimate_lambda_spec(ops: DiscreteOperators, tol: float = 1e-11, block: int = 6,
                         shift: float = 1e-3, maxiter: int = 500) -> SpectralGap:
    """Smallest nonzero eigenvalue of ``u -> -e^V div(e^{-V} grad u)``.

    The discrete operator is ``2 K`` (the weighted Laplacian generated by the
    fluxes of ``T Pi``), acting on ``e^{-V} dx``-mean-zero functions.
    Constants are deflated explicitly; inverse subspace iteration uses a sparse
    LU factorisation of ``2 K + shift``.
    """
    msys = macro_system(ops)
    A = (2.0 * msys.Kv).tocsc()
    lu = splinalg.splu((A + shift * sparse.identity(msys.n, format="csc")).tocsc())

    def solve_shifted(Y):
        return lu.solve(np.asarray(Y))

    lam, vec, res, it = block_inverse_iteration(
        lambda x: A @ x, solve_shifted, msys.n, block=block, deflate=msys.kernel,
        tol=tol, maxiter=maxiter)
    if not lam > 0:
        raise ConvergenceError("spectral gap estimate is not positive", res)
    u = msys.from_v(vec) / ops.F
    return SpectralGap(Lambda=float(lam), residual=float(res), iterations=it, eigenvector=u)


@dataclass
class CVEstimate:
    C_V: float
    residual: float
    iterations: int
    converged: bool


def _at_at_adjoint(m, ops):
    # (A T)(A T)^* m = A T (A T)^* m = -A T T T Pi (1 + K)^{-1} m
    h, _ = macro_system(ops).solve(m)
    return -apply_a(ops.T(ops.T(apply_t_pi(h, ops))), ops)


def at_adjoint(g, ops: DiscreteOperators):
    """``(A T)^* g = -T^2 Pi (1 + (T Pi)^* T Pi)^{-1} g``."""
    h, _ = macro_system(ops).solve(ops.project(g))
    return -ops.T(apply_t_pi(h, ops))


def estimate_cv(ops: DiscreteOperators, rng: Optional[np.random.Generator] = None,
                tol: float = 1e-10, maxiter: int = 3000, method: str = "lanczos") -> CVEstimate:
    """Operator norm of ``(A T)^*`` from the top eigenvalue of ``(A T)(A T)^*``.

    The Gram operator acts on macroscopic fields in the ``v = rho / sqrt(F)``
    variables, where it is symmetric.  ``method="lanczos"`` uses ARPACK,
    ``method="power"`` plain power iteration from a random start.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    msys = macro_system(ops)

    def apply(v):
        return msys.to_v(_at_at_adjoint(msys.from_v(v), ops))

    x0 = rng.standard_normal(msys.n)
    if method == "power":
        theta, _, res, it, ok = power_iteration(apply, x0, tol=tol, maxiter=maxiter)
    elif method == "lanczos":
        counter = [0]

        def matvec(v):
            counter[0] += 1
            return apply(np.ravel(v))

        op = splinalg.LinearOperator((msys.n, msys.n), matvec=matvec, dtype=float)
        try:
            w, V = splinalg.eigsh(op, k=1, which="LA", tol=tol, v0=x0, maxiter=maxiter)
            ok = True
        except splinalg.ArpackNoConvergence as exc:
            if len(exc.eigenvalues) == 0:
                raise ConvergenceError("Lanczos found no eigenvalue", np.inf) from exc
            w, V, ok = exc.eigenvalues, exc.eigenvectors, False
        theta = float(w[0])
        v = V[:, 0]
        res = float(np.linalg.norm(apply(v) - theta * v) / max(abs(theta), 1e-300))
        it = counter[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    return CVEstimate(C_V=math.sqrt(max(theta, 0.0)), residual=float(res),
                      iterations=it, converged=ok)


# coercivity and boundedness checks --------------------------------------------

@dataclass
class InequalityCheck:
    name: str
    relation: str          # ">=" or "<="
    bound: float
    worst_ratio: float
    trials: int

    @property
    def passed(self) -> bool:
        if self.relation == ">=":
            return self.worst_ratio >= self.bound - SLACK
        return self.worst_ratio <= self.bound + SLACK


@dataclass
class CoercivityReport:
    checks: list
    Lambda: float
    C_V: float
    D: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name) -> InequalityCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def verify_coercivity(ops: DiscreteOperators, D: float, trials: int = 100,
                      Lambda: Optional[float] = None, C_V: Optional[float] = None,
                      eta: Optional[float] = None,
                      rng: Optional[np.random.Generator] = None) -> CoercivityReport:
    """Worst observed ratios of every coercivity/boundedness inequality.

    Trials alternate between white-noise and smooth low-mode random fields.

    ``Lambda`` and ``C_V`` are estimated when not supplied.  With ``eta``
    given, the hypocoercive dissipation bound ``D[g] >= 2 lambda ||g||^2`` is
    checked as well, using the rate chain of :func:`theoretical_rate`.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if Lambda is None:
        Lambda = estimate_lambda_spec(ops).Lambda
    if C_V is None:
        C_V = estimate_cv(ops).C_V
    chain = theoretical_rate(Lambda, C_V, D, eta) if eta is not None else None

    micro, macro, a_bound, ta, al, atm, diss = ([] for _ in range(7))
    for k in range(trials):
        # alternate white noise with smooth low-mode fields, which come closest to the bounds
        g = random_field(ops, rng, smooth=bool(k % 2), modes=2)
        rho = ops.project(g)
        micro_part = g - rho[..., None]
        n_micro = ops.norm(micro_part)
        micro.append(-ops.inner(ops.L(g), g) / n_micro ** 2)
        macro.append(ops.macro_inner(apply_a(apply_t_pi(rho, ops), ops), rho)
                     / ops.macro_norm(rho) ** 2)
        Ag = apply_a(g, ops)
        a_bound.append(ops.macro_norm(Ag) / n_micro)
        ta.append(ops.norm(apply_t_pi(Ag, ops)) / n_micro)
        al.append(ops.macro_norm(apply_a(ops.L(g), ops)) / n_micro)
        atm.append(ops.macro_norm(apply_a(ops.T(micro_part), ops)) / n_micro)
        if chain is not None:
            d = dissipation(g, chain.eps, D, ops).total
            diss.append(d / (2 * chain.lam * ops.inner(g, g)))

    checks = [
        InequalityCheck("microscopic", ">=", 1.0, min(micro), trials),
        InequalityCheck("macroscopic", ">=", Lambda / (2 + Lambda), min(macro), trials),
        InequalityCheck("A_bound", "<=", 0.5, max(a_bound), trials),
        InequalityCheck("TA_bound", "<=", 1.0, max(ta), trials),
        InequalityCheck("AL_bound", "<=", 0.5, max(al), trials),
        InequalityCheck("AT_micro_bound", "<=", C_V, max(atm), trials),
    ]
    if chain is not None:
        checks.append(InequalityCheck("dissipation", ">=", 1.0, min(diss), trials))
    return CoercivityReport(checks=checks, Lambda=Lambda, C_V=C_V, D=D)


# the theoretical rate chain -------------------------------------------------

LOG_D_RANGE = (math.log(1e-4), math.log(1e4))


def _c(D, C_V):
    return C_V + 1.0 + 0.5 * D


def rate_r(D, Lambda, C_V):
    c = _c(D, C_V)
    return (2 * Lambda + (2 + Lambda) * c) * c / (2 * Lambda)


def rate_s(Lambda):
    return Lambda / (2 * (2 + Lambda))


def eps_bar(D, Lambda, C_V):
    return D / (rate_r(D, Lambda, C_V) + rate_s(Lambda))


def eps_bar_max(Lambda, C_V):
    """``max{1, max_D eps_bar(D)}`` by golden-section search on ``log D``."""
    lo, hi = LOG_D_RANGE
    grid = np.linspace(lo, hi, 81)
    vals = [eps_bar(math.exp(t), Lambda, C_V) for t in grid]
    i = int(np.clip(np.argmax(vals), 1, len(grid) - 2))
    res = optimize.minimize_scalar(lambda t: -eps_bar(math.exp(t), Lambda, C_V),
                                   bracket=(grid[i - 1], grid[i], grid[i + 1]),
                                   method="golden", tol=1e-10)
    return max(1.0, float(-res.fun)), math.exp(float(res.x))


@dataclass
class RateChain:
    Lambda: float
    C_V: float
    eta: float
    D: float
    delta: float
    r: float
    s: float
    eps_bar: float
    eps_bar_max: float
    eps: float
    lam: float
    C1: float = float("nan")
    C2: float = float("nan")
    D_curve: np.ndarray = field(default=None, repr=False)
    eps_bar_curve: np.ndarray = field(default=None, repr=False)

    def closed_form(self, D):
        return self.eta / (1 + self.eta) * self.C1 * D / (1 + self.C2 * D ** 2)


def lambda_theory(D, Lambda, C_V, eta, ebm=None):
    """Rate ``lambda(D) = eps s / 2`` of the chain for scalar or array ``D``."""
    if ebm is None:
        ebm, _ = eps_bar_max(Lambda, C_V)
    D = np.asarray(D, float)
    eps = eta / (1 + eta) * eps_bar(D, Lambda, C_V) / ebm
    return 0.5 * eps * rate_s(Lambda)


def fit_closed_form(D, lam, eta, scale: str = "linear"):
    """Least-squares ``C1, C2`` for ``eta/(1+eta) C1 D / (1 + C2 D^2)``.

    ``scale="linear"`` minimises residuals in ``lam`` itself, the scale on
    which ``R^2`` is reported.  ``scale="log"`` weights every decade of ``D``
    equally.  Returns ``(C1, C2, r_squared)`` with ``R^2`` computed on ``lam``.
    """
    if scale not in ("linear", "log"):
        raise ValueError(f"unknown scale {scale!r}")
    D = np.asarray(D, float)
    lam = np.asarray(lam, float)
    k = eta / (1 + eta)
    i0 = np.argmin(D)
    i1 = np.argmax(D)
    C1_0 = lam[i0] / (k * D[i0])
    C2_0 = max(C1_0 / (lam[i1] / k * D[i1]) if lam[i1] > 0 else 1.0, 1e-12)

    def model(p):
        C1, C2 = np.exp(p)
        return k * C1 * D / (1 + C2 * D ** 2)

    # the log fit is well conditioned and seeds the linear one
    sol = optimize.least_squares(lambda p: np.log(model(p)) - np.log(lam),
                                 np.log([C1_0, C2_0]), method="lm", xtol=1e-14)
    if scale == "linear":
        ref = np.abs(lam).max()
        sol = optimize.least_squares(lambda p: (model(p) - lam) / ref, sol.x, method="lm",
                                     xtol=1e-14)
    C1, C2 = np.exp(sol.x)
    pred = model(sol.x)
    ss_res = float(np.sum((lam - pred) ** 2))
    ss_tot = float(np.sum((lam - lam.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(C1), float(C2), r2


def theoretical_rate(Lambda: float, C_V: float, D: float, eta: float) -> RateChain:
    """Explicit decay rate for diffusivity ``D`` from ``Lambda`` and ``C_V``."""
    if not (Lambda > 0 and C_V > 0 and D > 0 and eta > 0):
        raise ValueError("Lambda, C_V, D and eta must all be positive")
    c = _c(D, C_V)
    ebm, _ = eps_bar_max(Lambda, C_V)
    eb = eps_bar(D, Lambda, C_V)
    eps = eta / (1 + eta) * eb / ebm
    s = rate_s(Lambda)
    D_curve = np.exp(np.linspace(*LOG_D_RANGE, 81))
    lam_curve = lambda_theory(D_curve, Lambda, C_V, eta, ebm)
    C1, C2, _ = fit_closed_form(D_curve, lam_curve, eta)
    return RateChain(
        Lambda=Lambda, C_V=C_V, eta=eta, D=D,
        delta=Lambda / ((2 + Lambda) * c), r=rate_r(D, Lambda, C_V), s=s,
        eps_bar=eb, eps_bar_max=ebm, eps=eps, lam=0.5 * eps * s, C1=C1, C2=C2,
        D_curve=D_curve, eps_bar_curve=eps_bar(D_curve, Lambda, C_V))


RATE_CHAIN_COLUMNS = ("D", "delta", "r", "s", "eps_bar", "eps", "lambda_theory")


def rate_chain_row(chain: RateChain):
    return (chain.D, chain.delta, chain.r, chain.s, chain.eps_bar, chain.eps, chain.lam)
