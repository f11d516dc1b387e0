"""Acceptance criteria 1-11, one printed PASS/FAIL line each."""
import math

import numpy as np
import pytest

from fiberlay import cli, hypo, rates, sde
from fiberlay.grid import PhaseField, PhaseGrid, build_operators, solve
from fiberlay.model import ModelParams

pytestmark = pytest.mark.acceptance

N_FIELDS = 100


@pytest.fixture(scope="module")
def gap64(ops64):
    return hypo.estimate_lambda_spec(ops64)


@pytest.fixture(scope="module")
def cv64(ops64):
    return hypo.estimate_cv(ops64, np.random.default_rng(7))


@pytest.fixture(scope="module")
def report64(ops64, gap64, cv64):
    return hypo.verify_coercivity(ops64, 4.5, trials=N_FIELDS, Lambda=gap64.Lambda,
                                  C_V=cv64.C_V, eta=1.0, rng=np.random.default_rng(2024))


def test_c1_structural_identities(ops64, criterion):
    ops = ops64
    rng = np.random.default_rng(1)
    worst = {}

    def note(name, v):
        worst[name] = max(worst.get(name, 0.0), v)

    for _ in range(N_FIELDS):
        f = hypo.random_field(ops, rng, zero_mass=False)
        g = hypo.random_field(ops, rng, zero_mass=False)
        s = ops.norm(f) * ops.norm(g)
        note("T skew", abs(ops.inner(ops.T(f), g) + ops.inner(f, ops.T(g))) / s)
        note("L symmetric", abs(ops.inner(ops.L(f), g) - ops.inner(f, ops.L(g)))
             / (ops.norm(ops.L(f)) * ops.norm(g)))
        note("L negative", max(0.0, ops.inner(ops.L(f), f)) / ops.norm(ops.L(f)) / ops.norm(f))
        pf = ops.embed(ops.project(f))
        note("Pi idempotent", ops.norm(ops.embed(ops.project(pf)) - pf) / ops.norm(pf))
        note("Pi self-adjoint", abs(ops.inner(pf, g) - ops.inner(f, ops.embed(ops.project(g))))
             / s)
        note("Pi T Pi", ops.macro_norm(ops.project(ops.T(pf.copy())))
             / ops.norm(ops.T(pf.copy())))
        Af = hypo.apply_a(f, ops)
        note("A L = -A", ops.macro_norm(hypo.apply_a(ops.L(f), ops) + Af) / ops.macro_norm(Af))
    ok = max(worst.values()) <= 1e-10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(1, ok, f"worst relative violations: {detail}")
    assert ok


def test_c2_operator_bounds(report64, criterion):
    checks = [report64.by_name(n) for n in ("A_bound", "TA_bound", "AL_bound")]
    ok = all(c.passed for c in checks)
    criterion(2, ok, ", ".join(f"{c.name} {c.worst_ratio:.4f} <= {c.bound}" for c in checks))
    assert ok


def test_c3_coercivity(report64, gap64, criterion):
    mi = report64.by_name("microscopic")
    ma = report64.by_name("macroscopic")
    bound = gap64.Lambda / (2 + gap64.Lambda)
    ok = mi.worst_ratio >= 1 - 1e-10 and ma.worst_ratio >= bound - 1e-6
    criterion(3, ok, f"micro min {mi.worst_ratio:.12f} >= 1, "
                     f"macro min {ma.worst_ratio:.6f} >= Lambda/(2+Lambda) = {bound:.6f}")
    assert ok


def test_c4_spectral_gap(quad, criterion):
    lams = [hypo.estimate_lambda_spec(build_operators(quad, PhaseGrid(n, n, 4, 6.0))).Lambda
            for n in (32, 64, 128)]
    err = [abs(x - 1.0) for x in lams]
    orders = [math.log2(err[0] / err[1]), math.log2(err[1] / err[2])]
    ok = abs(lams[-1] - 1) <= 0.02 and min(orders) >= 1.8
    criterion(4, ok, "Lambda(32, 64, 128) = " + ", ".join(f"{x:.6f}" for x in lams)
              + f"; observed orders {orders[0]:.2f}, {orders[1]:.2f}")
    assert ok


def test_c5_entropy_identity(ops32, criterion):
    ops = ops32
    D = 1.0
    g = ops.grid
    f0 = PhaseField.from_function(
        g, lambda x, y, a: np.exp(-0.5 * ((x - 1) ** 2 + y ** 2) / 0.36) / (2 * np.pi * 0.36)
        * (1 + 0.5 * np.cos(a) + 0.3 * np.sin(2 * a)))
    F = ops.equilibrium()

    def rel_error(dt):
        sol = solve(f0, ops, D, dt, dt=dt, scheme="central", keep_fields=True)
        a, b = sol.trajectory[0].values, sol.trajectory[-1].values
        lhs = (0.5 * ops.norm(b - F) ** 2 - 0.5 * ops.norm(a - F) ** 2) / dt
        # trapezoidal average of D ||d_alpha f||^2 over the step
        rhs = -0.5 * D * (-ops.inner(ops.L(a), a) - ops.inner(ops.L(b), b))
        return abs(lhs - rhs) / abs(rhs)

    errs = [rel_error(dt) for dt in (4e-3, 2e-3, 1e-3)]
    ok = errs[0] <= 0.05 and errs[1] < errs[0] and errs[2] < errs[1]
    criterion(5, ok, "relative mismatch at dt = 4e-3, 2e-3, 1e-3: "
              + ", ".join(f"{e:.2e}" for e in errs))
    assert ok


def test_c6_exponential_decay(quad, criterion):
    fits = []
    for n in (64, 128):
        s = rates.SweepSettings(grid=PhaseGrid(n, n, 32, 6.0), Lambda=1.0, C_V=2.3)
        fits.append(rates.fit_rate(*rates.decay_series(3.0, s)))
    change = abs(fits[1].lam - fits[0].lam) / fits[1].lam
    ok = min(f.r_squared for f in fits) >= 0.99 and change < 0.05
    criterion(6, ok, f"lambda 64^2 {fits[0].lam:.5f} (R2 {fits[0].r_squared:.4f}), "
                     f"128^2 {fits[1].lam:.5f} (R2 {fits[1].r_squared:.4f}), "
                     f"change {100 * change:.2f}%")
    assert ok


def test_c7_hypocoercive_dissipation(report64, ops64, gap64, cv64, criterion):
    chain = hypo.theoretical_rate(gap64.Lambda, cv64.C_V, 4.5, 1.0)
    d = report64.by_name("dissipation")
    # worst_ratio is D[g] / (2 lambda ||g||^2); fields are normalised below
    rng = np.random.default_rng(99)
    worst_gap = math.inf
    for k in range(N_FIELDS):
        g = hypo.random_field(ops64, rng, smooth=bool(k % 2), modes=2)
        g /= ops64.norm(g)
        worst_gap = min(worst_gap, hypo.dissipation(g, chain.eps, 4.5, ops64).total
                        - 2 * chain.lam)
    ok = worst_gap >= -1e-8 and d.passed
    criterion(7, ok, f"lambda {chain.lam:.4e}, eps {chain.eps:.4f}; "
                     f"min D[g] - 2 lambda ||g||^2 = {worst_gap:.3e} (unit fields), "
                     f"min ratio {d.worst_ratio:.3f}")
    assert ok


def test_c8_rate_asymptotics(gap64, cv64, criterion):
    def lam(D):
        return float(hypo.lambda_theory(D, gap64.Lambda, cv64.C_V, 1.0))

    small = [lam(D) / D for D in (1e-3, 1e-4)]
    large = [lam(D) * D for D in (1e3, 1e4)]
    d_small = abs(small[0] / small[1] - 1)
    d_large = abs(large[0] / large[1] - 1)
    ok = d_small <= 0.1 and d_large <= 0.1
    criterion(8, ok, f"lambda/D varies {100 * d_small:.2f}% on [1e-4, 1e-3], "
                     f"lambda*D varies {100 * d_large:.2f}% on [1e3, 1e4]")
    assert ok


def test_c9_sweep(gap64, cv64, criterion):
    A = [0.25, 0.5, 1, 2, 3, 4, 6, 8]
    s = rates.SweepSettings(Lambda=gap64.Lambda, C_V=cv64.C_V)
    rows = rates.sweep_a(A, s)
    lam_fit = [r.lambda_fit for r in rows]
    D = np.array([r.D for r in rows])
    lam_th = np.array([r.lambda_theory for r in rows])
    _, _, r2 = hypo.fit_closed_form(D, lam_th, 1.0)
    interior = rates.has_interior_maximum(lam_fit)
    ok = interior and r2 >= 0.9
    criterion(9, ok, "fitted lambda(A) = " + ", ".join(f"{x:.4f}" for x in lam_fit)
              + f"; argmax A = {A[int(np.argmax(lam_fit))]}; closed form R2 {r2:.4f}")
    assert ok


def _coarse_cells(fine, factor):
    n = fine.shape[0] // factor
    return fine.reshape(n, factor, n, factor).sum(axis=(1, 3))


def test_c10_sde_vs_fp(quad, criterion):
    init = sde.InitialCondition("gaussian", mean=(1.0, 0.0), std=0.6)
    params = ModelParams(3.0)
    N = 1_000_000
    box = 6.0
    # fp reference, fine enough that its error sits well below the Monte-Carlo noise
    ops = build_operators(quad, PhaseGrid(192, 192, 64, box))
    f0 = PhaseField.from_function(ops.grid, init.density, average=True)
    sol = solve(f0, ops, params.D, 1.0)
    rho_fp = ops.project(sol.final.values) * ops.grid.hx * ops.grid.hy
    p = _coarse_cells(rho_fp, 16)                      # 12 x 12 coarse cells of width 1
    ens = sde.init_ensemble(N, init, seed=10)
    _, fin = sde.simulate(ens, params, quad, 1.0, 2.5e-3, grid=PhaseGrid(12, 12, 4, box))
    edges = np.linspace(-box, box, 13)
    counts, _, _ = np.histogram2d(fin.x[:, 0], fin.x[:, 1], bins=(edges, edges))
    sigma = np.sqrt(N * p * (1 - p))
    live = N * p >= 5
    z = np.abs(counts - N * p)[live] / sigma[live]
    frac = float(np.mean(z <= 3))
    ok = frac >= 0.99
    criterion(10, ok, f"{100 * frac:.1f}% of {live.sum()} populated coarse cells within "
                      f"3 sigma (max |z| {z.max():.2f})")
    assert ok


SMALL = """\
[grid]
nx = 16
ny = 16
na = 8
[run]
T_final = 1
N = 5000
[theory]
trials = 5
[sweep]
A_values = 1, 3
nx = 16
ny = 16
na = 8
T_final = 4
"""


def test_c11_determinism(tmp_path, criterion):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMALL)
    mismatches = []
    n_files = 0
    for cmd in cli.COMMANDS:
        a, b = tmp_path / f"{cmd}_a", tmp_path / f"{cmd}_b"
        assert cli.main([cmd, "--config", str(cfg), "--out", str(a), "--seed", "5", "-q"]) == 0
        manifest = a / f"manifest_{cmd}.ini"
        assert cli.main([cmd, "--config", str(manifest), "--out", str(b), "-q"]) == 0
        for path in sorted(a.glob("*.csv")):
            n_files += 1
            if path.read_bytes() != (b / path.name).read_bytes():
                mismatches.append(f"{cmd}/{path.name}")
    ok = not mismatches and n_files >= 5
    criterion(11, ok, f"{n_files} CSVs from {len(cli.COMMANDS)} commands rerun from their "
                      f"manifests; mismatches: {mismatches or 'none'}")
    assert ok
