import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from fiberlay.grid import PhaseGrid
from fiberlay.model import (ModelParams, PotentialSpec, check_hypotheses, equilibrium_density,
                            potential_eval, potential_grad, read_table_file, tau, tau_perp,
                            write_table_file, _box_mass)

angles = st.floats(-50.0, 50.0, allow_nan=False)


def test_tau_examples():
    np.testing.assert_allclose(tau(0.0), [1.0, 0.0])
    np.testing.assert_allclose(tau(math.pi / 2), [0.0, 1.0], atol=1e-16)
    np.testing.assert_allclose(tau_perp(0.0), [0.0, 1.0])


@given(angles)
def test_tau_unit_and_orthogonal(a):
    t, p = tau(a), tau_perp(a)
    assert abs(np.linalg.norm(t) - 1) < 1e-15
    assert abs(np.linalg.norm(p) - 1) < 1e-15
    assert abs(t @ p) < 1e-15


def test_tau_perp_is_derivative(rng):
    a = rng.uniform(0, 2 * np.pi, 100)
    errs = []
    for h in (1e-3, 5e-4):
        errs.append(np.abs((tau(a + h) - tau(a)) / h - tau_perp(a)).max())
    assert errs[0] < 1e-3
    assert 1.8 < errs[0] / errs[1] < 2.2  # first order forward difference


def test_model_params():
    p = ModelParams(3.0)
    assert p.D == 4.5
    assert ModelParams.from_diffusivity(4.5).A == pytest.approx(3.0)
    with pytest.raises(ValueError):
        ModelParams(-1.0)
    with pytest.raises(ValueError, match="lay-down"):
        ModelParams(1.0, kappa=1.5)
    ModelParams(1.0, kappa=1.0)


def test_quadratic_eval(rng):
    spec = PotentialSpec.quadratic()
    x = rng.normal(size=(10, 2))
    V, g, H = potential_eval(spec, x)
    np.testing.assert_allclose(V, 0.5 * (x ** 2).sum(-1) + math.log(2 * math.pi))
    np.testing.assert_allclose(g, x)
    np.testing.assert_allclose(H, np.broadcast_to(np.eye(2), (10, 2, 2)))
    np.testing.assert_allclose(potential_grad(spec, x), g)


def test_power_examples():
    s = PotentialSpec.power(0.5)
    _, g, _ = potential_eval(s, np.zeros(2))
    assert np.all(g == 0.0)
    s1 = PotentialSpec.power(1.0)
    V, _, _ = potential_eval(s1, np.array([1.0, 0.0]))
    assert V == pytest.approx(2.0 + s1.shift, abs=1e-14)
    with pytest.raises(ValueError):
        PotentialSpec.power(0.4)


@pytest.mark.parametrize("beta", [0.5, 0.75, 1.0, 1.5, 2.0])
def test_power_normalisation_incomplete_gamma(beta):
    # int e^{-(1+|x|^2)^b} dx = (pi / b) Gamma(1/b, 1)
    exact = math.pi / beta * special.gamma(1 / beta) * special.gammaincc(1 / beta, 1.0)
    assert PotentialSpec.power(beta).shift == pytest.approx(math.log(exact), abs=1e-11)


def _fd_errors(spec, x, h):
    e = np.eye(2)
    gfd = np.stack([(potential_eval(spec, x + h * e[k])[0] - potential_eval(spec, x - h * e[k])[0])
                    / (2 * h) for k in range(2)], -1)
    Hfd = np.stack([(potential_eval(spec, x + h * e[k])[1] - potential_eval(spec, x - h * e[k])[1])
                    / (2 * h) for k in range(2)], -1)
    _, g, H = potential_eval(spec, x)
    return np.abs(gfd - g).max(), np.abs(Hfd - H).max()


def _table_spec():
    xs = np.linspace(-4, 4, 161)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    return PotentialSpec.from_table(xs, xs, 0.5 * (X1 ** 2 + X2 ** 2) + 0.1 * X1 ** 3 / (1 + X1 ** 2))


@pytest.mark.parametrize("make", [PotentialSpec.quadratic, lambda: PotentialSpec.power(0.5),
                                  lambda: PotentialSpec.power(1.5), _table_spec])
def test_derivatives_match_finite_differences(make, rng):
    spec = make()
    x = rng.uniform(-2, 2, size=(20, 2))
    g1, H1 = _fd_errors(spec, x, 1e-2)
    g2, H2 = _fd_errors(spec, x, 5e-3)
    assert g1 < 1e-3 and H1 < 1e-2
    # second order: halving h divides the error by ~4 (or it is at round-off)
    assert g2 < 0.3 * g1 or g2 < 1e-9
    assert H2 < 0.3 * H1 or H2 < 1e-9


def test_equilibrium_density():
    spec = PotentialSpec.quadratic()
    assert equilibrium_density(spec, np.zeros(2)) == pytest.approx(1 / (2 * math.pi))
    x = np.array([0.3, -1.2])
    assert equilibrium_density(spec, x, 0.0) == equilibrium_density(spec, x, math.pi)
    g = PhaseGrid(64, 64, 4, 6.0)
    mass = equilibrium_density(spec, g.points()).sum() * g.hx * g.hy
    assert abs(mass - 1) < 1e-6


@pytest.mark.parametrize("spec", [PotentialSpec.quadratic(), PotentialSpec.power(1.0)])
def test_mass_converges_from_below(spec):
    masses = [_box_mass(spec, L, 64) for L in (1.0, 2.0, 4.0, 8.0)]
    assert all(a < b + 1e-15 for a, b in zip(masses, masses[1:]))
    assert abs(masses[-1] - 1) < 1e-8


def test_hypotheses_quadratic():
    rep = check_hypotheses(PotentialSpec.quadratic())
    assert rep.passed
    assert rep.h4_worst_ratio <= math.sqrt(2)
    assert rep.theta == 0.5
    assert rep.c0 == pytest.approx(math.sqrt(2) + 4)


def test_hypotheses_power_beta1():
    rep = check_hypotheses(PotentialSpec.power(1.0), box=8.0, resolution=256)
    assert rep.passed and math.isfinite(rep.c1)
    assert rep.c0 == pytest.approx(rep.c1 + 2 * rep.c1 ** 2)


def test_hypotheses_exponential_growth_fails():
    def V(x):
        return np.exp((x ** 2).sum(-1))

    def grad(x):
        return 2 * x * V(x)[..., None]

    def hess(x):
        v = V(x)[..., None, None]
        return v * (2 * np.eye(2) + 4 * x[..., :, None] * x[..., None, :])

    rep = check_hypotheses(PotentialSpec.custom(V, grad, hess), box=2.0, resolution=128)
    assert not rep.h4_bounded and not rep.passed


def test_non_integrable_flagged():
    def V(x):
        return 0.1 * np.log1p((x ** 2).sum(-1))

    def grad(x):
        return 0.2 * x / (1 + (x ** 2).sum(-1))[..., None]

    def hess(x):
        s = (1 + (x ** 2).sum(-1))[..., None, None]
        return 0.2 * np.eye(2) / s - 0.4 * x[..., :, None] * x[..., None, :] / s ** 2

    rep = check_hypotheses(PotentialSpec.custom(V, grad, hess), box=8.0, resolution=64)
    assert not rep.integrable and not rep.passed


def test_table_roundtrip_and_domain(tmp_path):
    xs = np.linspace(-3, 3, 31)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    vals = 0.5 * (X1 ** 2 + X2 ** 2)
    path = tmp_path / "v.txt"
    write_table_file(path, xs, xs, vals)
    a, b, v = read_table_file(path)
    np.testing.assert_allclose(v, vals)
    spec = PotentialSpec.from_table_file(path, normalize=False)
    Vq, _, _ = potential_eval(spec, np.array([[0.5, -0.25]]))
    assert Vq[0] == pytest.approx(0.5 * (0.25 + 0.0625), abs=1e-10)
    with pytest.raises(ValueError, match="outside"):
        potential_eval(spec, np.array([4.0, 0.0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 3.0))
def test_power_gradient_vanishes_at_origin(beta):
    spec = PotentialSpec(family="power", beta=beta)
    assert np.all(potential_eval(spec, np.zeros(2))[1] == 0.0)
