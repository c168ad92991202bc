import numpy as np
import pytest
from hypothesis import given, strategies as st

from nonlocal_hjb.errors import InvalidParameter, ZeroPerturbation
from nonlocal_hjb.grid import BACKWARD, build_tri_grid, time_reflect
from nonlocal_hjb.holder import field_norm
from nonlocal_hjb.linear import (LinearSystemSpec, check_ellipticity, coeffs, march_linear, reflect_linear_spec,
                                 sample_datum, sample_source, solve_augmented, stability_ratio, zero_datum,
                                 zero_source)
from nonlocal_hjb.problems import manufactured_linear

PI_BOX = (-np.pi, np.pi)


def _spec(f=None, g=None, B=0.3, **kw):
    A = lambda t, s, y: (0.1 * np.cos(y)[:, None, None] * np.eye(1), 0.0, 1.0 + 0.2 * t)
    return LinearSystemSpec(1, A, coeffs(B, 0, 0.1), f or zero_source(1), g or zero_datum(1), **kw)


def test_laplacian_is_elliptic_with_zero_margin():
    spec = LinearSystemSpec(1, coeffs(0, 0, 1), coeffs(), zero_source(1), zero_datum(1), lam=1.0)
    rep = check_ellipticity(spec, build_tri_grid(1.0, 4, (-1, 1), 9))
    assert rep.passed and rep.margin == pytest.approx(0.0, abs=1e-14)


def test_negative_sum_fails_on_a_plus_b():
    spec = LinearSystemSpec(1, coeffs(0, 0, 1), coeffs(0, 0, -2), zero_source(1), zero_datum(1), lam=0.5)
    rep = check_ellipticity(spec, build_tri_grid(1.0, 4, (-1, 1), 9))
    assert not rep.passed and rep.worst["test"] == "A+B"


def test_ellipticity_margin_matches_brute_force(rng):
    m = 3
    base = rng.normal(size=(m, m)) * 0.2
    A2 = base + np.diag(np.abs(base).sum(axis=1) + 1.0)
    spec = LinearSystemSpec(m, coeffs(np.zeros((m, m)), np.zeros((m, m)), A2), coeffs(np.zeros((m, m))),
                            zero_source(m), zero_datum(m), lam=0.2)
    rep = check_ellipticity(spec, build_tri_grid(1.0, 4, (-1, 1), 9), probes=1000, seed=3)
    v = rep.probes["v"]
    xi2 = rep.probes["xi"][:, 0] ** 2
    brute = np.einsum("pa,ab,pb->p", v, A2, v) * xi2 - 0.2
    assert rep.margin == pytest.approx(brute.min(), abs=1e-12)


def test_zero_data_gives_zero():
    rep = march_linear(_spec(), build_tri_grid(1.0, 8, PI_BOX, 17))
    assert np.all(rep.solution.values == 0.0) and rep.residual_max == 0.0


def test_heat_equation_against_closed_form():
    exact = lambda t, s, y: (np.exp(-s) * np.sin(y))[:, None]
    spec = LinearSystemSpec(1, coeffs(0, 0, 1), coeffs(), zero_source(1),
                            lambda t, y: np.sin(y)[:, None], exact=exact)
    g = build_tri_grid(1.0, 64, PI_BOX, 129)
    u = march_linear(spec, g).solution
    err = max(np.abs(u.values[i, k] - exact(0, g.times[k], g.axis(0))).max() for i, k in g.pairs())
    assert err < 5e-3


def test_theta_half_also_converges():
    mf = manufactured_linear()
    g = build_tri_grid(1.0, 32, PI_BOX, 65)
    u = march_linear(mf.spec, g, theta=0.5).solution
    err = max(np.abs(u.values[i, k] - mf.exact(g.times[i], g.times[k], g.axis(0))).max() for i, k in g.pairs())
    assert err < 5e-3


def test_invalid_options():
    g = build_tri_grid(1.0, 4, PI_BOX, 9)
    with pytest.raises(InvalidParameter):
        march_linear(_spec(), g, theta=1.5)
    with pytest.raises(InvalidParameter):
        march_linear(_spec(), g, diagonal="explicit")


@given(st.integers(0, 2**31 - 1))
def test_superposition(seed):
    r = np.random.default_rng(seed)
    c = r.normal(size=(4, 3))

    def data(row):
        f = lambda t, s, y: (row[0] * np.sin(y + t) + row[1] * s)[:, None]
        g = lambda t, y: (row[2] * np.cos(y) + t)[:, None]
        return f, g

    grid = build_tri_grid(1.0, 6, PI_BOX, 13)
    f1, g1 = data(c[0])
    f2, g2 = data(c[1])
    solve = lambda f, g: march_linear(_spec(f, g), grid).solution.values
    lhs = solve(lambda *a: f1(*a) + f2(*a), lambda *a: g1(*a) + g2(*a)) + solve(None, None)
    rhs = solve(f1, g1) + solve(f2, g2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_causality():
    grid = build_tri_grid(1.0, 8, PI_BOX, 17)
    f = lambda t, s, y: (np.sin(y) * (1 + t))[:, None]
    f_late = lambda t, s, y: f(t, s, y) + (10.0 if s > 0.5 + 1e-12 else 0.0)
    u1 = march_linear(_spec(f), grid).solution.values
    u2 = march_linear(_spec(f_late), grid).solution.values
    assert np.array_equal(u1[:, :5], u2[:, :5])
    assert not np.array_equal(u1[:, 5:], u2[:, 5:])


def test_backward_equals_reflected_forward():
    mf = manufactured_linear()
    fgrid = build_tri_grid(1.0, 16, PI_BOX, 33)
    bspec = reflect_linear_spec(mf.spec, 1.0)
    back = march_linear(bspec, fgrid.reflected()).solution
    fwd = march_linear(reflect_linear_spec(bspec, 1.0), fgrid).solution
    assert np.max(np.abs(time_reflect(fwd).values - back.values)) <= 1e-12


def test_augmented_t_independent_data():
    spec = LinearSystemSpec(1, coeffs(0, 0, 1), coeffs(0.5), lambda t, s, y: np.sin(y)[:, None] * s,
                            lambda t, y: np.cos(y)[:, None])
    grid = build_tri_grid(1.0, 16, PI_BOX, 33)
    aug = solve_augmented(spec, grid)
    ref = march_linear(spec, grid).solution
    assert np.max(np.abs(aug.t_derivative.values)) < 1e-12
    assert np.max(np.abs(aug.solution.values - ref.values)) < 1e-10


def test_augmented_manufactured_derivative():
    mf = manufactured_linear()
    grid = build_tri_grid(1.0, 64, PI_BOX, 129)
    exact_t = lambda t, s, y: (s * np.sin(y))[:, None]
    v = solve_augmented(mf.spec, grid, exact_t=exact_t).t_derivative
    err = max(np.abs(v.values[i, k] - exact_t(0, grid.times[k], grid.axis(0))).max() for i, k in grid.pairs())
    assert err < 1e-2


def test_augmented_zero_data():
    aug = solve_augmented(_spec(), build_tri_grid(1.0, 4, PI_BOX, 9))
    assert np.all(aug.solution.values == 0) and np.all(aug.t_derivative.values == 0)


def test_stability_ratio_rejects_zero_perturbation():
    with pytest.raises(ZeroPerturbation):
        stability_ratio(_spec(), build_tri_grid(1.0, 4, PI_BOX, 9), zero_source(1), zero_datum(1))


def test_stability_ratio_at_data():
    f = lambda t, s, y: (np.sin(y) * (1 + t))[:, None]
    g = lambda t, y: np.cos(y)[:, None]
    spec = _spec(f, g)
    grid = build_tri_grid(1.0, 8, PI_BOX, 17)
    ratio = stability_ratio(spec, grid, f, g)
    u = march_linear(spec, grid).solution
    den = field_norm(sample_source(grid, 1, f), "alpha") + field_norm(sample_datum(grid, 1, g), "2+alpha")
    assert ratio == pytest.approx(field_norm(u, "2+alpha") / den, rel=1e-12)


def test_stability_ratio_uniform_in_grid():
    df = lambda t, s, y: (np.sin(2 * y) * (1 + s))[:, None]
    dg = lambda t, y: np.cos(y)[:, None]
    ratios = [stability_ratio(_spec(), build_tri_grid(1.0, N, PI_BOX, 2 * N + 1), df, dg) for N in (16, 32, 64)]
    assert max(ratios) / min(ratios) <= 2.0
