import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nonlocal_hjb import finance as F
from nonlocal_hjb.errors import InvalidParameter
from nonlocal_hjb.fbsde import McConfig
from nonlocal_hjb.games import (GameSpec, MinimaxOptions, assemble_equilibrium_H, exp_utility_game,
                                hamiltonian, lq_scalar_game, minimax_solve, solve_equilibrium,
                                verify_martingale)
from nonlocal_hjb.grid import BACKWARD, build_tri_grid
from nonlocal_hjb.nonlinear import Jet

QUAD = lambda a, t, Y: 0.5 * Y[:, 0] ** 2


def test_hamiltonian_lq_value():
    game = lq_scalar_game(A1=0.5, A2=0.2, B1=0.1, B2=1.0, C1=0.3, C2=2.0)
    # 1/2 q sigma^2 + p b + h with sigma^2 = 2 A1 + A2 alpha^2
    al, p, q = 0.7, 1.3, -0.4
    want = 0.5 * q * (1.0 + 0.2 * al**2) + p * (0.1 + al) + 0.3 + 0.5 * 2.0 * al**2
    assert hamiltonian(game, 0, 0.1, 0.2, 0.0, [al], [0.0], [[p]], [[q]]) == pytest.approx(want, rel=1e-14)


def test_hamiltonian_vanishes_without_data():
    game = lq_scalar_game(A1=0.0, B2=1.0, C2=1.0)
    assert hamiltonian(game, 0, 0.0, 0.5, 1.0, [0.0], [3.0], [[0.0]], [[5.0]]) == 0.0
    assert hamiltonian(game, 0, 0.0, 0.5, 1.0, [2.0], [0.0], [[1.0]], [[0.0]]) == pytest.approx(2.0 + 2.0)


@given(st.floats(-3, 3), st.floats(0.0, 2.0))
def test_lq_phi_matches_grid_search(p, q):
    game = lq_scalar_game(A1=0.5, A2=0.3, B2=1.0, C2=1.0)
    fast = minimax_solve(game, 0.1, 0.2, [0.0], [0.0], [[p]], [[q]])
    slow_game = dataclasses.replace(game, phi=None, control_box=((-20.0, 20.0),))
    slow = minimax_solve(slow_game, 0.1, 0.2, [0.0], [0.0], [[p]], [[q]])
    assert fast[0, 0] == pytest.approx(-p / (0.3 * q + 1.0), abs=1e-12)
    assert slow[0, 0] == pytest.approx(fast[0, 0], abs=1e-6)


def test_lq_zero_gradient_gives_zero_control():
    game = lq_scalar_game()
    assert minimax_solve(game, 0.0, 0.0, [0.4], [1.0], [[0.0]], [[2.0]])[0, 0] == 0.0


def _two_player(box=((-5.0, 5.0), (-5.0, 5.0))):
    # b = alpha1 + alpha2, h^a = alpha_a^2 / 2: best response alpha_a = -p_a
    b = lambda s, Y, al: (al[:, 0] + al[:, 1])[:, None]
    sigma = lambda s, Y, al: np.ones((Y.shape[0], 1, 1))
    h = lambda a, t, s, Y, al, u, z: 0.5 * al[:, a] ** 2
    g = lambda a, t, Y: np.zeros(Y.shape[0])
    return GameSpec(2, 1, 1, (1, 1), b, sigma, h, g, control_box=box, name="separable")


def test_two_player_minimax_separable():
    game = _two_player()
    p = np.array([[[0.8], [-1.7]], [[0.0], [2.5]]])
    al = minimax_solve(game, 0.0, 0.0, [0.0, 1.0], np.zeros((2, 2)), p, np.zeros((2, 2, 1, 1)))
    np.testing.assert_allclose(al, -p[..., 0], atol=1e-6)


def test_two_player_minimax_respects_box():
    game = _two_player(box=((-1.0, 1.0), (-5.0, 5.0)))
    al = minimax_solve(game, 0.0, 0.0, [0.0], np.zeros(2), [[[3.0], [0.5]]], np.zeros((2, 1, 1)))
    np.testing.assert_allclose(al, [[-1.0, -0.5]], atol=1e-6)


def test_game_spec_validation():
    with pytest.raises(InvalidParameter):
        dataclasses.replace(_two_player(), p=(1,))
    with pytest.raises(InvalidParameter):
        dataclasses.replace(_two_player(), sense="sideways")
    with pytest.raises(InvalidParameter):
        dataclasses.replace(_two_player(), control_box=((1.0, -1.0), (0.0, 1.0)))


def test_control_free_volatility_has_no_hessian_coupling():
    # sigma does not depend on alpha, so the diagonal Hessian cannot move H
    game = lq_scalar_game(A1=0.5, A2=0.0, B2=1.0, C2=1.0)
    H = assemble_equilibrium_H(game)
    y = np.linspace(-1, 1, 5)
    loc = Jet(np.zeros((5, 1)), np.full((5, 1, 1), 0.3), np.full((5, 1, 1, 1), 1.0))
    d1 = Jet(np.zeros((5, 1)), np.full((5, 1, 1), 0.6), np.full((5, 1, 1, 1), 1.0))
    d2 = Jet(np.zeros((5, 1)), np.full((5, 1, 1), 0.6), np.full((5, 1, 1, 1), 7.0))
    np.testing.assert_array_equal(H.F(0.1, 0.2, y, loc, d1), H.F(0.1, 0.2, y, loc, d2))


def test_time_consistent_costs_give_t_independent_H():
    game = lq_scalar_game(A1=0.5, B2=1.0, C1=lambda t, s, Y: Y[:, 0] ** 2 * s, C2=1.0)
    H = assemble_equilibrium_H(game)
    y = np.linspace(-1, 1, 5)
    j = Jet(np.ones((5, 1)), np.full((5, 1, 1), 0.4), np.full((5, 1, 1, 1), 0.9))
    np.testing.assert_array_equal(H.F(0.0, 0.6, y, j, j), H.F(0.5, 0.6, y, j, j))


def test_zero_cost_game_stays_zero():
    game = lq_scalar_game(A1=0.5, B2=1.0, C2=1.0)
    out = solve_equilibrium(game, build_tri_grid(0.25, 8, (-2, 2), 21, orientation=BACKWARD))
    assert np.all(out.u.values[out.grid.mask()] == 0.0)
    assert np.all(out.strategy == 0.0)


def test_solver_requires_backward_grid():
    with pytest.raises(InvalidParameter):
        solve_equilibrium(lq_scalar_game(), build_tri_grid(0.25, 4, (-2, 2), 11))


@pytest.fixture(scope="module")
def riccati():
    # sigma^2 = 1, b = alpha, h = alpha^2 / 2, g = y^2 / 2: u = P(s) y^2 / 2 + c(s)
    # with P = 1 / (1 + T - s) and c = log(1 + T - s) / 2
    game = lq_scalar_game(A1=0.5, B2=1.0, C2=1.0, g=QUAD)
    grid = build_tri_grid(0.25, 32, (-3, 3), 61, orientation=BACKWARD)
    return grid, solve_equilibrium(game, grid)


def test_lq_matches_riccati(riccati):
    grid, out = riccati
    s, y = grid.times, grid.axis(0)
    P = 1.0 / (1.0 + grid.T - s)
    V = 0.5 * P[:, None] * y[None, :] ** 2 + 0.5 * np.log(1.0 + grid.T - s)[:, None]
    inner = np.abs(y) <= 1.5
    assert np.max(np.abs(out.value[:, inner, 0] - V[:, inner])) < 2e-3
    assert np.max(np.abs(out.strategy[:, inner, 0] + P[:, None] * y[None, inner])) < 2e-2


def test_lq_time_consistent_rows_agree(riccati):
    grid, out = riccati
    U = out.u.values
    assert np.max(np.abs(U[0, -1] - U[10, -1])) < 1e-12
    assert np.max(np.abs(U[0, 20] - U[20, 20])) < 1e-6


def test_strategy_minimises_local_hamiltonian(riccati):
    grid, out = riccati
    game = out.game
    k, y = 12, grid.axis(0)
    V = out.value[k, :, 0]
    p = np.gradient(V, grid.h[0], edge_order=2)
    q = np.gradient(p, grid.h[0], edge_order=2)
    for j in (20, 30, 40):
        al = out.strategy[k, j, 0]
        args = (0, grid.times[k], grid.times[k], y[j])
        h0 = hamiltonian(game, *args[:3], [y[j]], [al], [V[j]], [[p[j]]], [[q[j]]])
        for d in (-0.05, 0.05):
            assert hamiltonian(game, *args[:3], [y[j]], [al + d], [V[j]], [[p[j]]], [[q[j]]]) > h0


@pytest.fixture(scope="module")
def exp_game():
    spec = F.ExpUtilitySpec(1, [0.08], [0.2], 0.02, 1.0, 1.0, F.const_matrix([[0.1]]), F.const_vector([1.0]))
    grid = build_tri_grid(1.0, 16, (-6.5, 6.5), 81, orientation=BACKWARD)
    return spec, grid, solve_equilibrium(exp_utility_game(spec), grid, exact=F.exp_node_solution(spec, grid.times))


def test_exp_game_matches_closed_form(exp_game):
    spec, grid, out = exp_game
    y = grid.axis(0)
    inner = np.abs(y) <= 3.25
    tab = F.exp_solution_table(spec, grid.times, y)
    diag = tab[np.arange(17), np.arange(17)]
    assert np.max(np.abs(out.value - diag)[:, inner] / np.abs(diag)[:, inner]) < 1e-2
    ab = 1.5 * np.exp(-0.02 * (1.0 - grid.times))
    assert np.max(np.abs(out.strategy[:, inner, 0] - ab[:, None])) < 1e-5


def test_martingale_holds_at_equilibrium(exp_game):
    _, _, out = exp_game
    st_ = verify_martingale(out, McConfig(4000, 50, 3))
    assert abs(st_.mean[0]) < 3 * st_.std_error[0]
    assert st_.censored == 0


def test_martingale_fails_off_equilibrium(exp_game):
    _, _, out = exp_game
    st_ = verify_martingale(out, McConfig(4000, 50, 3), strategy_shift=3.0)
    assert abs(st_.mean[0]) > 3 * st_.std_error[0]


def test_zero_cost_martingale_is_exact():
    game = lq_scalar_game(A1=0.5, B2=1.0, C2=1.0)
    out = solve_equilibrium(game, build_tri_grid(0.25, 8, (-2, 2), 21, orientation=BACKWARD))
    st_ = verify_martingale(out, McConfig(500, 20, 1))
    assert st_.mean[0] == 0.0


def test_martingale_needs_time_node(exp_game):
    _, _, out = exp_game
    with pytest.raises(InvalidParameter):
        verify_martingale(out, McConfig(200, 10, 0), t=0.03)


def test_csv_rows(exp_game, tmp_path):
    _, grid, out = exp_game
    out.write_csvs(tmp_path / "a.csv", tmp_path / "v.csv")
    head = (tmp_path / "a.csv").read_text().splitlines()
    assert head[0] == "s,y,alpha1" and len(head) == 1 + 17 * 81
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "s,y,V1"
