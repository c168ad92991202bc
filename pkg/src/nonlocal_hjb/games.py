"""Equilibrium HJB systems of time-inconsistent stochastic differential games.

Game data are vectorised over a leading node axis of length M:

* ``b(s, y, alpha)``: y (M, d), alpha (M, P) -> (M, d)
* ``sigma(s, y, alpha)`` -> (M, d, k)
* ``h(a, t, s, y, alpha, u, z)``: u (M, m), z (M, m, k) -> (M,)
* ``g(a, t, y)`` -> (M,)
* ``phi(t, s, y, u, p, q)``: p (M, m, d), q (M, m, d, d) -> (M, P)

``P`` is the total control dimension; player a owns a contiguous block.
Player a's Hamiltonian is

    1/2 tr[q_a sigma sigma^T] + p_a . b + h^a(t, s, y, alpha, u, p sigma).

The backward equilibrium system reads u_s + H = 0, u(t, T, y) = g(t, y),
where H^a evaluates player a's Hamiltonian at the local jet and at the
controls selected by the diagonal jet.  The solver works on the time
reflected forward problem and reflects back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidParameter, NoNashConvergence
from .grid import BACKWARD, FlowField, TriTimeGrid, derivatives_1d, time_reflect
from .nonlinear import (Jet, NonlinearitySpec, SliceSolverOptions, causal_march_nonlinear,
                        check_appropriate, jet_of, reflect_datum, reflect_nonlinearity)

_GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


@dataclass(frozen=True)
class GameSpec:
    m: int
    d: int
    k: int
    p: tuple
    b: Callable
    sigma: Callable
    h: Callable
    g: Callable
    control_box: tuple = ()
    phi: Optional[Callable] = None
    sense: str = "min"
    name: str = ""

    def __post_init__(self):
        p = tuple(int(x) for x in self.p)
        if len(p) != self.m or any(x < 1 for x in p):
            raise InvalidParameter("p must list a positive control dimension per player")
        object.__setattr__(self, "p", p)
        if self.sense not in ("min", "max"):
            raise InvalidParameter("sense must be 'min' or 'max'")
        box = self.control_box
        if not box:
            box = tuple((np.full(n, -np.inf), np.full(n, np.inf)) for n in p)
        if len(box) != self.m:
            raise InvalidParameter("control_box needs one (lo, hi) pair per player")
        clean = []
        for n, (lo, hi) in zip(p, box):
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
            if np.any(lo > hi):
                raise InvalidParameter("control_box is empty")
            clean.append((lo, hi))
        object.__setattr__(self, "control_box", tuple(clean))

    @property
    def n_controls(self) -> int:
        return sum(self.p)

    def block(self, a: int) -> slice:
        off = sum(self.p[:a])
        return slice(off, off + self.p[a])

    @property
    def box_bounds(self):
        lo = np.concatenate([b[0] for b in self.control_box])
        hi = np.concatenate([b[1] for b in self.control_box])
        return lo, hi

    def terminal(self, t, y):
        """g(t, y) for all players as (M, m); y is (M,) or (M, d)."""
        Y = _as_nodes(y, self.d)
        return np.stack([np.asarray(self.g(a, t, Y), dtype=float).reshape(-1) for a in range(self.m)], axis=-1)


def _as_nodes(y, d):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        return y.reshape(1, d)
    if y.ndim == 1:
        return y.reshape(-1, d) if d > 1 else y[:, None]
    return y


def _ham_nodes(game: GameSpec, a, t, s, Y, alpha, u, p, qa):
    sig = np.asarray(game.sigma(s, Y, alpha), dtype=float)
    drift = np.asarray(game.b(s, Y, alpha), dtype=float)
    diff = 0.5 * np.einsum("jde,jdk,jek->j", qa, sig, sig)
    z = np.einsum("jbd,jdk->jbk", p, sig)
    return diff + np.einsum("jd,jd->j", p[:, a], drift) + np.asarray(game.h(a, t, s, Y, alpha, u, z), dtype=float)


def hamiltonian(game: GameSpec, a, t, s, y, alpha, u, p, q_a):
    """Player a's Hamiltonian at one point.  p is (m, d), q_a is (d, d)."""
    Y = np.asarray(y, dtype=float).reshape(1, game.d)
    al = np.asarray(alpha, dtype=float).reshape(1, game.n_controls)
    uu = np.asarray(u, dtype=float).reshape(1, game.m)
    pp = np.asarray(p, dtype=float).reshape(1, game.m, game.d)
    qq = np.asarray(q_a, dtype=float).reshape(1, game.d, game.d)
    return float(_ham_nodes(game, a, t, s, Y, al, uu, pp, qq)[0])


@dataclass
class MinimaxOptions:
    n_grid: int = 32
    tol: float = 1e-8
    max_cycles: int = 50
    golden_iter: int = 48
    search_width: float = 10.0     # half-width used when a box side is unbounded


def _objective(game, a, t, s, Y, alpha, u, p, q):
    val = _ham_nodes(game, a, t, s, Y, alpha, u, p, q[:, a])
    return val if game.sense == "min" else -val


def _coordinate_search(game, a, c, t, s, Y, alpha, u, p, q, lo, hi, opts):
    """Minimise player a's objective in control coordinate c, nodewise."""
    M = Y.shape[0]
    cur = alpha[:, c].copy()
    lo_c = np.where(np.isfinite(lo[c]), lo[c], cur - opts.search_width)
    hi_c = np.where(np.isfinite(hi[c]), hi[c], cur + opts.search_width)
    lo_c, hi_c = np.broadcast_to(lo_c, (M,)), np.broadcast_to(hi_c, (M,))

    def f(vals):
        al = alpha.copy()
        al[:, c] = vals
        return _objective(game, a, t, s, Y, al, u, p, q)

    n = opts.n_grid
    grid_pts = lo_c[:, None] + (hi_c - lo_c)[:, None] * np.linspace(0, 1, n)[None, :]
    vals = np.stack([f(grid_pts[:, j]) for j in range(n)], axis=1)
    vals = np.where(np.isfinite(vals), vals, np.inf)
    best = np.argmin(vals, axis=1)
    rows = np.arange(M)
    A = grid_pts[rows, np.maximum(best - 1, 0)]
    B = grid_pts[rows, np.minimum(best + 1, n - 1)]
    x1 = B - _GOLDEN * (B - A)
    x2 = A + _GOLDEN * (B - A)
    f1, f2 = f(x1), f(x2)
    for _ in range(opts.golden_iter):
        left = f1 < f2
        B = np.where(left, x2, B)
        A = np.where(left, A, x1)
        nx1 = B - _GOLDEN * (B - A)
        nx2 = A + _GOLDEN * (B - A)
        x1, x2 = nx1, nx2
        f1, f2 = f(x1), f(x2)
    x = 0.5 * (A + B)
    # two Newton polishes with central differences; kept only where they help
    for _ in range(2):
        dlt = 1e-4 * (1.0 + np.abs(x))
        fp, f0, fm = f(x + dlt), f(x), f(x - dlt)
        curv = fp - 2 * f0 + fm
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(curv > 0, -dlt * (fp - fm) / (2 * curv), 0.0)
        step = np.clip(step, -10 * dlt, 10 * dlt)
        cand = np.clip(x + step, lo_c, hi_c)
        x = np.where(f(cand) <= f0, cand, x)
    return np.clip(x, lo_c, hi_c)


def minimax_solve(game: GameSpec, t, s, y, u, p, q, opts: MinimaxOptions | None = None):
    """Simultaneous Hamiltonian minimisers (maximisers for sense='max').

    Uses ``game.phi`` when supplied, otherwise cycles best responses over a
    control grid with golden-section refinement per coordinate.  Inputs
    carry a leading node axis; single points are promoted.
    """
    Y = _as_nodes(y, game.d)
    M = Y.shape[0]
    uu = np.asarray(u, dtype=float).reshape(M, game.m)
    pp = np.asarray(p, dtype=float).reshape(M, game.m, game.d)
    qq = np.asarray(q, dtype=float).reshape(M, game.m, game.d, game.d)
    if game.phi is not None:
        return np.asarray(game.phi(t, s, Y, uu, pp, qq), dtype=float).reshape(M, game.n_controls)
    opts = opts or MinimaxOptions()
    lo, hi = game.box_bounds
    alpha = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                     np.clip(0.0, lo, hi))[None, :].repeat(M, axis=0)
    change = np.inf
    for _ in range(opts.max_cycles):
        prev = alpha.copy()
        for a in range(game.m):
            for c in range(game.block(a).start, game.block(a).stop):
                alpha[:, c] = _coordinate_search(game, a, c, t, s, Y, alpha, uu, pp, qq, lo, hi, opts)
        change = float(np.max(np.abs(alpha - prev)))
        if change < opts.tol:
            return alpha
    raise NoNashConvergence(f"best-response cycle did not settle (last change {change:.3e})", alpha, change)


def assemble_equilibrium_H(game: GameSpec, minimax: MinimaxOptions | None = None) -> NonlinearitySpec:
    """Backward nonlinearity H(t, s, y, local jet, diagonal jet), d = 1.

    The diagonal jet fixes the controls; the local jet enters player a's
    Hamiltonian.  Jet derivatives are left to central differences.
    """
    if game.d != 1:
        raise InvalidParameter("equilibrium assembly supports d = 1")
    m = game.m

    def F(t, s, y, loc: Jet, diag: Jet):
        Y = _as_nodes(y, 1)
        alpha = minimax_solve(game, s, s, Y, diag.value, diag.grad, diag.hess, minimax)
        return np.stack([_ham_nodes(game, a, t, s, Y, alpha, loc.value, loc.grad, loc.hess[:, a])
                         for a in range(m)], axis=-1)

    return NonlinearitySpec(m, F, name=f"equilibrium-H[{game.name}]")


@dataclass(frozen=True)
class EquilibriumOutput:
    u: FlowField                 # backward orientation
    strategy: np.ndarray         # (N+1, M, P) at diagonal nodes
    value: np.ndarray            # (N+1, M, m), view of the diagonal of u
    hjb_residual_max: float
    game: GameSpec = field(repr=False)
    advisory: object = field(repr=False, default=None)

    @property
    def grid(self) -> TriTimeGrid:
        return self.u.grid

    def strategy_rows(self):
        g = self.grid
        S, Yv = np.meshgrid(g.times, g.axis(0), indexing="ij")
        return np.column_stack([S.ravel(), Yv.ravel(), self.strategy.reshape(-1, self.strategy.shape[-1])])

    def value_rows(self):
        g = self.grid
        S, Yv = np.meshgrid(g.times, g.axis(0), indexing="ij")
        return np.column_stack([S.ravel(), Yv.ravel(), self.value.reshape(-1, self.value.shape[-1])])

    def write_csvs(self, strategy_path, value_path):
        P, m = self.strategy.shape[-1], self.value.shape[-1]
        np.savetxt(strategy_path, self.strategy_rows(), delimiter=",", fmt="%.17g", comments="",
                   header=",".join(["s", "y"] + [f"alpha{j + 1}" for j in range(P)]))
        np.savetxt(value_path, self.value_rows(), delimiter=",", fmt="%.17g", comments="",
                   header=",".join(["s", "y"] + [f"V{a + 1}" for a in range(m)]))


def diagonal_strategy(game: GameSpec, u: FlowField, order: int = 6, minimax=None) -> np.ndarray:
    """Controls at every diagonal node from high-order jets of u(s, s, .)."""
    grid = u.grid
    y, h = grid.axis(0), grid.h[0]
    out = np.empty((grid.N + 1, grid.M, game.n_controls))
    lo, hi = game.box_bounds
    for k, s in enumerate(grid.times):
        V = u.values[k, k]
        d1, d2 = derivatives_1d(V, h, 0, "one-sided", order)
        grad, hess = d1[..., None], d2[..., None, None]
        al = minimax_solve(game, s, s, y[:, None], V, grad, hess, minimax)
        out[k] = np.clip(al, lo, hi)
    return out


def hjb_residual(H: NonlinearitySpec, u: FlowField, trim: int = 1) -> np.ndarray:
    """Diagonal residual V_s - u_t(s, s) + H(s, s, y, Du(s,s), Du(s,s)).

    V_s is a second-order difference along the diagonal, u_t a one-sided
    difference in t from below, and jets use the solver stencil.
    Returns (N+1, M - 2 trim, m) with NaN where no t-difference exists.
    """
    grid = u.grid
    times, dt, y, h = grid.times, grid.dt, grid.axis(0), grid.h[0]
    U = u.values
    n = grid.N + 1
    V = np.stack([U[k, k] for k in range(n)])
    Vs = np.gradient(V, dt, axis=0, edge_order=2)
    res = np.full(V.shape, np.nan)
    for k in range(1, n):
        if k >= 2:
            ut = (3 * U[k, k] - 4 * U[k - 1, k] + U[k - 2, k]) / (2 * dt)
        else:
            ut = (U[k, k] - U[k - 1, k]) / dt
        j = jet_of(U[k, k], h)
        res[k] = Vs[k] - ut + np.asarray(H.F(times[k], times[k], y, j, j), dtype=float)
    return res[:, trim:grid.M - trim] if trim else res


def solve_equilibrium(game: GameSpec, grid: TriTimeGrid, exact: Optional[Callable] = None,
                      opts: SliceSolverOptions | None = None, nonlinearity: NonlinearitySpec | None = None,
                      minimax: MinimaxOptions | None = None, advisory: bool = False,
                      strategy_order: int = 6, residual_trim: float = 0.25) -> EquilibriumOutput:
    """Solve the backward equilibrium system on a backward grid.

    ``exact(t, s, y) -> (M, m)`` switches the box edges to Dirichlet data.
    ``nonlinearity`` overrides the assembled H (same backward convention).
    The HJB residual is taken over the box with a fraction
    ``residual_trim`` of the nodes cut from each end.
    """
    if grid.orientation != BACKWARD:
        raise InvalidParameter("solve_equilibrium expects a backward grid")
    H = nonlinearity or assemble_equilibrium_H(game, minimax)
    T = grid.T
    Ff = reflect_nonlinearity(H, T)
    gf = reflect_datum(lambda t, y: game.terminal(t, y), T)
    ex_f = None if exact is None else (lambda t, s, y: exact(T - t, T - s, y))
    fgrid = grid.reflected()
    rep = None
    if advisory:
        rep = check_appropriate(Ff, gf, fgrid, lam=0.0, max_pairs=16)
    fwd = causal_march_nonlinear(Ff, gf, fgrid, ex_f, opts)
    u = time_reflect(fwd)
    strategy = diagonal_strategy(game, u, strategy_order, minimax)
    value = u.diagonal_values()
    res = hjb_residual(H, u, trim=max(1, int(residual_trim * grid.M)))
    rmax = float(np.nanmax(np.abs(res))) if np.any(np.isfinite(res)) else 0.0
    return EquilibriumOutput(u, strategy, value, rmax, game, rep)


# ------------------------------------------------------------------ presets

def _ev(c):
    return c if callable(c) else (lambda *args: float(c))


def lq_scalar_game(A1=1.0, A2=0.0, B1=0.0, B2=1.0, C1=0.0, C2=1.0, g=None) -> GameSpec:
    """Scalar game with quadratic running cost and control-affine drift.

    h = C1(t,s,y) + C2(t,s,y) alpha^2 / 2,  b = B1(s,y) + B2(s,y) alpha,
    sigma^2 / 2 = A1(s,y) + A2(s,y) alpha^2 / 2.  Coefficients are numbers or
    callables vectorised over y of shape (M, 1).
    """
    A1, A2, B1, B2, C1, C2 = map(_ev, (A1, A2, B1, B2, C1, C2))
    g = g or (lambda a, t, y: np.zeros(len(y)))
    col = lambda v, Y: np.broadcast_to(np.asarray(v, dtype=float), (Y.shape[0],))

    def b(s, Y, al):
        return (col(B1(s, Y), Y) + col(B2(s, Y), Y) * al[:, 0])[:, None]

    def sigma(s, Y, al):
        return np.sqrt(np.maximum(2 * col(A1(s, Y), Y) + col(A2(s, Y), Y) * al[:, 0] ** 2, 0.0))[:, None, None]

    def h(a, t, s, Y, al, u, z):
        return col(C1(t, s, Y), Y) + 0.5 * col(C2(t, s, Y), Y) * al[:, 0] ** 2

    def phi(t, s, Y, u, p, q):
        den = col(A2(s, Y), Y) * q[:, 0, 0, 0] + col(C2(t, s, Y), Y)
        return (-col(B2(s, Y), Y) * p[:, 0, 0] / den)[:, None]

    return GameSpec(1, 1, 1, (1,), b, sigma, h, g, phi=phi, name="lq-scalar")


def exp_utility_game(spec) -> GameSpec:
    """The exponential-utility investment game in discounted wealth.

    Player a invests alpha^a in stock a; running terms -sum_b w3^{ab} u^b;
    terminal utility -T^a(t) exp(-eta y); each player maximises.  Only the
    gamma = 0 embedding is represented.
    """
    from .finance import _batch

    m, ex, sg, r, T = spec.m, spec.mu - spec.r, spec.sigma, spec.r, spec.T

    def b(s, Y, al):
        return (np.exp(r * (T - s)) * al @ ex)[:, None]

    def sigma(s, Y, al):
        return (np.exp(r * (T - s)) * al * sg)[:, None, :]

    def h(a, t, s, Y, al, u, z):
        return -(u @ _batch(spec.R, (m, m), t, s)[a])

    def g(a, t, Y):
        return -_batch(spec.Tvec, (m,), t)[a] * np.exp(-spec.eta * Y[:, 0])

    def phi(t, s, Y, u, p, q):
        return -(ex / sg**2)[None, :] * np.exp(-r * (T - s)) * p[:, :, 0] / q[:, :, 0, 0]

    return GameSpec(m, 1, m, (1,) * m, b, sigma, h, g, phi=phi, sense="max", name="exp-utility")


# ------------------------------------------------------------ verification

@dataclass(frozen=True)
class MartingaleStats:
    mean: np.ndarray          # per player
    std_error: np.ndarray
    n: int
    censored: int


def verify_martingale(out: EquilibriumOutput, cfg, t: float = 0.0, y0: float = 0.0,
                      strategy_shift: float = 0.0) -> MartingaleStats:
    """Drift of u^a(t, s, X(s)) + int_t^s h^a along equilibrium paths.

    Paths start at X(t) = y0 and follow the stored diagonal strategy
    (plus ``strategy_shift``), interpolated linearly in (s, y).
    """
    from .fbsde import RowInterpolator, censor_mask, simulate_paths

    game, grid = out.game, out.grid
    if game.d != 1:
        raise InvalidParameter("martingale check supports d = 1")
    i = int(round(t / grid.dt))
    if abs(grid.times[i] - t) > 1e-12:
        raise InvalidParameter("t must be a time node")
    yax = grid.axis(0)
    times = grid.times
    strat = out.strategy

    def control(s, X):
        kf = np.clip((s - times[0]) / grid.dt, 0, grid.N)
        k0 = min(int(np.floor(kf)), grid.N - 1)
        w = kf - k0
        cols = [np.interp(X[:, 0], yax, (1 - w) * strat[k0, :, c] + w * strat[k0 + 1, :, c])
                for c in range(strat.shape[-1])]
        return np.stack(cols, axis=-1) + strategy_shift

    bfun = lambda s, X: np.asarray(game.b(s, X, control(s, X)), float)
    sfun = lambda s, X: np.asarray(game.sigma(s, X, control(s, X)), float)
    paths = simulate_paths(bfun, sfun, y0, t, grid.T, cfg, k=game.k)
    row = RowInterpolator(out.u.values[i], times, yax, grid.h[0], s_min=t)
    X = paths.X[..., 0]
    ok = censor_mask(X, yax[0], yax[-1])
    taus = paths.times
    acc = np.zeros((X.shape[0], game.m))
    for n in range(len(taus) - 1):
        s = taus[n]
        Xn = X[:, n:n + 1]
        jet = row(s, Xn[:, 0])
        al = control(s, Xn)
        sig = np.asarray(game.sigma(s, Xn, al), float)
        z = np.einsum("jb,jk->jbk", jet.grad, sig[:, 0, :])
        hv = np.stack([np.asarray(game.h(a, t, s, Xn, al, jet.value, z), float) for a in range(game.m)], -1)
        acc += hv * (taus[n + 1] - s)
    start = row(taus[0], X[:, 0]).value
    end = row(taus[-1], X[:, -1]).value
    D = (end - start + acc)[ok]
    n_ok = D.shape[0]
    mean = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / np.sqrt(n_ok) if n_ok > 1 else np.full(game.m, np.inf)
    return MartingaleStats(mean, se, n_ok, int((~ok).sum()))
