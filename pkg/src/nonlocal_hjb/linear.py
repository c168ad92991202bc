"""Nonlocal linear second-order systems on a triangular time grid (d = 1).

Forward problems read

    u_s(t,s,y) = A(t,s,y) . D u(t,s,y) + B(t,s,y) . D u(s,s,y) + f(t,s,y),
    u(t,0,y) = g(t,y),

where ``D u = (u, u_y, u_yy)``.  Backward problems carry the same data on
t <= s with the terminal condition u(t,T,y) = g(t,y) and
``u_s + A.Du + B.Du(s,s) + f = 0``; they are marched from s = T downward
with identical arithmetic.

Coefficient evaluators take scalar (t, s) and the node array y of shape
(M,) and return a triple ``(c0, c1, c2)`` of arrays broadcastable to
(M, m, m), entry [j, a, b] being the coefficient of the derivative of u^b
in equation a.  ``f`` returns (M, m) and ``g(t, y)`` returns (M, m).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import _banded as bd
from .errors import InvalidParameter, NanDetected, ZeroPerturbation
from .grid import FORWARD, FlowField, TriTimeGrid
from .holder import _t_derivative, field_norm


def coeffs(c0=0.0, c1=0.0, c2=0.0):
    """Evaluator returning constant coefficients."""
    c0, c1, c2 = (np.asarray(c, dtype=float) for c in (c0, c1, c2))

    def ev(t, s, y):
        return c0, c1, c2

    return ev


def zero_source(m):
    return lambda t, s, y: np.zeros((np.shape(y)[0], m))


def zero_datum(m):
    return lambda t, y: np.zeros((np.shape(y)[0], m))


@dataclass(frozen=True)
class LinearSystemSpec:
    m: int
    A: Callable
    B: Callable
    f: Callable
    g: Callable
    d: int = 1
    lam: float = 0.0
    f_t: Optional[Callable] = None
    g_t: Optional[Callable] = None
    A_t: Optional[Callable] = None
    B_t: Optional[Callable] = None
    exact: Optional[Callable] = None       # Dirichlet data u(t,s,y) when available
    exact_t: Optional[Callable] = None


@dataclass(frozen=True)
class LinearSolveReport:
    solution: FlowField
    t_derivative: FlowField
    residual_max: float
    steps: int
    fd_flags: tuple = ()
    info: dict = field(default_factory=dict)

    def diagnostics(self) -> dict:
        out = {"residual_max": self.residual_max, "steps": self.steps}
        out.update({f"fd_{k}": 1 for k in self.fd_flags})
        out.update(self.info)
        return out


@dataclass(frozen=True)
class EllipticityReport:
    passed: bool
    margin: float
    margin_A: float
    margin_AB: float
    worst: dict
    probes: dict = field(repr=False, default_factory=dict)


def _sample(ev, t, s, y, m):
    c = ev(t, s, y)
    M = y.shape[0]
    return np.stack([np.broadcast_to(np.asarray(ci, dtype=float), (M, m, m)) for ci in c])


def _sample_vec(ev, *args, M, m):
    return np.broadcast_to(np.asarray(ev(*args), dtype=float), (M, m))


def _require_1d(spec, grid):
    if grid.d != 1 or spec.d != 1:
        raise InvalidParameter("the linear marching solver handles d = 1 only")


def reflect_linear_spec(spec: LinearSystemSpec, T: float) -> LinearSystemSpec:
    """Data of v(t,s,y) = u(T-t, T-s, y), which flips the orientation."""
    def r3(ev):
        return None if ev is None else (lambda t, s, y: ev(T - t, T - s, y))

    def r3neg(ev):
        if ev is None:
            return None
        return lambda t, s, y: tuple(-np.asarray(c) for c in ev(T - t, T - s, y))

    def r3negv(ev):
        return None if ev is None else (lambda t, s, y: -np.asarray(ev(T - t, T - s, y)))

    def r2(ev):
        return None if ev is None else (lambda t, y: ev(T - t, y))

    def r2neg(ev):
        return None if ev is None else (lambda t, y: -np.asarray(ev(T - t, y)))

    return replace(
        spec, A=r3(spec.A), B=r3(spec.B), f=r3(spec.f), g=r2(spec.g),
        f_t=r3negv(spec.f_t), g_t=r2neg(spec.g_t), A_t=r3neg(spec.A_t), B_t=r3neg(spec.B_t),
        exact=r3(spec.exact), exact_t=r3negv(spec.exact_t),
    )


class _Stepper:
    """Index bookkeeping shared by forward and backward marches."""

    def __init__(self, grid: TriTimeGrid):
        self.grid = grid
        self.N = grid.N
        self.fwd = grid.orientation == FORWARD
        self.k0 = 0 if self.fwd else grid.N

    def steps(self):
        return range(1, self.N + 1) if self.fwd else range(self.N - 1, -1, -1)

    def old(self, k):
        return k - 1 if self.fwd else k + 1

    def active(self, k):
        return np.arange(k, self.N + 1) if self.fwd else np.arange(0, k + 1)

    def diag_pos(self, k):
        return 0 if self.fwd else k


def _boundary(spec, exact):
    ex = exact if exact is not None else spec.exact
    return (bd.DIRICHLET if ex is not None else bd.NEUMANN), ex


def _set_dirichlet(rhs, ex, times_t, s, y):
    ends = y[[0, -1]]
    for p, t in enumerate(times_t):
        val = np.asarray(ex(t, s, ends), dtype=float).reshape(2, -1)
        rhs[p, 0] = val[0]
        rhs[p, -1] = val[1]


def _check_finite(x, active, k, what):
    if not np.all(np.isfinite(x)):
        bad = np.nonzero(~np.all(np.isfinite(x.reshape(x.shape[0], -1)), axis=1))[0][0]
        raise NanDetected(f"non-finite {what} at (t,s) index ({int(active[bad])}, {k})",
                          int(active[bad]), k)


def march_linear(spec: LinearSystemSpec, grid: TriTimeGrid, theta: float = 1.0,
                 diagonal: str = "implicit", exact: Optional[Callable] = None) -> LinearSolveReport:
    """theta-scheme march in s with banded solves per t-slice.

    ``diagonal="implicit"`` solves the slice t = s first with A + B acting
    on itself, then the other slices with the fresh diagonal.  ``"lagged"``
    uses the diagonal of the previous s-level instead, which is first
    order in the step.
    """
    _require_1d(spec, grid)
    if not 0.0 <= theta <= 1.0:
        raise InvalidParameter("theta must lie in [0, 1]")
    if diagonal not in ("implicit", "lagged"):
        raise InvalidParameter(f"unknown diagonal treatment {diagonal!r}")
    boundary, ex = _boundary(spec, exact)
    N, M, m = grid.N, grid.M, spec.m
    y = grid.axis(0)
    h = grid.h[0]
    dt = grid.dt
    times = grid.times
    st = _Stepper(grid)
    U = np.zeros((N + 1, N + 1, M, m))
    for i in range(N + 1):
        U[i, st.k0] = _sample_vec(spec.g, times[i], y, M=M, m=m)
    res_max = 0.0

    def level(tt, s):
        A = np.stack([_sample(spec.A, t, s, y, m) for t in tt])
        B = np.stack([_sample(spec.B, t, s, y, m) for t in tt])
        f = np.stack([_sample_vec(spec.f, t, s, y, M=M, m=m) for t in tt])
        WA = bd.stencil_weights(A[:, 0], A[:, 1], A[:, 2], h, boundary)
        WB = bd.stencil_weights(B[:, 0], B[:, 1], B[:, 2], h, boundary)
        return WA, WB, f

    for k in st.steps():
        ko = st.old(k)
        act = st.active(k)
        tt = times[act]
        s_new, s_old = times[k], times[ko]
        WA, WB, f_new = level(tt, s_new)
        Uold = U[act, ko]
        Dold = U[ko, ko]
        base = Uold + dt * theta * f_new
        if theta < 1.0:
            WAo, WBo, f_old = level(tt, s_old)
            base = base + dt * (1 - theta) * (
                bd.apply(WAo, Uold) + bd.apply(WBo, np.broadcast_to(Dold, Uold.shape)) + f_old)
        pd = st.diag_pos(k)
        if diagonal == "implicit":
            Sd = bd.system_weights(WA[pd:pd + 1] + WB[pd:pd + 1], dt * theta, boundary)
            rd = base[pd:pd + 1].copy()
            if ex is not None:
                _set_dirichlet(rd, ex, tt[pd:pd + 1], s_new, y)
            _check_finite(rd, act[pd:pd + 1], k, "right-hand side")
            xd = bd.solve(Sd, rd, where=(int(act[pd]), k))
            _check_finite(xd, act[pd:pd + 1], k, "solution")
            res_max = max(res_max, bd.residual(Sd, xd, rd))
            Dnew = xd[0]
            U[k, k] = Dnew
            others = np.array([p for p in range(len(act)) if p != pd], dtype=int)
            if others.size:
                S = bd.system_weights(WA[others], dt * theta, boundary)
                rhs = base[others] + dt * theta * bd.apply(
                    WB[others], np.broadcast_to(Dnew, (others.size, M, m)))
                if ex is not None:
                    _set_dirichlet(rhs, ex, tt[others], s_new, y)
                _check_finite(rhs, act[others], k, "right-hand side")
                x = bd.solve(S, rhs, where=(None, k))
                _check_finite(x, act[others], k, "solution")
                res_max = max(res_max, bd.residual(S, x, rhs))
                U[act[others], k] = x
        else:
            S = bd.system_weights(WA, dt * theta, boundary)
            rhs = base + dt * bd.apply(WB, np.broadcast_to(Dold, Uold.shape))
            if ex is not None:
                _set_dirichlet(rhs, ex, tt, s_new, y)
            _check_finite(rhs, act, k, "right-hand side")
            x = bd.solve(S, rhs, where=(None, k))
            _check_finite(x, act, k, "solution")
            res_max = max(res_max, bd.residual(S, x, rhs))
            U[act, k] = x
    sol = FlowField(grid, m, U)
    ut = FlowField(grid, m, _t_derivative(sol.values, times, grid.mask()))
    return LinearSolveReport(sol, ut, res_max, N, info={"diagonal": diagonal, "theta": theta})


def _t_deriv_eval(ev, dt, vector):
    """Centered difference in t with step dt for an evaluator lacking one."""
    if vector:
        return lambda t, s, y: (np.asarray(ev(t + dt, s, y)) - np.asarray(ev(t - dt, s, y))) / (2 * dt)

    def d(t, s, y):
        hi, lo = ev(t + dt, s, y), ev(t - dt, s, y)
        return tuple((np.asarray(a) - np.asarray(b)) / (2 * dt) for a, b in zip(hi, lo))

    return d


def _cumtrapz(v, dt):
    """Running trapezoid integral along axis 0 starting at zero."""
    out = np.zeros_like(v)
    if v.shape[0] > 1:
        out[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * dt, axis=0)
    return out


def solve_augmented(spec: LinearSystemSpec, grid: TriTimeGrid, exact: Optional[Callable] = None,
                    exact_t: Optional[Callable] = None, couplings: int = 3) -> LinearSolveReport:
    """March the pair (u, v) where v stands for u_t.

    Along the diagonal u(s,s) = u(t,s) - int_s^t v(theta,s) dtheta, so

        u_s = (A + B).Du - B.D(int v) + f,
        v_s = A.Dv + (A_t + B_t).Du - B_t.D(int v) + f_t,   v(t,0) = g_t(t).

    The memory integral uses the trapezoid rule over t-nodes of the new
    s-level; each step alternates the two implicit solves ``couplings``
    times.
    """
    _require_1d(spec, grid)
    if grid.orientation != FORWARD:
        raise InvalidParameter("solve_augmented expects a forward grid")
    boundary, ex = _boundary(spec, exact)
    N, M, m = grid.N, grid.M, spec.m
    y = grid.axis(0)
    h = grid.h[0]
    dt = grid.dt
    times = grid.times
    flags = []
    f_t = spec.f_t
    if f_t is None:
        f_t = _t_deriv_eval(spec.f, dt, True)
        flags.append("f_t")
    A_t = spec.A_t
    if A_t is None:
        A_t = _t_deriv_eval(spec.A, dt, False)
        flags.append("A_t")
    B_t = spec.B_t
    if B_t is None:
        B_t = _t_deriv_eval(spec.B, dt, False)
        flags.append("B_t")
    g_t = spec.g_t
    if g_t is None:
        g = spec.g
        g_t = lambda t, yy: (np.asarray(g(t + dt, yy)) - np.asarray(g(t - dt, yy))) / (2 * dt)
        flags.append("g_t")
    ex_t = exact_t if exact_t is not None else spec.exact_t
    if ex is not None and ex_t is None:
        ex_t = _t_deriv_eval(ex, dt, True)
        flags.append("exact_t")

    U = np.zeros((N + 1, N + 1, M, m))
    V = np.zeros_like(U)
    for i in range(N + 1):
        U[i, 0] = _sample_vec(spec.g, times[i], y, M=M, m=m)
        V[i, 0] = _sample_vec(g_t, times[i], y, M=M, m=m)
    res_max = 0.0

    def weights(ev, tt, s):
        c = np.stack([_sample(ev, t, s, y, m) for t in tt])
        return bd.stencil_weights(c[:, 0], c[:, 1], c[:, 2], h, boundary)

    for k in range(1, N + 1):
        act = np.arange(k, N + 1)
        tt = times[act]
        s = times[k]
        WA = weights(spec.A, tt, s)
        WB = weights(spec.B, tt, s)
        WAt = weights(A_t, tt, s)
        WBt = weights(B_t, tt, s)
        f = np.stack([_sample_vec(spec.f, t, s, y, M=M, m=m) for t in tt])
        ft = np.stack([_sample_vec(f_t, t, s, y, M=M, m=m) for t in tt])
        Su = bd.system_weights(WA + WB, dt, boundary)
        Sv = bd.system_weights(WA, dt, boundary)
        Uold, Vold = U[act, k - 1], V[act, k - 1]
        Vg = Vold
        for _ in range(max(1, couplings)):
            Iv = _cumtrapz(Vg, dt)
            ru = Uold + dt * (f - bd.apply(WB, Iv))
            if ex is not None:
                _set_dirichlet(ru, ex, tt, s, y)
            _check_finite(ru, act, k, "right-hand side")
            Un = bd.solve(Su, ru, where=(None, k))
            _check_finite(Un, act, k, "solution")
            rv = Vold + dt * (bd.apply(WAt + WBt, Un) - bd.apply(WBt, Iv) + ft)
            if ex_t is not None:
                _set_dirichlet(rv, ex_t, tt, s, y)
            _check_finite(rv, act, k, "right-hand side")
            Vn = bd.solve(Sv, rv, where=(None, k))
            _check_finite(Vn, act, k, "solution")
            Vg = Vn
        res_max = max(res_max, bd.residual(Su, Un, ru), bd.residual(Sv, Vn, rv))
        U[act, k] = Un
        V[act, k] = Vn
    return LinearSolveReport(FlowField(grid, m, U), FlowField(grid, m, V), res_max, N,
                             fd_flags=tuple(flags), info={"couplings": couplings})


def sample_source(grid: TriTimeGrid, m: int, f: Callable) -> FlowField:
    y = grid.axis(0)
    return FlowField.from_function(grid, m, lambda t, s, yy: _sample_vec(f, t, s, y, M=grid.M, m=m))


def sample_datum(grid: TriTimeGrid, m: int, g: Callable) -> FlowField:
    y = grid.axis(0)
    return FlowField.from_function(grid, m, lambda t, s, yy: _sample_vec(g, t, y, M=grid.M, m=m))


def stability_ratio(spec: LinearSystemSpec, grid: TriTimeGrid, df: Callable, dg: Callable,
                    alpha: float = 0.5, rho0: float = 1.0, theta: float = 1.0) -> float:
    """||u(df, dg)||_(2+a) / (||df||_(a) + ||dg||_(2+a)) in the discrete norms."""
    _require_1d(spec, grid)
    fld = sample_source(grid, spec.m, df)
    gld = sample_datum(grid, spec.m, dg)
    if not np.any(fld.values) and not np.any(gld.values):
        raise ZeroPerturbation("both perturbations vanish on the grid")
    ex = None
    if spec.exact is not None:
        ex = lambda t, s, yy: np.zeros((np.shape(yy)[0], spec.m))
    pert = replace(spec, f=df, g=dg, exact=ex, exact_t=None)
    u = march_linear(pert, grid, theta=theta).solution
    num = field_norm(u, "2+alpha", alpha=alpha, rho0=rho0)
    den = field_norm(fld, "alpha", alpha=alpha, rho0=rho0) + field_norm(gld, "2+alpha", alpha=alpha, rho0=rho0)
    return num / den


def _c2_matrix(c2, m, d):
    """Coefficient block as (..., m, m, d, d)."""
    c2 = np.asarray(c2, dtype=float)
    if d == 1 and (c2.ndim < 4 or c2.shape[-2:] != (1, 1)):
        c2 = c2[..., None, None]
    return c2


def check_ellipticity(spec: LinearSystemSpec, grid: TriTimeGrid, probes: int = 200,
                      seed: int = 0) -> EllipticityReport:
    """Sample the Legendre form sum A^{a,ij}_b xi_i xi_j v^a v^b - lam.

    Probes draw a random admissible (t, s) pair, a spatial node and unit
    vectors xi (in R^d) and v (in R^m).  Both A and A + B are tested.
    """
    if probes < 1:
        raise InvalidParameter("probes must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = grid.pairs()
    times = grid.times
    y = grid.axis(0)
    d, m = grid.d, spec.m
    pidx = rng.integers(0, len(pairs), probes)
    jidx = rng.integers(0, grid.M, probes)
    xi = rng.standard_normal((probes, d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    v = rng.standard_normal((probes, m))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    qa = np.empty(probes)
    qab = np.empty(probes)
    for n in range(probes):
        i, k = pairs[pidx[n]]
        yy = y[jidx[n]:jidx[n] + 1]
        a2 = _c2_matrix(np.broadcast_to(spec.A(times[i], times[k], yy)[2], (1, m, m)), m, d)[0]
        b2 = _c2_matrix(np.broadcast_to(spec.B(times[i], times[k], yy)[2], (1, m, m)), m, d)[0]
        form = lambda c: float(np.einsum("abij,i,j,a,b->", c, xi[n], xi[n], v[n], v[n]))
        qa[n] = form(a2)
        qab[n] = form(a2 + b2)
    ma = qa - spec.lam
    mab = qab - spec.lam
    margin = float(min(ma.min(), mab.min()))
    worst_n = int(np.argmin(np.minimum(ma, mab)))
    i, k = pairs[pidx[worst_n]]
    worst = {"t": float(times[i]), "s": float(times[k]), "y": float(y[jidx[worst_n]]),
             "test": "A" if ma[worst_n] <= mab[worst_n] else "A+B"}
    return EllipticityReport(margin >= -1e-12, margin, float(ma.min()), float(mab.min()), worst,
                             {"xi": xi, "v": v, "pairs": [pairs[p] for p in pidx], "nodes": jidx,
                              "form_A": qa, "form_AB": qab})
