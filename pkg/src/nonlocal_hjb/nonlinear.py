"""Nonlocal fully nonlinear systems  u_s = F(t, s, y, Du(t,s,y), Du(s,s,y)).

Everything here works on forward grids in one space dimension.  A jet is
the triple (value, gradient, Hessian) at every spatial node; spatial
derivatives use the ghost-node closure at the box edges, which makes the
nonlinear schemes coincide with the banded linear ones on linear data.

Three solvers share one implicit-Euler/Newton slice kernel:

* ``freeze_diagonal_solve`` - the diagonal jet is handed in from outside;
* ``causal_march_nonlinear`` - one sweep in s, the slice t = s solved
  first with its own jet as diagonal, the others using that fresh jet;
* ``picard_fixed_point`` - iterates the frozen-diagonal map (or the
  linearised map around the initial datum) to a fixed point.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import _banded as bd
from .errors import BlowUp, InvalidParameter, NanDetected, NewtonDivergence, NoConvergence
from .grid import FORWARD, DiagonalField, FlowField, TriTimeGrid, extract_diagonal, spatial_jet
from .holder import field_norm, holder_norm
from .linear import LinearSystemSpec, march_linear

JET_STENCIL = "ghost"


class Jet(NamedTuple):
    value: np.ndarray   # (M, m)
    grad: np.ndarray    # (M, m, d)
    hess: np.ndarray    # (M, m, d, d)


def jet_of(U: np.ndarray, h: float, stencil: str = JET_STENCIL) -> Jet:
    """Jet of a single slice U of shape (M, m)."""
    grad, hess = spatial_jet(U, (h,), stencil)
    return Jet(U, grad, hess)


def _jet_list(U, h):
    grad, hess = spatial_jet(U, (h,), JET_STENCIL)
    return [Jet(U[p], grad[p], hess[p]) for p in range(U.shape[0])]


@dataclass(frozen=True)
class NonlinearitySpec:
    """Evaluator bundle.

    ``F(t, s, y, local, diag)`` returns (M, m).  ``dF_local`` and
    ``dF_diag`` return coefficient triples (c0, c1, c2), each broadcastable
    to (M, m, m), holding the partial derivatives of F^a with respect to
    the value, gradient and Hessian of u^b.  Missing derivatives fall back
    to central differences with step 1e-6 (1 + |jet|).
    """
    m: int
    F: Callable
    dF_local: Optional[Callable] = None
    dF_diag: Optional[Callable] = None
    dF_t: Optional[Callable] = None
    d: int = 1
    lipschitz_L: Optional[float] = None
    holder_K: Optional[float] = None
    name: str = ""


def _perturbed(j: Jet, order: int, b: int, delta):
    val, gr, he = j.value.copy(), j.grad.copy(), j.hess.copy()
    if order == 0:
        val[:, b] += delta
    elif order == 1:
        gr[:, b, 0] += delta
    else:
        he[:, b, 0, 0] += delta
    return Jet(val, gr, he)


def _component(j: Jet, order: int, b: int):
    return (j.value[:, b], j.grad[:, b, 0], j.hess[:, b, 0, 0])[order]


def fd_jet_derivative(F, t, s, y, local: Jet, diag: Jet, which: str, m: int):
    """Central-difference derivative of F in the local or diagonal jet."""
    M = y.shape[0]
    out = np.zeros((3, M, m, m))
    for order in range(3):
        for b in range(m):
            base = local if which == "local" else diag
            hstep = 1e-6 * (1.0 + np.abs(_component(base, order, b)))
            hi = _perturbed(base, order, b, hstep)
            lo = _perturbed(base, order, b, -hstep)
            if which == "local":
                fp, fm = F(t, s, y, hi, diag), F(t, s, y, lo, diag)
            else:
                fp, fm = F(t, s, y, local, hi), F(t, s, y, local, lo)
            out[order, :, :, b] = (np.asarray(fp) - np.asarray(fm)) / (2 * hstep[:, None])
    return out


def _derivs(spec: NonlinearitySpec, t, s, y, local, diag, which):
    ev = spec.dF_local if which == "local" else spec.dF_diag
    M, m = y.shape[0], spec.m
    if ev is None:
        return fd_jet_derivative(spec.F, t, s, y, local, diag, which, m)
    c = ev(t, s, y, local, diag)
    return np.stack([np.broadcast_to(np.asarray(ci, dtype=float), (M, m, m)) for ci in c])


def with_fd_derivatives(spec: NonlinearitySpec) -> NonlinearitySpec:
    return replace(spec, dF_local=None, dF_diag=None)


@dataclass
class SliceSolverOptions:
    tol: float = 1e-10
    max_iter: int = 25
    min_damping: float = 1.0 / 1024


def _F_batch(spec, tt, s, y, jets, djets):
    return np.stack([np.asarray(spec.F(t, s, y, jl, jd), dtype=float) for t, jl, jd in zip(tt, jets, djets)])


def _newton(spec, tt, s, y, h, dt, Uold, djets, implicit, dirichlet, opts, where):
    """Solve U - Uold - dt F(U) = 0 for a batch of slices.

    ``djets`` is a list of diagonal jets per slice, or None with
    ``implicit=True`` when the slice is its own diagonal.
    """
    U = Uold.copy()
    if dirichlet is not None:
        U[:, 0], U[:, -1] = dirichlet[:, 0], dirichlet[:, -1]
    boundary = bd.DIRICHLET if dirichlet is not None else bd.NEUMANN
    trace = []

    def residual(V):
        jets = _jet_list(V, h)
        dj = jets if implicit else djets
        R = V - Uold - dt * _F_batch(spec, tt, s, y, jets, dj)
        if dirichlet is not None:
            R[:, 0] = V[:, 0] - dirichlet[:, 0]
            R[:, -1] = V[:, -1] - dirichlet[:, -1]
        return R, jets, dj

    R, jets, dj = residual(U)
    rn = float(np.max(np.abs(R))) if R.size else 0.0
    trace.append(rn)
    for it in range(opts.max_iter):
        if not np.isfinite(rn):
            raise NanDetected(f"non-finite residual at (t,s) index {where}", *where)
        if rn <= 1e-15 * (1.0 + float(np.max(np.abs(U)))):
            return U, trace
        coef = np.stack([_derivs(spec, t, s, y, jl, jd, "local") for t, jl, jd in zip(tt, jets, dj)])
        if implicit:
            coef = coef + np.stack([_derivs(spec, t, s, y, jl, jd, "diag") for t, jl, jd in zip(tt, jets, dj)])
        W = bd.stencil_weights(coef[:, 0], coef[:, 1], coef[:, 2], h, boundary)
        S = bd.system_weights(W, dt, boundary)
        delta = bd.solve(S, -R, where=where)
        if not np.all(np.isfinite(delta)):
            raise NewtonDivergence(f"non-finite Newton step at {where}", trace, *where)
        lam = 1.0
        while True:
            Un = U + lam * delta
            Rn, jn, djn = residual(Un)
            rnn = float(np.max(np.abs(Rn)))
            if np.isfinite(rnn) and (rnn <= (1 - 1e-4 * lam) * rn or rnn <= 1e-14 * (1 + np.max(np.abs(Un)))):
                break
            lam *= 0.5
            if lam < opts.min_damping:
                trace.append(rnn)
                raise NewtonDivergence(f"line search failed at (t,s) index {where}", trace, *where)
        step = lam * float(np.max(np.abs(delta)))
        U, R, jets, dj, rn = Un, Rn, jn, djn, rnn
        trace.append(rn)
        if step <= opts.tol * (1.0 + float(np.max(np.abs(U)))):
            return U, trace
    raise NewtonDivergence(f"Newton did not converge in {opts.max_iter} iterations at {where}", trace, *where)


def _require(spec, grid):
    if grid.orientation != FORWARD:
        raise InvalidParameter("nonlinear solvers expect a forward grid")
    if grid.d != 1 or spec.d != 1:
        raise InvalidParameter("nonlinear solvers handle d = 1 only")


def _initial(g, grid, m):
    y = grid.axis(0)
    U = np.zeros((grid.N + 1, grid.N + 1, grid.M, m))
    for i, t in enumerate(grid.times):
        U[i, 0] = np.broadcast_to(np.asarray(g(t, y), dtype=float), (grid.M, m))
    return U


def _dirichlet_values(exact, tt, s, y, m):
    if exact is None:
        return None
    out = np.zeros((len(tt), y.shape[0], m))
    ends = y[[0, -1]]
    for p, t in enumerate(tt):
        v = np.asarray(exact(t, s, ends), dtype=float).reshape(2, m)
        out[p, 0], out[p, -1] = v[0], v[1]
    return out


def freeze_diagonal_solve(spec: NonlinearitySpec, g: Callable, diag: DiagonalField, grid: TriTimeGrid,
                          exact: Optional[Callable] = None, opts: SliceSolverOptions | None = None) -> FlowField:
    """Solve w_s = F(t, s, y, Dw, frozen diagonal jet at s) for every t."""
    _require(spec, grid)
    opts = opts or SliceSolverOptions()
    y, h, dt, times = grid.axis(0), grid.h[0], grid.dt, grid.times
    U = _initial(g, grid, spec.m)
    for k in range(1, grid.N + 1):
        act = np.arange(k, grid.N + 1)
        dj = Jet(diag.value[k], diag.grad[k], diag.hess[k])
        x, _ = _newton(spec, times[act], times[k], y, h, dt, U[act, k - 1], [dj] * act.size, False,
                       _dirichlet_values(exact, times[act], times[k], y, spec.m), opts, (None, k))
        U[act, k] = x
    return FlowField(grid, spec.m, U)


def _causal_steps(spec, grid, U, k_from, k_to, exact, opts, log=None):
    y, h, dt, times = grid.axis(0), grid.h[0], grid.dt, grid.times
    for k in range(k_from + 1, k_to + 1):
        xd, tr = _newton(spec, times[k:k + 1], times[k], y, h, dt, U[k:k + 1, k - 1], None, True,
                         _dirichlet_values(exact, times[k:k + 1], times[k], y, spec.m), opts, (k, k))
        U[k, k] = xd[0]
        if log is not None:
            log.append(len(tr) - 1)
        act = np.arange(k + 1, grid.N + 1)
        if act.size:
            dj = jet_of(U[k, k], h)
            x, tr = _newton(spec, times[act], times[k], y, h, dt, U[act, k - 1], [dj] * act.size, False,
                            _dirichlet_values(exact, times[act], times[k], y, spec.m), opts, (None, k))
            U[act, k] = x


def causal_march_nonlinear(spec: NonlinearitySpec, g: Callable, grid: TriTimeGrid,
                           exact: Optional[Callable] = None, opts: SliceSolverOptions | None = None) -> FlowField:
    _require(spec, grid)
    opts = opts or SliceSolverOptions()
    U = _initial(g, grid, spec.m)
    _causal_steps(spec, grid, U, 0, grid.N, exact, opts)
    return FlowField(grid, spec.m, U)


@dataclass(frozen=True)
class PicardReport:
    solution: FlowField
    iterations: int
    contraction_factors: tuple
    converged: bool
    final_update_norm: float
    update_norms: tuple = ()
    damping: tuple = ()

    def rows(self):
        out = []
        for n, un in enumerate(self.update_norms):
            cf = self.contraction_factors[n - 1] if n >= 1 else float("nan")
            out.append((n + 1, un, cf))
        return out


class _NodeSource:
    """Evaluator view f(t, s, y) of a node-sampled source."""

    def __init__(self, values, grid):
        self.values = values
        self.dt = grid.dt

    def __call__(self, t, s, y):
        return self.values[int(round(t / self.dt)), int(round(s / self.dt))]


def _lambda_map_factory(spec, g, grid, exact):
    """Linearisation around the initial datum: U_s = L0 U + F(u) - L0 u."""
    y, h, times = grid.axis(0), grid.h[0], grid.times
    g0 = jet_of(np.broadcast_to(np.asarray(g(times[0], y), float), (grid.M, spec.m)).copy(), h)
    A0, B0 = {}, {}
    for i, t in enumerate(times):
        gt = jet_of(np.broadcast_to(np.asarray(g(t, y), float), (grid.M, spec.m)).copy(), h)
        A0[i] = _derivs(spec, t, 0.0, y, gt, g0, "local")
        B0[i] = _derivs(spec, t, 0.0, y, gt, g0, "diag")
    dt = grid.dt
    A_ev = lambda t, s, yy: tuple(A0[int(round(t / dt))])
    B_ev = lambda t, s, yy: tuple(B0[int(round(t / dt))])

    def lam_map(u: FlowField) -> FlowField:
        vals = u.values
        src = np.zeros_like(vals)
        grad, hess = spatial_jet(vals, (h,), JET_STENCIL)
        n = np.arange(grid.N + 1)
        for i, k in grid.pairs():
            loc = Jet(vals[i, k], grad[i, k], hess[i, k])
            dg = Jet(vals[k, k], grad[k, k], hess[k, k])
            Fv = np.asarray(spec.F(times[i], times[k], y, loc, dg), float)
            L0 = _apply_coeffs(A0[i], loc) + _apply_coeffs(B0[i], dg)
            src[i, k] = Fv - L0
        lin = LinearSystemSpec(spec.m, A_ev, B_ev, _NodeSource(src, grid), g, exact=exact)
        return march_linear(lin, grid).solution

    return lam_map


def _apply_coeffs(c, j: Jet):
    return (np.einsum("jab,jb->ja", c[0], j.value) + np.einsum("jab,jb->ja", c[1], j.grad[..., 0])
            + np.einsum("jab,jb->ja", c[2], j.hess[..., 0, 0]))


def picard_fixed_point(spec: NonlinearitySpec, g: Callable, grid: TriTimeGrid, tol: float = 1e-8,
                       max_iter: int = 50, damping: float = 1.0, mode: str = "direct",
                       exact: Optional[Callable] = None, norm_cap: float = 1e6,
                       alpha: float = 0.5, rho0: float = 1.0, raise_on_failure: bool = True,
                       opts: SliceSolverOptions | None = None) -> PicardReport:
    """Iterate u <- (1 - w) u + w map(u) from u0(t, s, y) = g(t, y).

    Update sizes are measured in the unweighted discrete (2 + alpha) norm.
    The damping w is halved whenever an update grows.  ``iterations``
    counts evaluations of the map.
    """
    _require(spec, grid)
    if not tol > 0:
        raise InvalidParameter("tol must be positive")
    if not 0 < damping <= 1:
        raise InvalidParameter("damping must lie in (0, 1]")
    if mode not in ("direct", "lambda"):
        raise InvalidParameter(f"unknown Picard mode {mode!r}")
    opts = opts or SliceSolverOptions()
    U0 = _initial(g, grid, spec.m)
    for k in range(1, grid.N + 1):
        U0[k:, k] = U0[k:, 0]
    u = FlowField(grid, spec.m, U0)
    if mode == "direct":
        fmap = lambda w: freeze_diagonal_solve(spec, g, extract_diagonal(w, JET_STENCIL), grid, exact, opts)
    else:
        fmap = _lambda_map_factory(spec, g, grid, exact)
    norms, factors, omegas = [], [], []
    omega = damping
    best = (np.inf, u)
    for it in range(1, max_iter + 1):
        new = fmap(u)
        nv = (1 - omega) * u.values + omega * new.values
        diff = FlowField(grid, spec.m, nv - u.values)
        un = field_norm(diff, "2+alpha", alpha=alpha, rho0=rho0)
        u = FlowField(grid, spec.m, nv)
        omegas.append(omega)
        if norms:
            factors.append(un / norms[-1] if norms[-1] > 0 else 0.0)
        norms.append(un)
        if un < best[0]:
            best = (un, u)
        size = float(np.max(np.abs(u.values)))
        if not np.isfinite(size) or size > norm_cap:
            raise BlowUp(f"Picard iterate exceeded the norm cap at iteration {it}", it - 1)
        if un <= tol:
            return PicardReport(u, it, tuple(factors), True, un, tuple(norms), tuple(omegas))
        if factors and factors[-1] > 1.0:
            omega *= 0.5
    rep = PicardReport(best[1], max_iter, tuple(factors), False, norms[-1], tuple(norms), tuple(omegas))
    if raise_on_failure:
        raise NoConvergence(f"Picard iteration did not reach tol={tol} in {max_iter} iterations", rep)
    return rep


@dataclass
class StageLog:
    stages: list = field(default_factory=list)   # (s_start, s_end, norm, status)
    last_healthy_stage: int = -1
    blow_up: bool = False
    blow_up_s: Optional[float] = None


def _stage_norm(U, grid, m, k_from, k_to, alpha, rho0):
    """Largest slice norm over the s-range of one stage."""
    times = grid.times
    best = 0.0
    for i in range(k_from, grid.N + 1):
        sl = slice(k_from, min(i, k_to) + 1)
        tot = sum(holder_norm(U[i, sl, ..., a], times[sl], grid.h, "2+alpha", alpha, rho0) for a in range(m))
        best = max(best, tot)
    return best


def continue_solution(spec: NonlinearitySpec, g: Callable, grid: TriTimeGrid, stage_length: float,
                      norm_cap: float = 1e6, exact: Optional[Callable] = None, alpha: float = 0.5,
                      rho0: float = 1.0, raise_on_blowup: bool = True,
                      opts: SliceSolverOptions | None = None):
    """Solve stage by stage in s, each stage starting from the last slice.

    A stage fails when its discrete (2 + alpha) norm passes ``norm_cap``
    or when the slice solver breaks down (no real implicit step).
    """
    _require(spec, grid)
    steps = stage_length / grid.dt
    if stage_length <= 0 or abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise InvalidParameter("stage_length must be a positive multiple of the time step")
    steps = int(round(steps))
    if grid.N % steps:
        raise InvalidParameter("stage_length must divide T on the node set")
    opts = opts or SliceSolverOptions()
    U = _initial(g, grid, spec.m)
    log = StageLog()
    times = grid.times
    for n, k0 in enumerate(range(0, grid.N, steps)):
        k1 = k0 + steps
        status, norm = "ok", float("nan")
        try:
            _causal_steps(spec, grid, U, k0, k1, exact, opts)
            norm = _stage_norm(U, grid, spec.m, k0, k1, alpha, rho0)
            if not np.isfinite(norm) or norm > norm_cap:
                status = "norm-cap"
        except (NewtonDivergence, NanDetected) as exc:
            status = f"solver-failure: {type(exc).__name__}"
        log.stages.append((float(times[k0]), float(times[k1]), norm, status))
        if status != "ok":
            log.blow_up = True
            log.blow_up_s = float(times[k0])
            if raise_on_blowup:
                raise BlowUp(f"blow-up detected in stage {n} starting at s={times[k0]:.6g}",
                             log.last_healthy_stage, log)
            break
        log.last_healthy_stage = n
    U[~grid.mask()] = 0.0
    U[~np.isfinite(U)] = 0.0
    return FlowField(grid, spec.m, U), log


def reflect_nonlinearity(spec: NonlinearitySpec, T: float) -> NonlinearitySpec:
    """Backward data (u_s + H = 0 on t <= s) as a forward problem in T - t, T - s."""
    def r(ev):
        return None if ev is None else (lambda t, s, y, loc, dg: ev(T - t, T - s, y, loc, dg))

    dF_t = None
    if spec.dF_t is not None:
        dF_t = lambda t, s, y, loc, dg: -np.asarray(spec.dF_t(T - t, T - s, y, loc, dg))
    return replace(spec, F=r(spec.F), dF_local=r(spec.dF_local), dF_diag=r(spec.dF_diag), dF_t=dF_t)


def reflect_datum(g: Callable, T: float) -> Callable:
    return lambda t, y: g(T - t, y)


def linear_nonlinearity(lin: LinearSystemSpec) -> NonlinearitySpec:
    """View a linear system as a nonlinearity with exact jet derivatives."""
    m = lin.m

    def _b(c, M):
        return [np.broadcast_to(np.asarray(ci, float), (M, m, m)) for ci in c]

    def F(t, s, y, loc, dg):
        M = y.shape[0]
        a = _b(lin.A(t, s, y), M)
        b = _b(lin.B(t, s, y), M)
        return (_apply_coeffs(a, loc) + _apply_coeffs(b, dg)
                + np.broadcast_to(np.asarray(lin.f(t, s, y), float), (M, m)))

    return NonlinearitySpec(m, F, dF_local=lambda t, s, y, loc, dg: lin.A(t, s, y),
                            dF_diag=lambda t, s, y, loc, dg: lin.B(t, s, y), name="linear")


@dataclass(frozen=True)
class AppropriatenessReport:
    passed: bool
    margin_local: float
    margin_total: float
    holder_max: float
    lipschitz_max: float
    details: dict = field(default_factory=dict)


def _min_sym_eig(c2):
    sym = 0.5 * (c2 + np.swapaxes(c2, -1, -2))
    return np.linalg.eigvalsh(sym)[..., 0]


def check_appropriate(spec: NonlinearitySpec, g: Callable, grid: TriTimeGrid, lam: float,
                      alpha: float = 0.5, rho0: float = 1.0, max_pairs: int = 10_000,
                      jet_radius: float = 0.1, seed: int = 0) -> AppropriatenessReport:
    """Sampled checks of ellipticity, Holder and Lipschitz conditions.

    Jets are those of u = g (local jet g(t), diagonal jet g(s)).  The
    ellipticity margins are the least eigenvalue of the symmetric part of
    the Hessian coefficient minus ``lam``, for the local derivative and for
    local plus diagonal.  Holder quotients of F run over node pairs within
    ``rho0`` in the parabolic distance on a decimated subgrid; Lipschitz
    quotients compare random jet pairs in a ball around the datum jets.
    """
    if grid.d != 1:
        raise InvalidParameter("check_appropriate handles d = 1 only")
    y, h, times = grid.axis(0), grid.h[0], grid.times
    m = spec.m
    gj = {}
    for i, t in enumerate(times):
        gj[i] = jet_of(np.broadcast_to(np.asarray(g(t, y), float), (grid.M, m)).copy(), h, "one-sided")
    ml, mt = np.inf, np.inf
    worst = {}
    Fvals = {}
    for i, k in grid.pairs():
        loc, dg = gj[i], gj[k]
        cl = _derivs(spec, times[i], times[k], y, loc, dg, "local")
        cd = _derivs(spec, times[i], times[k], y, loc, dg, "diag")
        el = _min_sym_eig(cl[2]) - lam
        et = _min_sym_eig(cl[2] + cd[2]) - lam
        if el.min() < ml:
            ml = float(el.min())
            worst["local"] = (float(times[i]), float(times[k]), float(y[int(np.argmin(el))]))
        if et.min() < mt:
            mt = float(et.min())
            worst["total"] = (float(times[i]), float(times[k]), float(y[int(np.argmin(et))]))
        Fvals[(i, k)] = np.asarray(spec.F(times[i], times[k], y, loc, dg), float)
    # Holder quotients of s -> F(t, s, y) and y -> F(t, s, y) on a decimated set
    stride = max(1, int(np.ceil(grid.M / 64)))
    idx = np.arange(0, grid.M, stride)
    pairs_done, hq = 0, 0.0
    for i in range(grid.N + 1):
        ks = [k for k in range(grid.N + 1) if (i, k) in Fvals]
        for a_pos, k in enumerate(ks):
            Fa = Fvals[(i, k)][idx]
            for k2 in ks[a_pos:]:
                ds = abs(times[k2] - times[k])
                if ds > rho0:
                    break
                Fb = Fvals[(i, k2)][idx]
                for off in range(0 if k2 != k else 1, len(idx)):
                    dy = y[idx[off:]] - y[idx[:len(idx) - off]]
                    dist = np.abs(dy) + np.sqrt(ds)
                    if dist.size == 0 or dist.min() > rho0:
                        break
                    q = np.linalg.norm(Fb[off:] - Fa[:len(idx) - off], axis=-1) / dist**alpha
                    hq = max(hq, float(q.max()))
                    pairs_done += q.size
                    if pairs_done > max_pairs:
                        break
                if pairs_done > max_pairs:
                    break
            if pairs_done > max_pairs:
                break
        if pairs_done > max_pairs:
            break
    rng = np.random.default_rng(seed)
    lq = 0.0
    pick = grid.pairs()
    for n in range(min(64, len(pick))):
        i, k = pick[rng.integers(len(pick))]
        loc, dg = gj[i], gj[k]

        def bump(j):
            scale = jet_radius * (1 + np.abs(j.value))
            return Jet(j.value + scale * rng.uniform(-1, 1, j.value.shape),
                       j.grad + jet_radius * (1 + np.abs(j.grad)) * rng.uniform(-1, 1, j.grad.shape),
                       j.hess + jet_radius * (1 + np.abs(j.hess)) * rng.uniform(-1, 1, j.hess.shape))

        l1, d1, l2, d2 = bump(loc), bump(dg), bump(loc), bump(dg)
        f1 = np.asarray(spec.F(times[i], times[k], y, l1, d1), float)
        f2 = np.asarray(spec.F(times[i], times[k], y, l2, d2), float)
        dz = np.sqrt(sum(np.sum((a - b) ** 2, axis=tuple(range(1, a.ndim)))
                         for a, b in zip(tuple(l1) + tuple(d1), tuple(l2) + tuple(d2))))
        q = np.linalg.norm(f1 - f2, axis=-1) / np.maximum(dz, 1e-300)
        lq = max(lq, float(q.max()))
    ok = ml >= -1e-12 and mt >= -1e-12 and np.isfinite(hq) and np.isfinite(lq)
    if spec.holder_K is not None:
        ok = ok and hq <= spec.holder_K
    if spec.lipschitz_L is not None:
        ok = ok and lq <= spec.lipschitz_L
    return AppropriatenessReport(bool(ok), ml, mt, hq, lq, {"worst": worst, "holder_pairs": pairs_done})


def classical_solve(spec: NonlinearitySpec, g: Callable, grid: TriTimeGrid, t: float = 0.0,
                    exact: Optional[Callable] = None, tol: float = 1e-13) -> np.ndarray:
    """Local problem v_s = F(t, s, y, Dv, Dv) for one fixed t.

    Each implicit Euler step is handed to a general-purpose root finder,
    independent of the banded Newton kernel used by the nonlocal solvers.
    Returns v at every s node, shape (N + 1, M, m).
    """
    from scipy.optimize import root

    _require(spec, grid)
    y, h, dt, times = grid.axis(0), grid.h[0], grid.dt, grid.times
    M, m = grid.M, spec.m
    V = np.empty((grid.N + 1, M, m))
    V[0] = np.broadcast_to(np.asarray(g(t, y), dtype=float), (M, m))
    for k in range(1, grid.N + 1):
        s, old = times[k], V[k - 1]
        bc = _dirichlet_values(exact, [t], s, y, m)

        def res(x):
            W = x.reshape(M, m)
            j = jet_of(W, h)
            R = W - old - dt * np.asarray(spec.F(t, s, y, j, j), dtype=float)
            if bc is not None:
                R[0], R[-1] = W[0] - bc[0, 0], W[-1] - bc[0, -1]
            return R.ravel()

        sol = root(res, old.ravel(), method="hybr", tol=tol)
        if not sol.success or not np.all(np.isfinite(sol.x)):
            raise NewtonDivergence(f"classical step failed at s index {k}: {sol.message}", [], None, k)
        V[k] = sol.x.reshape(M, m)
    return V
