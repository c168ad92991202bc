"""Exponential- and power-utility investment games with explicit solutions.

Exponential utility
-------------------
All formulas are written for the discounted wealth state

    dX = sum_b (mu_b - r) e^{r(T-s)} alpha^b ds + sum_b alpha^b sigma_b e^{r(T-s)} dW_b ,

so the equilibrium HJB system is autonomous in y.  With gamma = 0 the
solution is U(t,s,y) = -phi2(t,s) exp(-eta y), where phi2 solves the
linear system  (phi2)_s + N2 phi2 = 0,  phi2(t,T) = T(t).  The gamma > 0
embedding adds a growing exp(eta y) branch driven by N1 and M1.

Power utility
-------------
U(t,s,y) = psi(t,s) y^beta reduces the equilibrium system to a family of
linear ODEs in s whose coefficients depend on the diagonal psi(s,s).
The diagonal is obtained by Picard iteration on the Cauchy formula.

Matrix-valued evaluators take (t, s) and return (m, m); vector-valued
ones return (m,).  Array arguments are accepted when the evaluator
broadcasts, otherwise calls are looped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from .errors import (DomainError, HypothesisViolated, InvalidParameter, NoConvergence,
                     PositivityLost, SeriesNotConverged, SingularFundamentalMatrix)


def const_matrix(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))

    def ev(t, s):
        shape = np.broadcast(np.asarray(t), np.asarray(s)).shape
        return np.broadcast_to(mat, shape + mat.shape)

    return ev


def const_vector(vec):
    vec = np.atleast_1d(np.asarray(vec, dtype=float))

    def ev(*args):
        shape = np.broadcast(*[np.asarray(a) for a in args]).shape if args else ()
        return np.broadcast_to(vec, shape + vec.shape)

    return ev


def _batch(ev, shape_tail, *args):
    """Evaluate ev over broadcast array arguments, looping if needed."""
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    base = arrs[0].shape
    try:
        out = np.asarray(ev(*arrs), dtype=float)
        if out.shape == base + shape_tail:
            return out
        if out.shape == shape_tail and base == ():
            return out
    except Exception:
        pass
    flat = [a.reshape(-1) for a in arrs]
    vals = [np.asarray(ev(*[f[n] for f in flat]), dtype=float).reshape(shape_tail)
            for n in range(flat[0].size)]
    return np.array(vals).reshape(base + shape_tail)


# ------------------------------------------------------------------ specs

@dataclass(frozen=True)
class ExpUtilitySpec:
    m: int
    mu: np.ndarray
    sigma: np.ndarray
    r: float
    eta: float
    T: float
    R: Callable                      # w3(t, s) -> (m, m)
    Tvec: Callable                   # g2(t) -> (m,)
    gamma: float = 0.0
    W1: Optional[Callable] = None    # (t, s) -> (m,), default 1
    g1: Optional[Callable] = None    # t -> (m,), default 1

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != (self.m,) or sig.shape != (self.m,):
            raise InvalidParameter("mu and sigma must have m entries")
        if np.any(sig <= 0):
            raise InvalidParameter("volatilities must be positive")
        if np.any(mu < self.r):
            raise InvalidParameter("appreciation rates must not fall below r")
        if self.eta <= 0 or self.T <= 0:
            raise InvalidParameter("eta and T must be positive")
        if self.gamma < 0:
            raise InvalidParameter("gamma must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sig)
        if self.W1 is None:
            object.__setattr__(self, "W1", const_vector(np.ones(self.m)))
        if self.g1 is None:
            object.__setattr__(self, "g1", const_vector(np.ones(self.m)))

    @property
    def kappa(self) -> np.ndarray:
        return (self.mu - self.r) ** 2 / self.sigma**2


@dataclass(frozen=True)
class PowerUtilitySpec:
    m: int
    mu: np.ndarray
    sigma: np.ndarray
    r: float
    T: float
    beta: float
    v: Callable      # (t, s) -> (m, m)
    w: Callable      # (t, s) -> (m, m)
    g: Callable      # t -> (m,)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != (self.m,) or sig.shape != (self.m,):
            raise InvalidParameter("mu and sigma must have m entries")
        if np.any(sig <= 0):
            raise InvalidParameter("volatilities must be positive")
        if not 0 < self.beta < 1:
            raise InvalidParameter("beta must lie in (0, 1)")
        if self.T <= 0:
            raise InvalidParameter("T must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sig)

    @property
    def k(self) -> float:
        kap = (self.mu - self.r) ** 2 / self.sigma**2
        return float(self.r * self.beta + np.sum(kap * self.beta / (2 * (1 - self.beta))))


# ---------------------------------------------------- exponential utility

def exp_ode_matrices(spec: ExpUtilitySpec, t, s):
    """(N1, N2, M1) of the two linear systems behind the exponential example."""
    m = spec.m
    kap = spec.kappa
    K = float(np.sum(kap))
    w3 = _batch(spec.R, (m, m), t, s)
    N1 = 1.5 * K * np.eye(m) - np.outer(np.ones(m), kap) - w3
    N2 = -0.5 * K * np.eye(m) - w3
    vb = (spec.mu - spec.r) * np.exp(-spec.r * (spec.T - s)) / (2 * spec.sigma**2 * spec.eta)
    M1 = spec.gamma * np.full(m, float(vb @ _batch(spec.W1, (m,), t, s)))
    return N1, N2, M1


def _rk4_nodes(Nfun, nodes, n_sub, batch_shape=()):
    """Integrate dX/ds = -N(s) X from nodes[0] (X = I) through ``nodes``.

    ``Nfun(s)`` returns (..., m, m) with leading ``batch_shape``.  Returns
    X at every node, shape (len(nodes),) + batch_shape + (m, m).
    """
    N0 = np.asarray(Nfun(nodes[0]), dtype=float)
    m = N0.shape[-1]
    X = np.broadcast_to(np.eye(m), batch_shape + (m, m)).copy()
    out = np.empty((len(nodes),) + batch_shape + (m, m))
    out[0] = X
    for j in range(len(nodes) - 1):
        a, b = nodes[j], nodes[j + 1]
        hstep = (b - a) / n_sub
        for q in range(n_sub):
            s0 = a + q * hstep
            k1 = -np.asarray(Nfun(s0)) @ X
            Nm = np.asarray(Nfun(s0 + 0.5 * hstep))
            k2 = -Nm @ (X + 0.5 * hstep * k1)
            k3 = -Nm @ (X + 0.5 * hstep * k2)
            k4 = -np.asarray(Nfun(s0 + hstep)) @ (X + hstep * k3)
            X = X + (hstep / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[j + 1] = X
    return out


_cheb_cache: dict = {}


def _cheb_tail_matrix(n):
    """Nodes x_j on [-1, 1] and Q with (Q f)(x_j) = int_{x_j}^{1} f."""
    if n not in _cheb_cache:
        x = np.cos(np.pi * np.arange(n) / (n - 1))[::-1]
        V = cheb.chebvander(x, n - 1)
        Vinv = np.linalg.inv(V)
        Q = np.empty((n, n))
        for col in range(n):
            c = Vinv[:, col]
            anti = cheb.chebint(c, lbnd=1.0)
            Q[:, col] = -cheb.chebval(x, anti)
        _cheb_cache[n] = (x, Q)
    return _cheb_cache[n]


def peano_baker(N: Callable, t, s, T, tol=1e-14, max_terms=100, n_nodes=40):
    """Partial sums of I + int N + int N int N + ... on [s, T].

    Iterated integrals are taken with a Chebyshev spectral integration
    matrix; the series stops when the newest term has norm below ``tol``.
    """
    if s == T:
        m = np.asarray(N(t, T)).shape[-1]
        return np.eye(m)
    x, Q = _cheb_tail_matrix(n_nodes)
    tau = s + (x + 1.0) * 0.5 * (T - s)
    Nn = np.array([np.asarray(N(t, tk), dtype=float) for tk in tau])
    m = Nn.shape[-1]
    term = np.broadcast_to(np.eye(m), (n_nodes, m, m)).copy()
    total = term.copy()
    scale = 0.5 * (T - s)
    for n in range(1, max_terms + 1):
        prod = Nn @ term
        term = scale * np.einsum("ij,jab->iab", Q, prod)
        total += term
        if np.max(np.abs(term)) < tol:
            return total[0]
    raise SeriesNotConverged(f"Peano-Baker series needs more than {max_terms} terms")


def lappo_danilevskii_check(N: Callable, t, s, T, tol=1e-10, n_quad=64):
    """Commutator of N(t, s) with int_s^T N(t, tau) dtau (composite Simpson)."""
    if n_quad % 2:
        n_quad += 1
    tau = np.linspace(s, T, n_quad + 1)
    vals = np.array([np.asarray(N(t, tk), dtype=float) for tk in tau])
    integral = simpson(vals, x=tau, axis=0) if T > s else np.zeros_like(vals[0])
    N0 = vals[0]
    comm = N0 @ integral - integral @ N0
    norm = float(np.linalg.norm(comm))
    return norm < tol, norm


def fundamental_matrix(N: Callable, t, s, T, method="matrix-ode", n_steps=64, n_sub=8,
                       ld_tol=1e-10):
    """F(t, s) with F(t, T) = I and dF/ds = -N(t, s) F.

    ``method`` is ``"matrix-ode"`` (classical RK4 over ``n_steps`` intervals
    with ``n_sub`` substeps each), ``"peano-baker"`` or ``"expm-if-LD"``.
    """
    if s > T:
        raise InvalidParameter("need s <= T")
    if method == "matrix-ode":
        nodes = np.linspace(T, s, n_steps + 1)
        return _rk4_nodes(lambda tau: N(t, tau), nodes, n_sub)[-1]
    if method == "peano-baker":
        return peano_baker(N, t, s, T)
    if method == "expm-if-LD":
        ok, norm = lappo_danilevskii_check(N, t, s, T, ld_tol)
        if not ok:
            raise HypothesisViolated(f"commutator norm {norm:.3e} exceeds tolerance; exp formula invalid")
        n = 2 * max(1, n_steps // 2)
        tau = np.linspace(s, T, n + 1)
        vals = np.array([np.asarray(N(t, tk), dtype=float) for tk in tau])
        return expm(simpson(vals, x=tau, axis=0)) if T > s else np.eye(vals.shape[-1])
    raise InvalidParameter(f"unknown method {method!r}")


def _transitions(X0, Xtau):
    """X0 @ inv(Xtau) for a stack of Xtau."""
    try:
        cond = np.linalg.cond(Xtau)
    except np.linalg.LinAlgError as exc:
        raise SingularFundamentalMatrix(str(exc)) from exc
    if not np.all(np.isfinite(cond)) or np.max(cond) > 1e14:
        raise SingularFundamentalMatrix("fundamental matrix is numerically singular")
    # X0 inv(Xtau) = (inv(Xtau)^T X0^T)^T
    return np.swapaxes(np.linalg.solve(np.swapaxes(Xtau, -1, -2), np.swapaxes(X0, -1, -2)[None]), -1, -2)


def exp_phi(spec: ExpUtilitySpec, t, s, n_quad=64, n_sub=8):
    """(phi1, phi2) at (t, s); phi1 vanishes when gamma = 0."""
    if n_quad % 2:
        n_quad += 1
    T = spec.T
    nodes = np.linspace(T, s, n_quad + 1)
    N2 = lambda tau: exp_ode_matrices(spec, t, tau)[1]
    X2 = _rk4_nodes(N2, nodes, n_sub)
    phi2 = X2[-1] @ _batch(spec.Tvec, (spec.m,), t)
    phi1 = np.zeros(spec.m)
    if spec.gamma > 0:
        N1 = lambda tau: exp_ode_matrices(spec, t, tau)[0]
        X1 = _rk4_nodes(N1, nodes, n_sub)
        phi1 = spec.gamma * (X1[-1] @ _batch(spec.g1, (spec.m,), t))
        if s < T:
            tr = _transitions(X1[-1], X1)
            M1 = np.array([exp_ode_matrices(spec, t, tau)[2] for tau in nodes])
            integrand = np.einsum("kab,kb->ka", tr, M1)
            # nodes run from T down to s
            phi1 = phi1 + simpson(integrand[::-1], x=nodes[::-1], axis=0)
    return phi1, phi2


def exp_solution(spec: ExpUtilitySpec, t, s, y, n_quad=64, n_sub=8):
    """U(t, s, y) of shape (len(y), m)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    phi1, phi2 = exp_phi(spec, t, s, n_quad, n_sub)
    return np.exp(spec.eta * y)[:, None] * phi1[None, :] - np.exp(-spec.eta * y)[:, None] * phi2[None, :]


def exp_phi2_table(spec: ExpUtilitySpec, times, n_sub=8) -> np.ndarray:
    """phi2(t_i, s_k) on all node pairs t_i <= s_k, shape (n, n, m).

    One RK4 sweep per t over the s-nodes; zero outside t <= s.
    """
    times = np.asarray(times, dtype=float)
    n, m = len(times), spec.m
    out = np.zeros((n, n, m))
    for i, t in enumerate(times):
        nodes = times[i:][::-1]
        X = _rk4_nodes(lambda tau: exp_ode_matrices(spec, t, tau)[1], nodes, n_sub)
        out[i, i:] = (X @ _batch(spec.Tvec, (m,), t))[::-1]
    return out


def exp_solution_table(spec: ExpUtilitySpec, times, y, n_sub=8):
    """U on all node pairs t <= s of ``times`` (gamma = 0 only), (n, n, len(y), m)."""
    if spec.gamma != 0:
        raise InvalidParameter("the tabulated solution covers gamma = 0 only")
    phi2 = exp_phi2_table(spec, times, n_sub)
    E = np.exp(-spec.eta * np.asarray(y, dtype=float))
    return -E[None, None, :, None] * phi2[:, :, None, :]


def exp_node_solution(spec: ExpUtilitySpec, times, n_sub=8):
    """Closed-form evaluator U(t, s, y) -> (M, m) for node times only.

    Suitable as Dirichlet data: phi2 is tabulated once, y enters exactly.
    """
    if spec.gamma != 0:
        raise InvalidParameter("the tabulated solution covers gamma = 0 only")
    times = np.asarray(times, dtype=float)
    phi2 = exp_phi2_table(spec, times, n_sub)
    dt = times[1] - times[0]

    def ev(t, s, y):
        i, k = int(round((t - times[0]) / dt)), int(round((s - times[0]) / dt))
        if abs(times[i] - t) > 1e-9 or abs(times[k] - s) > 1e-9:
            raise InvalidParameter("exp_node_solution is defined at node times only")
        return -np.exp(-spec.eta * np.asarray(y, dtype=float))[:, None] * phi2[i, k][None, :]

    return ev


@dataclass(frozen=True)
class ExpEquilibrium:
    alpha: np.ndarray
    spec: ExpUtilitySpec
    s: float
    F2ss: np.ndarray

    def V(self, y, original=True):
        """Value at wealth y; ``original=False`` uses the discounted state."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        Ts = _batch(self.spec.Tvec, (self.spec.m,), self.s)
        scale = np.exp(self.spec.r * (self.spec.T - self.s)) if original else 1.0
        return -np.exp(-self.spec.eta * y * scale)[:, None] * (self.F2ss @ Ts)[None, :]


def exp_equilibrium(spec: ExpUtilitySpec, s, n_quad=64, n_sub=8) -> ExpEquilibrium:
    alpha = (spec.mu - spec.r) / (spec.eta * spec.sigma**2) * np.exp(-spec.r * (spec.T - s))
    nodes = np.linspace(spec.T, s, n_quad + 1)
    X = _rk4_nodes(lambda tau: exp_ode_matrices(spec, s, tau)[1], nodes, n_sub)[-1]
    return ExpEquilibrium(alpha, spec, float(s), X)


def exp_hjb_nonlinearity(spec: ExpUtilitySpec, M_floor: float = 1e-300):
    """Backward equilibrium Hamiltonian (gamma = 0) with its jet derivatives.

    H^a = 1/2 sum_b (sigma_b (mu_b - r) P_b / D_b)^2 q^a
          + sum_b (mu_b - r)^2 P_b / D_b p^a - sum_b w3^{ab} u^b,
    with P_b, Q_b the diagonal gradient and Hessian of u^b, D_b = -sigma_b^2 Q_b,
    and p^a, q^a the local ones.  The system reads u_s + H = 0.
    """
    from .nonlinear import NonlinearitySpec

    if spec.gamma != 0:
        raise InvalidParameter("the assembled Hamiltonian covers gamma = 0 only")
    m = spec.m
    ex = spec.mu - spec.r
    sg = spec.sigma

    def parts(diag):
        P = diag.grad[..., 0]
        Q = diag.hess[..., 0, 0]
        D = -sg**2 * Q
        return P, D

    def H(t, s, y, loc, diag):
        P, D = parts(diag)
        c2 = 0.5 * np.sum((sg * ex * P / D) ** 2, axis=-1)
        c1 = np.sum(ex**2 * P / D, axis=-1)
        w3 = _batch(spec.R, (m, m), t, s)
        return (c2[:, None] * loc.hess[..., 0, 0] + c1[:, None] * loc.grad[..., 0]
                - loc.value @ w3.T)

    def dH_local(t, s, y, loc, diag):
        P, D = parts(diag)
        Mn = y.shape[0]
        eye = np.eye(m)
        c2 = 0.5 * np.sum((sg * ex * P / D) ** 2, axis=-1)
        c1 = np.sum(ex**2 * P / D, axis=-1)
        w3 = _batch(spec.R, (m, m), t, s)
        return (np.broadcast_to(-w3, (Mn, m, m)), c1[:, None, None] * eye, c2[:, None, None] * eye)

    def dH_diag(t, s, y, loc, diag):
        P, D = parts(diag)
        p = loc.grad[..., 0]
        q = loc.hess[..., 0, 0]
        dP = (sg**2 * ex**2 * P / D**2)[:, None, :] * q[:, :, None] + (ex**2 / D)[:, None, :] * p[:, :, None]
        dQ = ((sg**2 * ex * P) ** 2 / D**3)[:, None, :] * q[:, :, None] \
            + (sg**2 * ex**2 * P / D**2)[:, None, :] * p[:, :, None]
        return (np.zeros_like(dP), dP, dQ)

    return NonlinearitySpec(m, H, dF_local=dH_local, dF_diag=dH_diag, name="exp-utility")


def exp_terminal(spec: ExpUtilitySpec):
    """g(t, y) = -T(t) exp(-eta y) as an (M, m) evaluator."""
    def g(t, y):
        return -np.exp(-spec.eta * np.asarray(y))[:, None] * _batch(spec.Tvec, (spec.m,), t)[None, :]
    return g


# ---------------------------------------------------------- power utility

def _vdiag(spec, s):
    v = _batch(spec.v, (spec.m, spec.m), s, s)
    return np.diagonal(v, axis1=-2, axis2=-1)


def power_ode_terms(spec: PowerUtilitySpec, psibar: Callable, t, s):
    """(A, f) of the linear system phi_s + A phi + f = 0 at (t, s)."""
    m, b = spec.m, spec.beta
    ps = np.asarray(psibar(s), dtype=float)
    if np.any(ps <= 0):
        raise DomainError("psibar must be positive for the fractional powers")
    ratio = ps / _vdiag(spec, s)
    if np.any(ratio <= 0):
        raise DomainError("psibar / v^{bb} must be positive")
    A = -_batch(spec.w, (m, m), t, s) + np.eye(m) * (spec.k - b * np.sum(ratio ** (1.0 / (b - 1.0))))
    f = _batch(spec.v, (m, m), t, s) @ ratio ** (b / (b - 1.0))
    return A, f


def _coefficient_fns(spec, spline):
    """Vectorised A(t-array, tau) and f(t-array, tau) for the RK4 sweeps."""
    m, b = spec.m, spec.beta

    def diag_term(tau):
        ratio = spline(tau) / _vdiag(spec, tau)
        if np.any(ratio <= 0):
            raise DomainError("nonpositive diagonal ratio during integration")
        return spec.k - b * np.sum(ratio ** (1.0 / (b - 1.0)), axis=-1), ratio

    def A(tt, tau):
        dterm, _ = diag_term(tau)
        return -_batch(spec.w, (m, m), tt, tau) + np.asarray(dterm)[..., None, None] * np.eye(m)

    def f(tt, tau):
        _, ratio = diag_term(tau)
        return np.einsum("...ab,...b->...a", _batch(spec.v, (m, m), tt, tau), ratio ** (b / (b - 1.0)))

    return A, f


def _spline(nodes, values):
    return CubicSpline(nodes, values, axis=0)


@dataclass(frozen=True)
class PowerDiagonal:
    nodes: np.ndarray
    values: np.ndarray            # (n, m)
    log: tuple                    # sup-norm updates per sweep
    converged: bool
    positivity_flags: tuple = ()

    def __call__(self, s):
        return _spline(self.nodes, self.values)(s)


def power_diagonal_fixed_point(spec: PowerUtilitySpec, n_nodes=201, tol=1e-12, max_iter=200, n_sub=8):
    """Picard iteration for psibar(s) = phi(s, s) on a uniform node set.

    Each sweep rebuilds the fundamental matrices chi(t_j, .) for all node
    times at once with RK4, then evaluates the Cauchy formula with
    composite Simpson quadrature on [s_j, T].
    """
    if n_nodes < 3:
        raise InvalidParameter("need at least 3 nodes")
    m, T = spec.m, spec.T
    nodes = np.linspace(0.0, T, n_nodes)
    g_nodes = _batch(spec.g, (m,), nodes)
    if np.any(g_nodes <= 0):
        raise DomainError("terminal data must be positive")
    psi = g_nodes.copy()
    log, flags = [], []
    rev = nodes[::-1]
    for sweep in range(1, max_iter + 1):
        spl = _spline(nodes, psi)
        Afn, ffn = _coefficient_fns(spec, spl)
        X = _rk4_nodes(lambda tau: Afn(nodes, tau), rev, n_sub, batch_shape=(n_nodes,))
        X = X[::-1]                      # X[l, j] = chi(t_j, tau_l)
        new = np.empty_like(psi)
        for j in range(n_nodes):
            X0 = X[j, j]
            new[j] = X0 @ g_nodes[j]
            if j < n_nodes - 1:
                tau = nodes[j:]
                fv = ffn(np.full(tau.shape, nodes[j]), tau)
                inner = np.linalg.solve(X[j:, j], fv[..., None])[..., 0]
                integrand = inner @ X0.T
                new[j] = new[j] + simpson(integrand, x=tau, axis=0)
        upd = float(np.max(np.abs(new - psi)))
        log.append(upd)
        if np.any(new <= 0):
            flags.append(sweep)
            raise PositivityLost(f"nonpositive diagonal iterate at sweep {sweep}", tuple(log))
        psi = new
        if upd < tol:
            return PowerDiagonal(nodes, psi, tuple(log), True, tuple(flags))
    raise NoConvergence(f"diagonal iteration did not reach tol={tol}",
                        PowerDiagonal(nodes, psi, tuple(log), False, tuple(flags)), tuple(log))


def power_full_solution(spec: PowerUtilitySpec, psibar: PowerDiagonal, t, s, n_quad=64, n_sub=8):
    """psi(t, s) from the Cauchy formula with the diagonal frozen."""
    if n_quad % 2:
        n_quad += 1
    m, T = spec.m, spec.T
    spl = _spline(psibar.nodes, psibar.values)
    Afn, ffn = _coefficient_fns(spec, spl)
    gt = _batch(spec.g, (m,), t)
    if s >= T:
        return gt
    nodes = np.linspace(T, s, n_quad + 1)
    X = _rk4_nodes(lambda tau: Afn(t, tau), nodes, n_sub)
    tr = _transitions(X[-1], X)
    fv = np.array([ffn(t, tk) for tk in nodes])
    integrand = np.einsum("kab,kb->ka", tr, fv)
    return X[-1] @ gt + simpson(integrand[::-1], x=nodes[::-1], axis=0)


def power_value(spec, psibar, t, s, y):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(y <= 0):
        raise DomainError("wealth must be positive")
    return power_full_solution(spec, psibar, t, s)[None, :] * y[:, None] ** spec.beta


def power_equilibrium(spec: PowerUtilitySpec, psibar, s, y):
    """(alpha, c, V) at wealth y > 0; arrays of shape (m,)."""
    if y <= 0:
        raise DomainError("wealth must be positive")
    ps = np.asarray(psibar(s), dtype=float)
    b = spec.beta
    alpha = (spec.mu - spec.r) / (spec.sigma**2 * (1 - b)) * y
    c = (_vdiag(spec, s) / ps) ** (1.0 / (1 - b)) * y
    V = ps * y**b
    return alpha, c, V


def merton_ode_oracle(spec: PowerUtilitySpec, s_eval, rtol=1e-13, atol=1e-15):
    """Scalar time-consistent reduction, integrated with an adaptive solver.

    phi' + k phi - beta phi (phi/v)^(1/(beta-1)) + v (phi/v)^(beta/(beta-1)) = 0,
    phi(T) = g, for m = 1 with t-independent v, g and w = 0.
    """
    from scipy.integrate import solve_ivp

    if spec.m != 1:
        raise InvalidParameter("the scalar oracle needs m = 1")
    b, k = spec.beta, spec.k
    v = float(_batch(spec.v, (1, 1), 0.0, 0.0)[0, 0])
    g = float(_batch(spec.g, (1,), spec.T)[0])

    def rhs(s, phi):
        x = phi / v
        return -(k * phi - b * phi * x ** (1 / (b - 1)) + v * x ** (b / (b - 1)))

    s_eval = np.atleast_1d(np.asarray(s_eval, dtype=float))
    order = np.argsort(-s_eval)
    sol = solve_ivp(rhs, (spec.T, float(s_eval.min())), [g], method="DOP853", rtol=rtol, atol=atol,
                    t_eval=s_eval[order], dense_output=False)
    out = np.empty_like(s_eval)
    out[order] = sol.y[0]
    return out


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    g0: float
    gamma: float
    lower_bound: Callable = field(repr=False)
    upper_bound: np.ndarray = field(repr=False, default=None)
    nodes: np.ndarray = field(repr=False, default=None)


def check_conditions_g0_gamma(spec: PowerUtilitySpec, n=201) -> ConditionReport:
    """Tightest constants g0, gamma for the positivity argument.

    g_hat^a(s) = g^a(s)/v^{aa}(s,s) exp(int_s^T k^a(s,tau) dtau) >= g0, and
    v_hat^{ab}(s,sig) = v^{ab}(s,sig)/v^{aa}(s,s) exp(int_s^sig k^a(s,tau)) >= exp(-gamma (sig - s)),
    with k^a = k - w^{aa}.  Requires w diagonal.
    """
    m, T = spec.m, spec.T
    nodes = np.linspace(0.0, T, n)
    S, TAU = np.meshgrid(nodes, nodes, indexing="ij")
    W = _batch(spec.w, (m, m), S, TAU)
    off = W - np.einsum("...ii->...i", W)[..., None] * np.eye(m)
    if np.max(np.abs(off)) > 0:
        raise HypothesisViolated("w must be diagonal")
    V = _batch(spec.v, (m, m), S, TAU)
    ka = spec.k - np.einsum("...ii->...i", W)              # (n, n, m): k^a(s_j, tau_l)
    cum = cumulative_simpson(ka, x=nodes, axis=1, initial=0.0)
    # int_{s_j}^{tau_l} k^a(s_j, tau) = cum[j, l] - cum[j, j]
    integ = cum - cum[np.arange(n), np.arange(n)][:, None, :]
    vss = _vdiag(spec, nodes)                               # (n, m)
    gvals = _batch(spec.g, (m,), nodes)
    ghat = gvals / vss * np.exp(integ[:, -1, :])
    g0 = float(ghat.min())
    gam = 0.0
    for j in range(n - 1):
        dtau = nodes[j + 1:] - nodes[j]
        vhat = V[j, j + 1:] / vss[j][None, None, :].transpose(0, 2, 1) * np.exp(integ[j, j + 1:, :])[:, :, None]
        if np.any(vhat <= 0):
            gam = np.inf
            break
        need = -np.log(vhat) / dtau[:, None, None]
        gam = max(gam, float(need.max()))
    passed = g0 > 0 and np.isfinite(gam)
    lower = lambda s: g0 * np.exp(-gam * (T - np.asarray(s)))
    upper = None
    if passed:
        c = g0 * np.exp(-gam * T)
        b = spec.beta
        upper = np.empty((n, m))
        for j in range(n):
            e = np.exp(integ[j, j:, :])                     # (n-j, m)
            gbar = gvals[j] / vss[j]
            vbar = V[j, j:] / vss[j][None, :, None]          # (n-j, a, b)
            first = np.exp(integ[j, -1, :]) * gbar
            if j < n - 1:
                integrand = e * vbar.sum(axis=-1) * c ** (b / (b - 1))
                upper[j] = first + simpson(integrand, x=nodes[j:], axis=0)
            else:
                upper[j] = first
    return ConditionReport(bool(passed), g0, gam, lower, upper, nodes)


def power_hjb_residual(spec: PowerUtilitySpec, psibar: PowerDiagonal, t, s, y, ds=1e-3):
    """Residual of the equilibrium HJB system for U = psi(t,s) y^beta.

    The s-derivative of psi is a fourth-order central difference; the
    y-derivatives are exact for the power profile.
    """
    m, b = spec.m, spec.beta
    y = np.atleast_1d(np.asarray(y, dtype=float))
    psi = lambda ss: power_full_solution(spec, psibar, t, ss)
    hs = min(ds, (spec.T - s) / 2.01, (s - t) / 2.01) if s > t else min(ds, (spec.T - s) / 2.01)
    if s - 2 * hs < t - 1e-15:
        raise InvalidParameter("need room for the centred difference in s")
    dpsi = (-psi(s + 2 * hs) + 8 * psi(s + hs) - 8 * psi(s - hs) + psi(s - 2 * hs)) / (12 * hs)
    ps = psi(s)
    diag = np.asarray(psibar(s), float)
    Uy_d = b * diag[None, :] * y[:, None] ** (b - 1)
    Uyy_d = b * (b - 1) * diag[None, :] * y[:, None] ** (b - 2)
    U = ps[None, :] * y[:, None] ** b
    Uy = b * ps[None, :] * y[:, None] ** (b - 1)
    Uyy = b * (b - 1) * ps[None, :] * y[:, None] ** (b - 2)
    Us = dpsi[None, :] * y[:, None] ** b
    ex, sg = spec.mu - spec.r, spec.sigma
    vss = _vdiag(spec, s)
    cons = (Uy_d / (b * vss)) ** (1 / (b - 1))
    a2 = 0.5 * np.sum(((ex * Uy_d) / (sg * Uyy_d)) ** 2, axis=-1)
    a1 = spec.r * y - np.sum(ex**2 * Uy_d / (sg**2 * Uyy_d) + cons, axis=-1)
    vts = _batch(spec.v, (m, m), t, s)
    wts = _batch(spec.w, (m, m), t, s)
    util = (Uy_d / (b * vss)) ** (b / (b - 1))
    res = Us + a2[:, None] * Uyy + a1[:, None] * Uy + util @ vts.T - U @ wts.T
    scale = np.abs(U) + np.abs(Us) + 1e-300
    return res, scale
