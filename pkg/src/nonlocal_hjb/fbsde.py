"""Monte-Carlo checks of the nonlocal Feynman-Kac representation.

Given a solution u(t, s, y) of the backward system u_s + F = 0 on a grid,
the processes

    Y(t, s) = u(t, s, X(s)),   Z(t, s) = sigma^T u_y(t, s, X(s))

along paths of dX = b ds + sigma dW should satisfy

    Y(t, t) = g(t, X(T)) + int_t^T Fbar ds - int_t^T Z dW,
    Z(t, s) = Z(t, t) + int_t^s A dtau + int_t^s Gamma dW,

with Fbar = F - 1/2 sigma sigma^T u_yy - b u_y.  Everything here is one
dimensional in space; the Brownian motion may have several components.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.special import ndtri

from .errors import CensorLimit, InvalidParameter
from .grid import FlowField, derivatives_1d, extract_diagonal
from .nonlinear import Jet, NonlinearitySpec

CENSOR_LIMIT = 0.2


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 10_000
    n_steps: int = 200
    seed: int = 0
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if self.n_paths < 100:
            raise InvalidParameter("n_paths must be at least 100")
        if self.n_steps < 10:
            raise InvalidParameter("n_steps must be at least 10")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameter("seed must be an unsigned 64-bit integer")
        if self.scheme != "euler-maruyama":
            raise InvalidParameter(f"unknown scheme {self.scheme!r}")


def brownian_increments(seed: int, step: int, n_paths: int, k: int, dt: float) -> np.ndarray:
    """Increments for one step, (n_paths, k).

    A Philox stream keyed by (seed, step) supplies one 64-bit word per
    normal, mapped through the inverse normal CDF, so path p always reads
    the same words regardless of the ensemble size.
    """
    bg = np.random.Philox(key=np.array([int(seed), int(step)], dtype=np.uint64))
    raw = bg.random_raw(n_paths * k).astype(np.uint64)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return np.sqrt(dt) * ndtri(u).reshape(n_paths, k)


@dataclass(frozen=True)
class Paths:
    times: np.ndarray      # (n_steps + 1,)
    X: np.ndarray          # (n_paths, n_steps + 1, d)
    dW: np.ndarray         # (n_paths, n_steps, k)


def simulate_paths(b: Callable, sigma: Callable, y0, t0: float, T: float, cfg: McConfig,
                   k: Optional[int] = None) -> Paths:
    """Euler-Maruyama paths of dX = b(s, X) ds + sigma(s, X) dW.

    ``b`` returns (P, d) or a scalar, ``sigma`` returns (P, d, k) or a scalar.
    """
    if not T > t0:
        raise InvalidParameter("need T > t0")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    d, P, n = y0.size, cfg.n_paths, cfg.n_steps
    times = t0 + (T - t0) * np.arange(n + 1) / n
    X = np.empty((P, n + 1, d))
    X[:, 0] = y0
    sig0 = np.asarray(sigma(times[0], X[:, 0]), dtype=float)
    if k is None:
        k = sig0.shape[-1] if sig0.ndim == 3 else 1
    dW = np.empty((P, n, k))
    for j in range(n):
        dt = times[j + 1] - times[j]
        s, x = times[j], X[:, j]
        dW[:, j] = brownian_increments(cfg.seed, j, P, k, dt)
        drift = np.broadcast_to(np.asarray(b(s, x), dtype=float), (P, d))
        sg = np.broadcast_to(np.asarray(sigma(s, x), dtype=float), (P, d, k))
        X[:, j + 1] = x + drift * dt + np.einsum("pdk,pk->pd", sg, dW[:, j])
    return Paths(times, X, dW)


def censor_mask(X: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """True for paths that stay inside [lo, hi] at every recorded time."""
    flat = X.reshape(X.shape[0], -1)
    return np.all((flat >= lo) & (flat <= hi), axis=1)


class FkJet(NamedTuple):
    value: np.ndarray    # (P, m)
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray
    grad_s: np.ndarray


def _lerp(field_, k0, k1, ws, j0, wy):
    a = (1 - wy)[:, None] * field_[k0, j0] + wy[:, None] * field_[k0, j0 + 1]
    if ws == 0.0:
        return a
    b = (1 - wy)[:, None] * field_[k1, j0] + wy[:, None] * field_[k1, j0 + 1]
    return (1 - ws) * a + ws * b


class RowInterpolator:
    """Bilinear (s, y) interpolation of a row u(t_i, ., .) and its jets.

    ``values`` has shape (N+1, M, m) over all s-nodes; only nodes with
    s >= s_min are used.
    """

    def __init__(self, values, times, y, h, s_min=None, stencil="one-sided"):
        self.times = np.asarray(times, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.h = float(h)
        self.dt = self.times[1] - self.times[0]
        k_min = 0 if s_min is None else int(round((s_min - self.times[0]) / self.dt))
        self.k_min = k_min
        V = np.asarray(values, dtype=float)
        d1, d2 = derivatives_1d(V, h, 1, stencil)
        d3, _ = derivatives_1d(d2, h, 1, stencil)
        ds = np.zeros_like(d1)
        seg = d1[k_min:]
        if seg.shape[0] >= 3:
            ds[k_min:] = np.gradient(seg, self.dt, axis=0, edge_order=2)
        elif seg.shape[0] == 2:
            ds[k_min:] = (seg[1] - seg[0]) / self.dt
        self.fields = (V, d1, d2, d3, ds)

    def locate(self, s, X):
        kf = (s - self.times[0]) / self.dt
        k0 = int(np.floor(kf + 1e-9))
        k0 = min(max(k0, self.k_min), len(self.times) - 1)
        ws = float(kf - k0)
        if abs(ws) < 1e-9 or k0 == len(self.times) - 1:
            ws = 0.0
        k1 = min(k0 + 1, len(self.times) - 1)
        jf = (np.asarray(X, dtype=float) - self.y[0]) / self.h
        j0 = np.clip(np.floor(jf).astype(int), 0, len(self.y) - 2)
        wy = jf - j0
        return k0, k1, ws, j0, wy

    def __call__(self, s, X) -> FkJet:
        loc = self.locate(s, X)
        return FkJet(*[_lerp(f, *loc) for f in self.fields])


class DiagonalInterpolator(RowInterpolator):
    """Interpolation of the diagonal u(s, s, .) built from ``extract_diagonal``."""

    def __init__(self, u: FlowField, stencil="one-sided"):
        diag = extract_diagonal(u, stencil)
        super().__init__(diag.value, u.grid.times, u.grid.axis(0), u.grid.h[0], None, stencil)
        V, _, _, d3, ds = self.fields
        # value, gradient and Hessian come straight from the diagonal field
        self.fields = (diag.value, diag.grad[..., 0], diag.hess[..., 0, 0], d3, ds)


@dataclass(frozen=True)
class FkBundle:
    u: FlowField                        # backward orientation
    sigma: Callable                     # (s, y (P,)) -> (P, k) or scalar
    b: Callable                         # (s, y (P,)) -> (P,) or scalar
    F: NonlinearitySpec                 # backward: u_s + F = 0
    g: Optional[Callable] = None        # (t, y) -> (P, m); defaults to u(t, T, .)
    y0: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        if self.u.grid.d != 1:
            raise InvalidParameter("Feynman-Kac checks support d = 1")


def _sigma_vals(bundle, s, X):
    sg = np.asarray(bundle.sigma(s, X), dtype=float)
    P = X.shape[0]
    if sg.ndim == 0:
        return np.full((P, 1), float(sg))
    if sg.ndim == 1:
        return np.broadcast_to(sg, (P,))[:, None]
    return np.broadcast_to(sg, (P, sg.shape[-1]))


def _sigma_derivs(bundle, s, X):
    e = 1e-5 * (1.0 + np.abs(X))
    sg = _sigma_vals(bundle, s, X)
    sp, sm = _sigma_vals(bundle, s, X + e), _sigma_vals(bundle, s, X - e)
    sy = (sp - sm) / (2 * e[:, None])
    syy = (sp - 2 * sg + sm) / (e[:, None] ** 2)
    es = 1e-5
    ss = (_sigma_vals(bundle, s + es, X) - _sigma_vals(bundle, s - es, X)) / (2 * es)
    return sg, sy, syy, ss


def _drift(bundle, s, X):
    return np.broadcast_to(np.asarray(bundle.b(s, X), dtype=float), X.shape)


def fk_fields(bundle: FkBundle, X, t, s, row: Optional[RowInterpolator] = None):
    """(Y, Z, Gamma, A) at states X (P,) for the pair (t, s).

    Z is (P, m, k), Gamma (P, m, k, k), A (P, m, k).
    """
    X = np.atleast_1d(np.asarray(X, dtype=float))
    if row is None:
        row = _row(bundle, t)
    jet = row(s, X)
    sg, sy, syy, ss = _sigma_derivs(bundle, s, X)
    b = _drift(bundle, s, X)
    uy, uyy, uyyy, uys = jet.grad, jet.hess, jet.third, jet.grad_s
    Z = uy[:, :, None] * sg[:, None, :]
    phi_y = sy[:, None, :] * uy[:, :, None] + sg[:, None, :] * uyy[:, :, None]
    phi_yy = syy[:, None, :] * uy[:, :, None] + 2 * sy[:, None, :] * uyy[:, :, None] + sg[:, None, :] * uyyy[:, :, None]
    phi_s = ss[:, None, :] * uy[:, :, None] + sg[:, None, :] * uys[:, :, None]
    a2 = np.sum(sg**2, axis=-1)
    A = phi_s + 0.5 * a2[:, None, None] * phi_yy + b[:, None, None] * phi_y
    Gamma = phi_y[..., :, None] * sg[:, None, None, :]
    return jet.value, Z, Gamma, A


def _row(bundle, t):
    grid = bundle.u.grid
    i = int(round(t / grid.dt))
    if abs(grid.times[i] - t) > 1e-12:
        raise InvalidParameter("t must be a time node of the grid")
    return RowInterpolator(bundle.u.values[i], grid.times, grid.axis(0), grid.h[0], s_min=grid.times[i])


@dataclass(frozen=True)
class ResidualStats:
    mean: np.ndarray
    std_error: np.ndarray
    n: int
    censored: int
    t: float = 0.0
    breakdown: tuple = field(default=(), repr=False)   # (s, mean, std_error) per step
    max_abs: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean", "std_error", "n", "censored"])
            for mu, se in zip(np.ravel(self.mean), np.ravel(self.std_error)):
                w.writerow([repr(float(self.t)), repr(float(mu)), repr(float(se)), self.n, self.censored])


def _stats(R, ok, t, breakdown=()):
    D = R[ok].reshape(int(ok.sum()), -1)
    n = D.shape[0]
    mean = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(D.shape[1], np.inf)
    mx = float(np.max(np.abs(D))) if D.size else 0.0
    return ResidualStats(mean, se, n, int((~ok).sum()), float(t), tuple(breakdown), mx)


def _prepare(bundle: FkBundle, cfg: McConfig, t: float):
    grid = bundle.u.grid
    if not bundle.t0 <= t < grid.T:
        raise InvalidParameter("need t0 <= t < T")
    X0 = np.atleast_1d(np.asarray(bundle.y0, dtype=float))
    paths = simulate_paths(lambda s, X: _drift(bundle, s, X[:, 0])[:, None],
                           lambda s, X: _sigma_vals(bundle, s, X[:, 0])[:, None, :],
                           X0, bundle.t0, grid.T, cfg)
    jt = np.flatnonzero(np.abs(paths.times - t) < 1e-12)
    if jt.size != 1:
        raise InvalidParameter("t must coincide with a path time")
    X = paths.X[..., 0]
    yax = grid.axis(0)
    ok = censor_mask(X[:, jt[0]:], yax[0], yax[-1])
    frac = float((~ok).mean())
    if frac > CENSOR_LIMIT:
        raise CensorLimit(f"{frac:.1%} of paths left the box", int((~ok).sum()), X.shape[0])
    return paths, int(jt[0]), X, ok


def bsde_residual(bundle: FkBundle, cfg: McConfig, t: float) -> ResidualStats:
    """Per-path residual of the backward equation for Y(t, .) on [t, T]."""
    paths, j0, X, ok = _prepare(bundle, cfg, t)
    row = _row(bundle, t)
    dia = DiagonalInterpolator(bundle.u)
    m = bundle.u.m
    taus = paths.times
    P = X.shape[0]
    Xc = np.where(ok[:, None], X, bundle.y0)       # censored paths are evaluated harmlessly
    Y_tt, Z0, _, _ = fk_fields(bundle, Xc[:, j0], t, t, row)
    if bundle.g is None:
        gT = row(taus[-1], Xc[:, -1]).value
    else:
        gT = np.asarray(bundle.g(t, Xc[:, -1]), dtype=float).reshape(P, m)
    acc = np.zeros((P, m))
    breakdown = []
    Yn = Y_tt
    for n in range(j0, len(taus) - 1):
        s, dtau = taus[n], taus[n + 1] - taus[n]
        x = Xc[:, n]
        jl = row(s, x)
        jd = dia(s, x)
        sg = _sigma_vals(bundle, s, x)
        b = _drift(bundle, s, x)
        loc = Jet(jl.value, jl.grad[..., None], jl.hess[..., None, None])
        dg = Jet(jd.value, jd.grad[..., None], jd.hess[..., None, None])
        Fv = np.asarray(bundle.F.F(t, s, x, loc, dg), dtype=float)
        Fbar = Fv - 0.5 * np.sum(sg**2, axis=-1)[:, None] * jl.hess - b[:, None] * jl.grad
        ZdW = jl.grad * np.einsum("pk,pk->p", sg, paths.dW[:, n])[:, None]
        acc += Fbar * dtau - ZdW
        Ynext = row(taus[n + 1], Xc[:, n + 1]).value
        inc = (Yn - Ynext - Fbar * dtau + ZdW)[ok]
        breakdown.append((float(s), float(inc.mean()), float(inc.std(ddof=1) / np.sqrt(max(len(inc), 1)))))
        Yn = Ynext
    R = Y_tt - (gT + acc)
    return _stats(R, ok, t, breakdown)


def z_dynamics_residual(bundle: FkBundle, cfg: McConfig, t: float) -> ResidualStats:
    """Per-path residual Z(t,T) - Z(t,t) - int A - int Gamma dW over [t, T]."""
    paths, j0, X, ok = _prepare(bundle, cfg, t)
    row = _row(bundle, t)
    taus = paths.times
    Xc = np.where(ok[:, None], X, bundle.y0)
    _, Z0, _, _ = fk_fields(bundle, Xc[:, j0], t, taus[j0], row)
    acc = np.zeros_like(Z0)
    for n in range(j0, len(taus) - 1):
        s, dtau = taus[n], taus[n + 1] - taus[n]
        _, _, G, A = fk_fields(bundle, Xc[:, n], t, s, row)
        acc += A * dtau + np.einsum("pmij,pj->pmi", G, paths.dW[:, n])
    _, ZT, _, _ = fk_fields(bundle, Xc[:, -1], t, taus[-1], row)
    return _stats(ZT - Z0 - acc, ok, t)
