"""Discrete parabolic Holder norms, plain and exponentially weighted.

Only second-order operators are supported, so the anisotropy exponent is
fixed (time regularity counts half of space regularity).  Hessians and
gradients are measured in the Euclidean norm of the whole array, and the
Holder quotients run over node pairs at distance at most ``rho0``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameter
from .grid import FORWARD, FlowField, derivatives_1d, spatial_jet


@dataclass(frozen=True)
class WeightSpec:
    S: np.ndarray = field(default=None)
    rho0: float = 1.0
    alpha: float = 0.5
    d: int = 1

    def __post_init__(self):
        S = 0.1 * np.eye(self.d) if self.S is None else np.atleast_2d(np.asarray(self.S, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise InvalidParameter("S must be square")
        if not np.allclose(S, S.T, rtol=0, atol=1e-14):
            raise InvalidParameter("S must be symmetric")
        lam = np.linalg.eigvalsh(S)
        if lam[0] <= 0:
            raise InvalidParameter("S must be positive definite")
        if not self.rho0 > 0:
            raise InvalidParameter("rho0 must be positive")
        if not 0 < self.alpha < 1:
            raise InvalidParameter("alpha must lie in (0, 1)")
        S = S.copy()
        S.flags.writeable = False
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "d", S.shape[0])

    @property
    def lambda_low(self) -> float:
        return float(np.linalg.eigvalsh(self.S)[0])

    @property
    def lambda_high(self) -> float:
        return float(np.linalg.eigvalsh(self.S)[-1])

    def rho(self, y: np.ndarray) -> np.ndarray:
        """Weight exp(1 + <Sy, y>^(1/2)) at points y of shape (..., d)."""
        y = np.asarray(y, dtype=float)
        q = np.einsum("...i,ij,...j->...", y, self.S, y)
        return np.exp(1.0 + np.sqrt(np.maximum(q, 0.0)))


def equivalence_constant(spec: WeightSpec) -> float:
    """Constant C = exp(lambda_high * rho0) used in the equivalence checks."""
    return float(np.exp(spec.lambda_high * spec.rho0))


def sharp_equivalence_constant(spec: WeightSpec) -> float:
    """Smallest constant the weight-switching step actually needs.

    |1 - rho(y)/rho(y')| <= sqrt(lambda_high) |y - y'|, and the quotient
    carries |y - y'|^alpha, which leaves sqrt(lambda_high) rho0^(1 - alpha).
    """
    return float(np.sqrt(spec.lambda_high) * spec.rho0 ** (1.0 - spec.alpha))


def _parse_order(order, alpha) -> str:
    if isinstance(order, str):
        key = order.replace(" ", "").lower()
        if key in ("alpha", "a"):
            return "alpha"
        if key in ("2+alpha", "2+a"):
            return "2+alpha"
        raise InvalidParameter(f"unsupported order {order!r}")
    if np.isclose(order, alpha):
        return "alpha"
    if np.isclose(order, 2 + alpha):
        return "2+alpha"
    raise InvalidParameter(f"unsupported order {order}; use alpha or 2+alpha")


def _euclid(a: np.ndarray, ncomp: int) -> np.ndarray:
    if ncomp == 0:
        return np.abs(a)
    return np.sqrt(np.sum(a * a, axis=tuple(range(-ncomp, 0))))


def _y_offsets(h, rho0):
    d = len(h)
    reach = [int(np.floor(rho0 / hj + 1e-12)) for hj in h]
    out = []
    for o in itertools.product(*[range(-r, r + 1) for r in reach]):
        # one of each +/- pair: first nonzero entry positive
        nz = [v for v in o if v != 0]
        if not nz or nz[0] < 0:
            continue
        dist = float(np.sqrt(sum((v * hj) ** 2 for v, hj in zip(o, h))))
        if dist <= rho0 * (1 + 1e-12):
            out.append((o, dist))
    return out


def _shift_pair(a, o, first_axis):
    """Views a[y] and a[y + o] over the overlapping region."""
    lo, hi = [slice(None)] * a.ndim, [slice(None)] * a.ndim
    for j, v in enumerate(o):
        ax = first_axis + j
        n = a.shape[ax]
        if v >= 0:
            lo[ax], hi[ax] = slice(0, n - v), slice(v, n)
        else:
            lo[ax], hi[ax] = slice(-v, n), slice(0, n + v)
    return a[tuple(lo)], a[tuple(hi)]


def _y_quotient(f, ncomp, h, rho0, alpha, minw=None):
    """sup |f(y) - f(y')| / |y - y'|^alpha, optionally times min(1/rho)."""
    best = 0.0
    for o, dist in _y_offsets(h, rho0):
        a, b = _shift_pair(f, o, 1)
        q = _euclid(b - a, ncomp) / dist**alpha
        if minw is not None:
            wa, wb = _shift_pair(minw, o, 0)
            q = q * np.minimum(wa, wb)
        if q.size:
            best = max(best, float(q.max()))
    return best


def _s_quotient(f, ncomp, s, rho0, expo):
    best = 0.0
    n = f.shape[0]
    for off in range(1, n):
        ds = s[off:] - s[:-off]
        if ds.min() > rho0 * (1 + 1e-12):
            break
        q = _euclid(f[off:] - f[:-off], ncomp)
        q = q.reshape(q.shape[0], -1).max(axis=1) / ds**expo
        q = q[ds <= rho0 * (1 + 1e-12)]
        if q.size:
            best = max(best, float(q.max()))
    return best


def _s_derivative(phi, s):
    n = phi.shape[0]
    if n == 1:
        return np.zeros_like(phi)
    return np.gradient(phi, s, axis=0, edge_order=2 if n >= 3 else 1)


def _terms(phi, s, h, level, boundary):
    """Derivative arrays with their number of trailing component axes."""
    out = {"u": (phi, 0)}
    if level == "2+alpha":
        grad, hess = spatial_jet(phi[..., None], h, boundary)
        out["y"] = (grad[..., 0, :], 1)
        out["yy"] = (hess[..., 0, :, :], 2)
        out["s"] = (_s_derivative(phi, s), 0)
    return out


def holder_norm(phi, s, h, order="2+alpha", alpha=0.5, rho0=1.0, boundary="one-sided",
                weight=None, form=1):
    """Norm of a scalar slice ``phi`` of shape (n_s, M, ..., M).

    ``weight`` is an array of rho values on the spatial grid, or None for
    the unweighted norm (all forms then coincide).
    """
    level = _parse_order(order, alpha)
    if form not in (1, 2, 3):
        raise InvalidParameter(f"unknown norm form {form}")
    phi = np.asarray(phi, dtype=float)
    s = np.asarray(s, dtype=float)
    h = tuple(h)
    if weight is None:
        form, inv = 2, None
    else:
        inv = 1.0 / np.asarray(weight, dtype=float)
    if form == 1 and inv is not None:
        phi = phi * inv
        inv = None
    terms = _terms(phi, s, h, level, boundary)

    def scaled(key):
        f, nc = terms[key]
        if inv is None:
            return f, nc
        w = inv.reshape((1,) + inv.shape + (1,) * nc)
        return f * w, nc

    total = 0.0
    for key in terms:
        f, nc = scaled(key)
        total += float(_euclid(f, nc).max())
    top = ["u"] if level == "alpha" else ["yy", "s"]
    for key in top:
        if form == 3:
            f, nc = terms[key]
            total += _y_quotient(f, nc, h, rho0, alpha, minw=inv)
        else:
            f, nc = scaled(key)
            total += _y_quotient(f, nc, h, rho0, alpha)
    if level == "alpha":
        squot = [("u", alpha / 2)]
    else:
        squot = [("y", (1 + alpha) / 2), ("yy", alpha / 2), ("s", alpha / 2)]
    for key, ex in squot:
        f, nc = scaled(key)
        total += _s_quotient(f, nc, s, rho0, ex)
    return total


def weighted_holder_norm(phi, s, axes, form=1, spec: WeightSpec | None = None, order="2+alpha",
                         boundary="one-sided"):
    """Weighted norm of a slice phi(s, y) sampled on ``s`` and the ``axes`` grid."""
    spec = spec if spec is not None else WeightSpec(d=len(axes))
    axes = [np.asarray(a, dtype=float) for a in axes]
    h = tuple(float(a[1] - a[0]) for a in axes)
    y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return holder_norm(phi, s, h, order, spec.alpha, spec.rho0, boundary, spec.rho(y), form)


def equivalence_sup_terms(phi, s, axes, spec: WeightSpec, order="2+alpha", boundary="one-sided"):
    """Sup of |D phi / rho| over the top-order derivatives D.

    This is the quantity that the weight-switching inequalities multiply
    by the constant C when moving between forms 2 and 3.
    """
    level = _parse_order(order, spec.alpha)
    axes = [np.asarray(a, dtype=float) for a in axes]
    h = tuple(float(a[1] - a[0]) for a in axes)
    y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    inv = 1.0 / spec.rho(y)
    terms = _terms(np.asarray(phi, float), np.asarray(s, float), h, level, boundary)
    keys = ["u"] if level == "alpha" else ["yy", "s"]
    total = 0.0
    for key in keys:
        f, nc = terms[key]
        total += float(_euclid(f * inv.reshape((1,) + inv.shape + (1,) * nc), nc).max())
    return total


def equivalence_report(phi, s, axes, spec: WeightSpec, order="2+alpha"):
    """Evaluate the three forms and the explicit-constant bounds between them.

    Returns a dict with the norms, the constant, and a list of
    ``(i, j, lhs, bound, ok)`` rows meaning form i <= bound built from form j.
    """
    C = equivalence_constant(spec)
    norms = {k: weighted_holder_norm(phi, s, axes, k, spec, order) for k in (1, 2, 3)}
    sup_top = equivalence_sup_terms(phi, s, axes, spec, order)
    level = _parse_order(order, spec.alpha)
    rows = []
    pairs = [(2, 3), (3, 2)]
    if level == "alpha":
        pairs += [(1, 2), (2, 1), (1, 3), (3, 1)]
    for i, j in pairs:
        lhs = norms[i]
        if {i, j} == {1, 2}:
            bound = norms[j] * (1 + 1e-12)
        else:
            bound = norms[j] + C * sup_top
        rows.append((i, j, lhs, bound, lhs <= bound + 1e-12 * max(1.0, bound)))
    # the additive form also gives the multiplicative one
    for i, j, lhs, _, _ in list(rows):
        rows.append((i, j, lhs, (1 + C) * norms[j], lhs <= (1 + C) * norms[j] * (1 + 1e-12)))
    return {"norms": norms, "C": C, "sup_top": sup_top, "checks": rows}


def _t_derivative(vals, times, mask):
    """d/dt of a field using admissible neighbours only.

    Near the corner of the triangle no second-order t-stencil exists; there
    the derivative is extrapolated quadratically along s from the nearest
    second-order values of the same row.
    """
    n = vals.shape[0]
    out = np.zeros_like(vals)
    good = np.zeros(mask.shape, dtype=bool)
    dt = times[1] - times[0]
    for i in range(n):
        ks = np.nonzero(mask[i])[0]
        for k in ks:
            up1 = i + 1 < n and mask[i + 1, k]
            dn1 = i - 1 >= 0 and mask[i - 1, k]
            up2 = i + 2 < n and mask[i + 2, k]
            dn2 = i - 2 >= 0 and mask[i - 2, k]
            good[i, k] = True
            if up1 and dn1:
                out[i, k] = (vals[i + 1, k] - vals[i - 1, k]) / (2 * dt)
            elif up1 and up2:
                out[i, k] = (-3 * vals[i, k] + 4 * vals[i + 1, k] - vals[i + 2, k]) / (2 * dt)
            elif dn1 and dn2:
                out[i, k] = (3 * vals[i, k] - 4 * vals[i - 1, k] + vals[i - 2, k]) / (2 * dt)
            else:
                good[i, k] = False
                if up1:
                    out[i, k] = (vals[i + 1, k] - vals[i, k]) / dt
                elif dn1:
                    out[i, k] = (vals[i, k] - vals[i - 1, k]) / dt
    for i, k in zip(*np.nonzero(mask & ~good)):
        for step in (-1, 1):
            ref = [k + step * j for j in range(1, 6)]
            src = [r for r in ref if 0 <= r < n and good[i, r]][:3]
            if len(src) == 3 and src == [src[0] + step * j for j in range(3)]:
                dist = abs(src[0] - k)
                x = np.array([0.0, 1.0, 2.0]) + dist
                w = [np.prod([(0 - x[b]) / (x[a] - x[b]) for b in range(3) if b != a]) for a in range(3)]
                out[i, k] = sum(wa * out[i, r] for wa, r in zip(w, src))
                break
    return out


def field_norm(u: FlowField, order="2+alpha", weight: WeightSpec | None = None, form=1,
               alpha=None, rho0=None, include_t=True, boundary="one-sided"):
    """sup over t of sum_a ( |u^a(t)| + |u^a_t(t)| ) on the admissible s-range."""
    g = u.grid
    alpha = weight.alpha if alpha is None and weight is not None else (0.5 if alpha is None else alpha)
    rho0 = weight.rho0 if rho0 is None and weight is not None else (1.0 if rho0 is None else rho0)
    wvals = weight.rho(g.mesh()) if weight is not None else None
    times = g.times
    mask = g.mask()
    vals = u.values
    ut = _t_derivative(vals, times, mask) if include_t else None
    best = 0.0
    for i in range(g.N + 1):
        ks = np.nonzero(mask[i])[0]
        sl = slice(ks[0], ks[-1] + 1)
        total = 0.0
        for a in range(u.m):
            total += holder_norm(vals[i, sl, ..., a], times[sl], g.h, order, alpha, rho0, boundary, wvals, form)
            if include_t:
                total += holder_norm(ut[i, sl, ..., a], times[sl], g.h, order, alpha, rho0, boundary, wvals, form)
        best = max(best, total)
    return best
