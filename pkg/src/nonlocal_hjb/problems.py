"""Ready-made problems with known solutions, shared by the CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linear import LinearSystemSpec, coeffs
from .nonlinear import NonlinearitySpec


@dataclass(frozen=True)
class Manufactured:
    spec: object
    exact: Callable          # (t, s, y) -> (M, m)
    g: Callable              # (t, y) -> (M, m)


def manufactured_linear(B: float = 1.0) -> Manufactured:
    """u_s = u_yy + B u(s, s, y) + f with u*(t, s, y) = (1 + t) s sin y."""
    exact = lambda t, s, y: ((1 + t) * s * np.sin(y))[:, None]

    def f(t, s, y):
        return ((1 + t) * np.sin(y) + (1 + t) * s * np.sin(y) - B * (1 + s) * s * np.sin(y))[:, None]

    g = lambda t, y: np.zeros((len(y), 1))
    spec = LinearSystemSpec(1, coeffs(0, 0, 1), coeffs(B, 0, 0), f, g, exact=exact)
    return Manufactured(spec, exact, g)


def manufactured_nonlinear(eps: float = 0.2, kappa: float = 0.3, nu: float = 0.1) -> Manufactured:
    """Forward nonlocal problem with solution u*(t, s, y) = (1 + t/2) cos(s) sin(y).

    F = (1 + eps / (1 + P^2)) u_yy + kappa sin(V) + nu u u_y + f, where V and
    P are the diagonal value and gradient.  Analytic jet derivatives.
    """
    a = lambda t: 1 + 0.5 * t
    u = lambda t, s, y: a(t) * np.cos(s) * np.sin(y)
    uy = lambda t, s, y: a(t) * np.cos(s) * np.cos(y)

    def f(t, s, y):
        us = -a(t) * np.sin(s) * np.sin(y)
        P = uy(s, s, y)
        rhs = (1 + eps / (1 + P**2)) * (-u(t, s, y)) + kappa * np.sin(u(s, s, y)) + nu * u(t, s, y) * uy(t, s, y)
        return us - rhs

    def F(t, s, y, loc, dg):
        P = dg.grad[..., 0]
        V = dg.value
        return ((1 + eps / (1 + P**2)) * loc.hess[..., 0, 0] + kappa * np.sin(V)
                + nu * loc.value * loc.grad[..., 0] + f(t, s, y)[:, None])

    def dF_local(t, s, y, loc, dg):
        P = dg.grad[..., 0]
        return (nu * loc.grad[..., 0][..., None], nu * loc.value[..., None], (1 + eps / (1 + P**2))[..., None])

    def dF_diag(t, s, y, loc, dg):
        P = dg.grad[..., 0]
        c1 = -2 * eps * P / (1 + P**2) ** 2 * loc.hess[..., 0, 0]
        return (kappa * np.cos(dg.value)[..., None], c1[..., None], np.zeros_like(P)[..., None])

    spec = NonlinearitySpec(1, F, dF_local, dF_diag, name="manufactured-nonlinear")
    exact = lambda t, s, y: u(t, s, y)[:, None]
    g = lambda t, y: u(t, 0.0, y)[:, None]
    return Manufactured(spec, exact, g)


def time_consistent_nonlinear(c: float = 0.5) -> Manufactured:
    """t-independent forward problem u_s = (1 + c tanh(u_y(s,s))^2) u_yy - c u(s,s)^3 / 3."""

    def F(t, s, y, loc, dg):
        return (1 + c * np.tanh(dg.grad[..., 0]) ** 2) * loc.hess[..., 0, 0] - c * dg.value**3 / 3

    g = lambda t, y: (np.cos(y) * 0.5 + 0.25 * np.sin(2 * y))[:, None]
    return Manufactured(NonlinearitySpec(1, F, name="time-consistent"), None, g)


def growth_test_functions():
    """Five smooth fields phi(s, y) of increasing growth in |y|."""
    return {
        "bounded-sine": lambda s, y: (1 + s) * np.sin(y),
        "bump": lambda s, y: np.exp(-y**2) * np.cos(s),
        "sqrt-growth": lambda s, y: (1 + y**2) ** 0.25 * (1 + 0.5 * s),
        "quadratic": lambda s, y: y**2 * (1 + s) / 4,
        "mild-exponential": lambda s, y: np.exp(0.3 * np.sqrt(1 + y**2)) * (2 - s),
    }
