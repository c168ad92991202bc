"""Three-point stencil operators on 1-D grids for m-component systems.

An operator is stored as weights ``W[p, j, a, o, b]``: slice p, node j,
equation a, neighbour offset o in (-1, 0, +1), unknown b.  Several slices
are solved together as one block-diagonal banded system.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .errors import SingularSliceSystem

NEUMANN = "neumann"
DIRICHLET = "dirichlet"


def stencil_weights(c0, c1, c2, h, boundary=NEUMANN):
    """Weights of sum_j c_j d^j/dy^j with central differences.

    ``c*`` have shape (P, M, m, m).  Under Neumann closure the ghost value
    u[-1] = u[1] is folded in; under Dirichlet the boundary rows are zero
    (the caller imposes values there).
    """
    c0, c1, c2 = np.broadcast_arrays(c0, c1, c2)
    W = np.empty(c0.shape[:3] + (3,) + c0.shape[3:])
    W[:, :, :, 0, :] = c2 / h**2 - c1 / (2 * h)
    W[:, :, :, 1, :] = c0 - 2 * c2 / h**2
    W[:, :, :, 2, :] = c2 / h**2 + c1 / (2 * h)
    if boundary == NEUMANN:
        W[:, 0, :, 2, :] += W[:, 0, :, 0, :]
        W[:, 0, :, 0, :] = 0.0
        W[:, -1, :, 0, :] += W[:, -1, :, 2, :]
        W[:, -1, :, 2, :] = 0.0
    else:
        W[:, 0] = 0.0
        W[:, -1] = 0.0
    return W


def apply(W, U):
    """Apply stencil weights to U of shape (P, M, m)."""
    out = np.einsum("pjab,pjb->pja", W[:, :, :, 1, :], U)
    out[:, 1:] += np.einsum("pjab,pjb->pja", W[:, 1:, :, 0, :], U[:, :-1])
    out[:, :-1] += np.einsum("pjab,pjb->pja", W[:, :-1, :, 2, :], U[:, 1:])
    return out


def system_weights(W, scale, boundary=NEUMANN):
    """Weights of I - scale * W, with identity rows at Dirichlet nodes."""
    S = -scale * W
    m = W.shape[2]
    eye = np.eye(m)
    S[:, :, :, 1, :] += eye
    if boundary == DIRICHLET:
        S[:, 0] = 0.0
        S[:, -1] = 0.0
        S[:, 0, :, 1, :] = eye
        S[:, -1, :, 1, :] = eye
    return S


_index_cache: dict = {}


def _band_index(P, M, m):
    key = (P, M, m)
    if key not in _index_cache:
        p, j, a, o, b = np.meshgrid(np.arange(P), np.arange(M), np.arange(m), np.arange(3),
                                    np.arange(m), indexing="ij")
        row = (p * M + j) * m + a
        nb = j + o - 1
        col = (p * M + nb) * m + b
        ok = (nb >= 0) & (nb < M)
        off = col - row
        _index_cache[key] = (ok, row, col, off)
    return _index_cache[key]


def to_banded(S):
    P, M, m = S.shape[:3]
    ok, row, col, off = _band_index(P, M, m)
    bw = 2 * m - 1
    ab = np.zeros((2 * bw + 1, P * M * m))
    ab[bw - off[ok], col[ok]] = S[ok]
    return ab, bw


def solve(S, rhs, where=None):
    """Solve the block-diagonal system given by weights S for rhs (P, M, m)."""
    P, M, m = rhs.shape
    ab, bw = to_banded(S)
    try:
        x = solve_banded((bw, bw), ab, rhs.reshape(-1), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSliceSystem(f"banded solve failed at {where}: {exc}") from exc
    return x.reshape(P, M, m)


def residual(S, x, rhs):
    return float(np.max(np.abs(apply(S, x) - rhs))) if x.size else 0.0
