"""Correlation matrices in unconstrained Fisher coordinates.

A time-varying correlation matrix is parameterized entrywise: each strict
lower-triangle entry carries its own Fisher coordinate
``g = log((1 + rho) / (1 - rho))``, and the matrix is assembled by the inverse
map.  Positive definiteness is not automatic under entrywise moves, so the
central tool here is :func:`entry_bounds`: the open interval of values one
entry may take, holding the rest of the matrix fixed, such that the assembled
matrix stays positive definite.  The interval is the root pair of an explicit
quadratic in the moving entry (a Schur-complement condition), which is what
makes single-entry Metropolis moves and simulation-time projection cheap.

Pair order is canonical everywhere in this package: row-major over the strict
lower triangle, i.e. (2,1), (3,1), (3,2), (4,1), ... in 1-based notation.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

PD_TOL = 1e-10  # default smallest-eigenvalue floor for PD checks


def n_pairs(p: int) -> int:
    """Number of strict lower-triangle pairs of a p x p matrix."""
    return p * (p - 1) // 2


def dim_from_pairs(k: int) -> int:
    """Matrix dimension p such that p (p - 1) / 2 == k; raises if k is not triangular."""
    p = int(round((1.0 + np.sqrt(1.0 + 8.0 * k)) / 2.0))
    if n_pairs(p) != k:
        raise ValueError(f"{k} is not a triangular number")
    return p


def pair_indices(p: int) -> np.ndarray:
    """Canonical pair table.

    Returns
    -------
    ndarray of shape (p (p - 1) / 2, 2), dtype int64
        Row k holds (i, j) with i > j, 0-based, row-major over the strict
        lower triangle.
    """
    out = np.empty((n_pairs(p), 2), dtype=np.int64)
    k = 0
    for i in range(1, p):
        for j in range(i):
            out[k, 0] = i
            out[k, 1] = j
            k += 1
    return out


def fisher(rho):
    """Fisher transform log((1 + rho)/(1 - rho)), elementwise.

    Accepts the closed interval [-1, 1]; the endpoints map to -inf/+inf
    (PD bounds can legitimately reach the box boundary).  Values outside
    [-1, 1] raise.
    """
    r = np.asarray(rho, dtype=np.float64)
    if np.any(np.abs(r) > 1.0) or np.any(np.isnan(r)):
        raise ValueError("correlation outside [-1, 1]")
    with np.errstate(divide="ignore"):
        out = 2.0 * np.arctanh(r)
    return out if out.ndim else float(out)


def inverse_fisher(g):
    """Inverse Fisher transform tanh(g / 2), elementwise; maps R to (-1, 1)."""
    x = np.asarray(g, dtype=np.float64)
    out = np.tanh(0.5 * x)
    return out if out.ndim else float(out)


def assemble(g: np.ndarray, p: int | None = None) -> np.ndarray:
    """Build a unit-diagonal symmetric matrix from Fisher coordinates.

    Parameters
    ----------
    g : ndarray, shape (p (p - 1) / 2,)
        Fisher coordinates in canonical pair order.  Fixed-zero pairs are
        represented by exact zeros and map to exact zero correlations.
    p : int, optional
        Matrix dimension; inferred from ``len(g)`` when omitted.

    Notes
    -----
    The result is positive definite only when the coordinates are inside the
    PD region; use :func:`is_positive_definite` or :func:`entry_bounds` to
    check or enforce that.
    """
    g = np.asarray(g, dtype=np.float64)
    if p is None:
        p = dim_from_pairs(g.shape[0])
    elif g.shape[0] != n_pairs(p):
        raise ValueError(f"expected {n_pairs(p)} coordinates for p={p}, got {g.shape[0]}")
    R = np.eye(p)
    rho = np.tanh(0.5 * g)
    k = 0
    for i in range(1, p):
        for j in range(i):
            R[i, j] = R[j, i] = rho[k]
            k += 1
    return R


def extract(R: np.ndarray) -> np.ndarray:
    """Read Fisher coordinates off a unit-diagonal matrix (inverse of :func:`assemble`)."""
    R = np.asarray(R, dtype=np.float64)
    p = R.shape[0]
    out = np.empty(n_pairs(p))
    k = 0
    for i in range(1, p):
        for j in range(i):
            out[k] = fisher(R[i, j])
            k += 1
    return out


def is_positive_definite(R: np.ndarray, tol: float = PD_TOL) -> bool:
    """True when the smallest eigenvalue exceeds ``tol``."""
    return bool(np.linalg.eigvalsh(R)[0] > tol)


def entry_bounds(R: np.ndarray, i: int, j: int) -> tuple[float, float]:
    """Open interval of PD-preserving values for entry (i, j), rest held fixed.

    Deleting row and column i from ``R`` must leave a positive definite
    matrix (true whenever the full matrix is PD at its current entry).  The
    current value of entry (i, j) itself does not affect the result.

    Returns
    -------
    (lo, hi) : floats in [-1, 1]
        Boundary values; the matrix is PD for entries strictly inside, and
        singular at the boundary.
    """
    R = np.asarray(R, dtype=np.float64)
    p = R.shape[0]
    if i == j:
        raise ValueError("diagonal entries are fixed at 1")
    if p == 2:
        return (-1.0, 1.0)
    others = [a for a in range(p) if a != i]
    k = others.index(j)
    sub = R[np.ix_(others, others)]
    u = R[i, others].astype(np.float64)
    c, low = sla.cho_factor(sub, lower=True)
    M = sla.cho_solve((c, low), np.eye(p - 1))
    u_rest = np.delete(u, k)
    a = M[k, k]
    bu = np.delete(M[:, k], k) @ u_rest
    cu = u_rest @ np.delete(np.delete(M, k, axis=0), k, axis=1) @ u_rest
    # a x^2 + 2 bu x + (cu - 1) < 0 inside the PD region
    disc = bu * bu - a * (cu - 1.0)
    if disc <= 0.0:
        raise np.linalg.LinAlgError("no PD-preserving interval: remaining matrix is not PD")
    root = np.sqrt(disc)
    lo = (-bu - root) / a
    hi = (-bu + root) / a
    return (max(lo, -1.0), min(hi, 1.0))


def sqrt_spectral(R: np.ndarray) -> np.ndarray:
    """Spectral square root S = P Q^{1/2} with S S' = R.

    Eigenvalues are sorted in descending order and each eigenvector's sign is
    normalized so that its first nonzero element is positive, which pins the
    factor down uniquely for distinct eigenvalues.
    """
    vals, vecs = np.linalg.eigh(np.asarray(R, dtype=np.float64))
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    if vals[-1] <= 0.0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    for c in range(vecs.shape[1]):
        col = vecs[:, c]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            vecs[:, c] = -col
    return vecs * np.sqrt(vals)


def sqrt_cholesky(R: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor L with L L' = R and positive diagonal."""
    return np.linalg.cholesky(np.asarray(R, dtype=np.float64))
