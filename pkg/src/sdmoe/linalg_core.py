"""Dense double-precision kernels: product, Jacobi SVD, Householder QR, projectors.

Matrices are plain 2-D ``float64`` numpy arrays. Every routine is a pure
function of its input and produces bitwise-identical output for bitwise
identical input.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    ConvergenceError,
    NonFiniteError,
    NotOrthonormalError,
    RankDeficiencyError,
    ShapeError,
)

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60
BASIS_TOL = 1e-10

_EPS = np.finfo(np.float64).eps


def as_matrix(a, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (copy-free when possible)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``p = min(m, n)`` columns."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class OrthonormalBasis:
    mat: np.ndarray

    def __post_init__(self):
        mat = as_matrix(self.mat, "basis")
        n, r = mat.shape
        if r > n:
            raise ShapeError(f"basis has {r} columns but only {n} rows")
        defect = gram_defect(mat)
        if defect > BASIS_TOL:
            raise NotOrthonormalError(
                f"basis columns are not orthonormal (Gram defect {defect:.3e})", defect
            )
        object.__setattr__(self, "mat", mat)

    @property
    def rank(self) -> int:
        return self.mat.shape[1]


def gram_defect(b: np.ndarray) -> float:
    """Max-abs deviation of ``b.T @ b`` from the identity."""
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(b.T @ b - np.eye(b.shape[1]))))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Tournament schedule: every pair of the n columns meets once per sweep,
    # and pairs within one round are disjoint so they rotate independently.
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_tall(a: np.ndarray):
    """One-sided Jacobi on the columns of a tall ``a`` (m >= n)."""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    scale = np.linalg.norm(work)
    floor = (max(m, n) * _EPS * scale) ** 2
    rounds = _round_robin(n)

    off = 0.0
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        off = 0.0
        for ps, qs in rounds:
            ap, aq = work[:, ps], work[:, qs]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            live = (alpha > floor) & (beta > floor)
            denom = np.sqrt(alpha * beta)
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / denom[live]
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > SVD_TOL
            if not act.any():
                continue
            rotated = True
            ps, qs = ps[act], qs[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, ps], work[:, qs]
            work[:, ps] = c * ap - s * aq
            work[:, qs] = s * ap + c * aq
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps] = c * vp - s * vq
            v[:, qs] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps "
            f"(max relative off-diagonal {off:.3e})",
            off,
        )

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]

    u = np.zeros((m, n))
    good = sigma * sigma > floor
    u[:, good] = work[:, good] / sigma[good]
    if not good.all():
        u = _complete_columns(u, good)
    return u, sigma, v


def _complete_columns(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    m = u.shape[0]
    basis = u[:, keep]
    for j in np.flatnonzero(~keep):
        # residual of every coordinate axis; the longest one is best conditioned
        resid = np.eye(m) - basis @ basis.T
        resid -= basis @ (basis.T @ resid)
        c = int(np.argmax(np.einsum("ij,ij->j", resid, resid)))
        e = resid[:, c] / np.linalg.norm(resid[:, c])
        u[:, j] = e
        basis = np.column_stack([basis, e])
    return u


def _fix_signs(u: np.ndarray, v: np.ndarray):
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return u, v


def svd(a) -> SvdFactors:
    """Thin SVD by one-sided Jacobi rotations.

    Columns of ``u`` are sign-normalized so the largest-magnitude entry is
    non-negative; ``v`` follows so the product is unchanged.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m >= n:
        u, sigma, v = _jacobi_tall(a)
    else:
        v, sigma, u = _jacobi_tall(a.T)
    u, v = _fix_signs(u, v)
    return SvdFactors(u=u, sigma=sigma, v=v)


def qr_orthonormal(a) -> OrthonormalBasis:
    """Householder QR, returning the thin Q with a non-negative R diagonal."""
    a = as_matrix(a)
    m, n = a.shape
    if n > m:
        raise ShapeError(f"qr_orthonormal needs cols <= rows, got {a.shape}")
    fro = np.linalg.norm(a)
    r = a.copy()
    vs = []
    for j in range(n):
        x = r[j:, j]
        nrm = np.linalg.norm(x)
        if nrm <= 1e-12 * fro or nrm == 0.0:
            raise RankDeficiencyError(
                f"matrix is rank deficient at column {j} (|R_jj| = {nrm:.3e})", j
            )
        w = x.copy()
        w[0] += nrm if x[0] >= 0 else -nrm
        w /= np.linalg.norm(w)
        r[j:, j:] -= 2.0 * np.outer(w, w @ r[j:, j:])
        vs.append(w)
    q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        w = vs[j]
        q[j:, :] -= 2.0 * np.outer(w, w @ q[j:, :])
    neg = np.diag(r)[:n] < 0
    q[:, neg] *= -1.0
    return OrthonormalBasis(q)


def projector(b: OrthonormalBasis) -> np.ndarray:
    mat = b.mat if isinstance(b, OrthonormalBasis) else OrthonormalBasis(b).mat
    return mat @ mat.T


def spectral_norm(a, max_iter: int = 500, tol: float = 1e-14) -> float:
    """Largest singular value by power iteration on the Gram matrix.

    Falls back to the full Jacobi SVD when the iteration stalls (tiny gap).
    """
    a = as_matrix(a)
    if not np.any(a):
        return 0.0
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    x = np.ones(gram.shape[0]) / np.sqrt(gram.shape[0])
    x = x + np.linspace(0.0, 1e-3, gram.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = gram @ x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            break
        new = float(x @ y)
        x = y / nrm
        if abs(new - lam) <= tol * new:
            return float(np.sqrt(new))
        lam = new
    return float(svd(a).sigma[0])
