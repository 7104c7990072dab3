"""Subspace-level analysis of expert weights, activations and gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import NotOrthonormalError, SdMoeError, ShapeError
from .linalg_core import SvdFactors, as_matrix, gram_defect, svd

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class SubspaceInterval:
    """Inclusive 1-based range of spectral indices."""

    start: int
    end: int

    def __post_init__(self):
        if not 1 <= self.start <= self.end:
            raise ValueError(f"invalid interval [{self.start}:{self.end}]")

    @property
    def cols(self) -> slice:
        return slice(self.start - 1, self.end)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def mean_off_diagonal(self) -> float:
        n = self.n
        if n < 2:
            return float("nan")
        iu = np.triu_indices(n, 1)
        return float(self.values[iu].mean())


@dataclass(frozen=True)
class AnalysisConfig:
    head_fraction: float = 0.01
    activation_threshold_scale: float = 1.0
    energy_mode: str = "squared"

    def __post_init__(self):
        if not 0.0 < self.head_fraction <= 1.0:
            raise ValueError("head_fraction must lie in (0, 1]")
        if self.activation_threshold_scale <= 0:
            raise ValueError("activation_threshold_scale must be positive")

    def head_rank(self, p: int) -> int:
        return max(1, math.ceil(self.head_fraction * p))


@dataclass(frozen=True)
class ComparisonBasis:
    """SVD of a weight plus the side used to compare it against other experts."""

    factors: SvdFactors
    kind: str

    @property
    def basis(self) -> np.ndarray:
        return self.factors.v if self.kind == "up_or_gate" else self.factors.u


def comparison_basis(w, kind: Literal["up_or_gate", "down"]) -> ComparisonBasis:
    """Input-side maps compare right singular vectors, output-side maps left ones."""
    if kind not in ("up_or_gate", "down"):
        raise ValueError(f"unknown projection kind {kind!r}")
    return ComparisonBasis(svd(w), kind)


def _check_ortho(b, name):
    b = as_matrix(b, name)
    defect = gram_defect(b)
    if defect > ORTHO_TOL:
        raise NotOrthonormalError(f"{name} is not orthonormal (Gram defect {defect:.3e})", defect)
    return b


def _sigma_max(c: np.ndarray) -> float:
    # tiny cross matrices: a rank-1 shortcut keeps scalar cases exact
    if c.shape[0] == 1 or c.shape[1] == 1:
        return float(np.linalg.norm(c))
    return float(svd(c).sigma[0])


def principal_similarity(b1, b2) -> float:
    """Cosine of the smallest principal angle between two orthonormal bases."""
    b1 = _check_ortho(b1, "b1")
    b2 = _check_ortho(b2, "b2")
    if b1.shape[0] != b2.shape[0]:
        raise ShapeError(f"bases live in different spaces: {b1.shape} vs {b2.shape}")
    # orient the cross product identically for both argument orders
    if (b1.shape[1], b1.tobytes()) > (b2.shape[1], b2.tobytes()):
        b1, b2 = b2, b1
    return _sigma_max(b2.T @ b1)


def pairwise_expert_similarity(
    bases: Sequence[np.ndarray], interval: SubspaceInterval
) -> SimilarityMatrix:
    rows = {np.asarray(b).shape[0] for b in bases}
    if len(rows) > 1:
        raise ShapeError(f"bases have differing row counts {sorted(rows)}")
    for i, b in enumerate(bases):
        if interval.end > np.asarray(b).shape[1]:
            raise ShapeError(
                f"interval end {interval.end} exceeds the {np.asarray(b).shape[1]} columns of basis {i}"
            )
    sub = [np.asarray(b, dtype=np.float64)[:, interval.cols] for b in bases]
    n = len(sub)
    vals = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            vals[i, j] = vals[j, i] = principal_similarity(sub[i], sub[j])
    return SimilarityMatrix(vals)


def energy_cdf(sigma) -> np.ndarray:
    """Cumulative share of squared singular values."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("sigma must be a non-empty 1-D array")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise ValueError("sigma must be non-negative and descending")
    sq = s * s
    total = sq.sum()
    if total == 0.0:
        raise SdMoeError("energy_cdf of an all-zero spectrum is undefined")
    cdf = np.cumsum(sq) / total
    cdf[-1] = 1.0
    return cdf


def interval_similarity_scan(bases: Sequence[np.ndarray], fraction: float):
    """Mean off-diagonal similarity over consecutive spectral blocks.

    Returns a list of ``(SubspaceInterval, mean)`` pairs.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    p = min(np.asarray(b).shape[1] for b in bases)
    width = max(1, math.ceil(fraction * p))
    out = []
    for start in range(1, p + 1, width):
        iv = SubspaceInterval(start, min(start + width - 1, p))
        out.append((iv, pairwise_expert_similarity(bases, iv).mean_off_diagonal()))
    return out


def activation_ratio(x, v, config: AnalysisConfig = AnalysisConfig()) -> np.ndarray:
    """Fraction of tokens whose projection on each direction exceeds ``c * RMS``."""
    x = as_matrix(x, "x")
    v = as_matrix(v, "v")
    if x.shape[1] != v.shape[0]:
        raise ShapeError(f"token width {x.shape[1]} does not match basis rows {v.shape[0]}")
    proj = np.abs(x @ v)
    tau = config.activation_threshold_scale * np.sqrt(np.mean(proj * proj))
    return np.mean(proj > tau, axis=0)


def _flat_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise SdMoeError("cosine of a zero-norm projection is undefined")
    return float(np.sum(a * b) / (na * nb))


def shuffle_projection_delta(x, head, tail, perm) -> tuple[float, float]:
    """Cosine between projections of the original and token-permuted batch.

    Returns ``(cos_head, cos_tail)``.
    """
    x = as_matrix(x, "x")
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(x.shape[0])):
        raise ValueError("perm is not a permutation of the token indices")
    hb = getattr(head, "mat", head)
    tb = getattr(tail, "mat", tail)
    xs = x[perm]
    return _flat_cosine(x @ hb, xs @ hb), _flat_cosine(x @ tb, xs @ tb)


def gradient_subspace_similarity(g1, g2, k: int, side: Literal["right", "left"] = "right") -> float:
    g1 = as_matrix(g1, "g1")
    g2 = as_matrix(g2, "g2")
    if g1.shape != g2.shape:
        raise ShapeError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    if k < 1 or k > min(g1.shape):
        raise ValueError(f"k must lie in [1, {min(g1.shape)}], got {k}")
    f1, f2 = svd(g1), svd(g2)
    if side == "right":
        return principal_similarity(f1.v[:, :k], f2.v[:, :k])
    return principal_similarity(f1.u[:, :k], f2.u[:, :k])


def gate_alignment_profile(w, basis) -> np.ndarray:
    """|cos| between a gate row and each basis direction."""
    w = np.asarray(w, dtype=np.float64).ravel()
    basis = _check_ortho(basis, "basis")
    if basis.shape[0] != w.size:
        raise ShapeError(f"gate vector length {w.size} does not match basis rows {basis.shape[0]}")
    nrm = np.linalg.norm(w)
    if nrm == 0.0:
        raise SdMoeError("gate vector has zero norm")
    return np.abs(basis.T @ w) / nrm


def data_subspace_similarity(xa, xb, fraction: float) -> float:
    xa = as_matrix(xa, "xa")
    xb = as_matrix(xb, "xb")
    if xa.shape[1] != xb.shape[1]:
        raise ShapeError(f"batches have different widths {xa.shape[1]} and {xb.shape[1]}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    d = xa.shape[1]
    k = max(1, math.ceil(fraction * d))
    va, vb = svd(xa).v, svd(xb).v
    if k > min(va.shape[1], vb.shape[1]):
        raise ValueError(f"requested {k} directions but a batch has rank budget below that")
    return principal_similarity(va[:, :k], vb[:, :k])
