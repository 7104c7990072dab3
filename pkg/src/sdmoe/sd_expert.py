"""Spectrally decoupled expert weights.

A ``DecoupledLinear`` stores one common matrix shared by every expert and one
unique matrix per expert. The unique matrices live in the double orthogonal
complement of the common matrix's top-k singular subspaces, and gradients are
split so that the common part absorbs everything touching those subspaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankDeficiencyError, ShapeError
from .linalg_core import qr_orthonormal, svd

INIT_RETRIES = 3


@dataclass(frozen=True)
class InitSpec:
    seed: int
    rank: int
    n_experts: int
    scale: float | None = None  # defaults to 1/sqrt(n)

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class DecoupledLinear:
    w_c: np.ndarray
    u_k: np.ndarray
    v_k: np.ndarray
    sigma_k: np.ndarray
    uniques: list[np.ndarray]
    refresh_interval: int = 16
    steps_since_refresh: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_c.shape

    @property
    def k(self) -> int:
        return self.u_k.shape[1]

    @property
    def n_experts(self) -> int:
        return len(self.uniques)

    def copy(self) -> "DecoupledLinear":
        return DecoupledLinear(
            self.w_c.copy(),
            self.u_k.copy(),
            self.v_k.copy(),
            self.sigma_k.copy(),
            [w.copy() for w in self.uniques],
            self.refresh_interval,
            self.steps_since_refresh,
        )

    def orthogonality_residual(self) -> float:
        """max_i max(|U_k^T W_u^(i)|, |W_u^(i) V_k|) in the max-abs norm."""
        res = 0.0
        for w in self.uniques:
            res = max(res, float(np.max(np.abs(self.u_k.T @ w))), float(np.max(np.abs(w @ self.v_k))))
        return res


def _complement_basis(rng, basis: np.ndarray) -> np.ndarray:
    dim, k = basis.shape
    z = rng.standard_normal((dim, dim - k))
    z -= basis @ (basis.T @ z)
    return qr_orthonormal(z).mat


def init_decoupled(m: int, n: int, spec: InitSpec, refresh_interval: int = 16) -> DecoupledLinear:
    """Common rank-k part from a seeded Gaussian reference, uniques in its complement."""
    k = spec.rank
    if k >= min(m, n):
        raise ValueError(f"rank {k} must be below min(m, n) = {min(m, n)}")
    scale = spec.scale if spec.scale is not None else 1.0 / np.sqrt(n)
    ref_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    ref = svd(scale * ref_rng.standard_normal((m, n)))
    u_k, v_k = ref.u[:, :k].copy(), ref.v[:, :k].copy()
    sigma_k = ref.sigma[:k].copy()
    tail = ref.sigma[k:]
    w_c = (u_k * sigma_k) @ v_k.T

    uniques = []
    for i in range(spec.n_experts):
        for attempt in range(INIT_RETRIES + 1):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, i, attempt]))
            try:
                ut = _complement_basis(rng, u_k)
                vt = _complement_basis(rng, v_k)
                break
            except RankDeficiencyError:
                if attempt == INIT_RETRIES:
                    raise
        ell = tail.size
        uniques.append((ut[:, :ell] * tail) @ vt[:, :ell].T)
    return DecoupledLinear(w_c, u_k, v_k, sigma_k, uniques, refresh_interval)


def proxy_weight(dl: DecoupledLinear, i: int) -> np.ndarray:
    if not 0 <= i < dl.n_experts:
        raise IndexError(f"expert index {i} out of range for {dl.n_experts} experts")
    return dl.w_c + dl.uniques[i]


def split_gradient(dl: DecoupledLinear, g) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(g_c, g_u)`` with g_c = P_U g + (I - P_U) g P_V and g_u = g - g_c."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != dl.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match weight shape {dl.shape}")
    u, v = dl.u_k, dl.v_k
    left = u @ (u.T @ g)
    rest = g - left
    g_c = left + (rest @ v) @ v.T
    return g_c, g - g_c


@dataclass
class UpdateReport:
    common_grad: np.ndarray
    unique_grads: dict[int, np.ndarray] = field(default_factory=dict)


def accumulate_updates(dl: DecoupledLinear, per_expert_grads: dict[int, np.ndarray], optimizer, name: str = "w") -> UpdateReport:
    """Apply one optimizer step from the proxy gradients of the active experts.

    The common matrix receives the sum of the common components (it is shared,
    so the chain rule adds contributions); every unique matrix its own residual.
    """
    common = np.zeros(dl.shape)
    uniq = {}
    for i in sorted(per_expert_grads):
        if not 0 <= i < dl.n_experts:
            raise IndexError(f"expert index {i} out of range")
        g_c, g_u = split_gradient(dl, per_expert_grads[i])
        common += g_c
        uniq[i] = g_u
    optimizer.step(f"{name}.common", dl.w_c, common)
    for i, g_u in uniq.items():
        optimizer.step(f"{name}.unique{i}", dl.uniques[i], g_u)
    dl.steps_since_refresh += 1
    return UpdateReport(common, uniq)


@dataclass
class RefreshReport:
    dropped_energy: list[float]
    energy_before: list[float]
    energy_after: list[float]
    residual_before: float
    residual_after: float


def refresh_basis(dl: DecoupledLinear, reproject: bool = True) -> RefreshReport:
    """Recompute U_k, V_k from the current common matrix.

    With ``reproject`` each unique matrix is projected back into the double
    complement; the discarded Frobenius energy is reported per expert.
    """
    f = svd(dl.w_c)
    k = dl.k
    dl.u_k = f.u[:, :k].copy()
    dl.v_k = f.v[:, :k].copy()
    dl.sigma_k = f.sigma[:k].copy()
    before = dl.orthogonality_residual()
    dropped, e_before, e_after = [], [], []
    for i, w in enumerate(dl.uniques):
        e_before.append(float(np.sum(w * w)))
        if reproject:
            kept = w - dl.u_k @ (dl.u_k.T @ w)
            kept = kept - (kept @ dl.v_k) @ dl.v_k.T
            diff = w - kept
            dropped.append(float(np.sum(diff * diff)))
            dl.uniques[i] = kept
        else:
            dropped.append(0.0)
        e_after.append(float(np.sum(dl.uniques[i] * dl.uniques[i])))
    dl.steps_since_refresh = 0
    return RefreshReport(dropped, e_before, e_after, before, dl.orthogonality_residual())
