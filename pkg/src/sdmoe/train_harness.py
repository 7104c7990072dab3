"""Synthetic planted-subspace task, training loop and mechanism measurements."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError
from .linalg_core import qr_orthonormal, svd
from .moe_layer import (
    PROJECTIONS,
    MoeConfig,
    MoeParams,
    init_params,
    layer_backward,
    layer_forward,
    load_balance_loss,
)
from .optim import make_optimizer
from .sd_expert import accumulate_updates, refresh_basis, split_gradient
from .spectral_metrics import (
    AnalysisConfig,
    SimilarityMatrix,
    SubspaceInterval,
    comparison_basis,
    gate_alignment_profile,
    pairwise_expert_similarity,
    principal_similarity,
)

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class SyntheticTaskSpec:
    d: int = 32
    r: int = 4
    rho: float = 0.9
    n_tokens: int = 256
    target_rule: str = "linear_regression"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.r < self.d:
            raise ValueError(f"r={self.r} must lie in [1, d)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.target_rule not in ("linear_regression", "subspace_classification"):
            raise ValueError(f"unknown target rule {self.target_rule!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-2
    optimizer: str = "adam"
    refresh_interval: int = 16
    reproject: bool = True
    aux_coef: float = 0.01
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.refresh_interval < 1 or self.log_every < 1:
            raise ValueError("refresh_interval and log_every must be >= 1")


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class PlantedTask:
    basis: np.ndarray  # d x r, the shared subspace C
    complement: np.ndarray  # d x (d - r)
    target_map: np.ndarray  # d x d


def planted_task(spec: SyntheticTaskSpec) -> PlantedTask:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    basis = qr_orthonormal(rng.standard_normal((spec.d, spec.r))).mat
    z = rng.standard_normal((spec.d, spec.d - spec.r))
    z -= basis @ (basis.T @ z)
    complement = qr_orthonormal(z).mat
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    target_map = rng.standard_normal((spec.d, spec.d)) / math.sqrt(spec.d)
    return PlantedTask(basis, complement, target_map)


def gen_batch(spec: SyntheticTaskSpec, batch_index: int = 0, task: PlantedTask | None = None):
    """Draw ``(x, targets)``.

    Tokens mix a shared component in C and an isotropic complement component,
    each coordinate variance-normalized so that the expected share of energy
    in C equals ``rho``.
    """
    task = task or planted_task(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3, batch_index]))
    z = rng.standard_normal((spec.n_tokens, spec.r)) / math.sqrt(spec.r)
    w = rng.standard_normal((spec.n_tokens, spec.d - spec.r)) / math.sqrt(spec.d - spec.r)
    x = math.sqrt(spec.rho) * z @ task.basis.T
    if spec.rho < 1.0:
        x = x + math.sqrt(1.0 - spec.rho) * w @ task.complement.T
    y = x @ task.target_map.T
    if spec.target_rule == "subspace_classification":
        y = np.where(y >= 0, 1.0, -1.0)
    return x, y


def shared_energy_fraction(x: np.ndarray, basis: np.ndarray) -> float:
    return float(np.sum((x @ basis) ** 2) / np.sum(x * x))


# ---------------------------------------------------------------- training


@dataclass
class RefreshEvent:
    step: int
    proj: str
    residual_before: float
    residual_after: float
    energy_before: list[float]
    energy_after: list[float]
    dropped_energy: list[float]


@dataclass
class MetricsLog:
    columns: tuple = (
        "step",
        "task_loss",
        "aux_loss",
        "expert_similarity",
        "grad_similarity",
        "ortho_residual",
        "dropped_energy",
        "refreshed",
    )
    rows: list[tuple] = field(default_factory=list)
    refreshes: list[RefreshEvent] = field(default_factory=list)
    task_trace: list[float] = field(default_factory=list)
    aux_trace: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([row[j] for row in self.rows], dtype=float)


def _task_loss(y, targets):
    diff = y - targets
    n = y.shape[0]
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def expert_bases(params: MoeParams, proj: str = "up") -> list[np.ndarray]:
    """Comparison bases per expert: explicit weights for baseline, unique parts for sd."""
    kind = "down" if proj == "down" else "up_or_gate"
    if params.config.variant == "sd":
        mats = params.decoupled[proj].uniques
    else:
        mats = list(params.experts[proj])
    return [comparison_basis(w, kind).basis for w in mats]


def head_similarity(params: MoeParams, analysis: AnalysisConfig = AnalysisConfig(), proj: str = "up") -> SimilarityMatrix:
    bases = expert_bases(params, proj)
    k = analysis.head_rank(min(params.config.proj_shape(proj)))
    return pairwise_expert_similarity(bases, SubspaceInterval(1, k))


def _grad_similarity(up_grads: np.ndarray, active: list[int], r: int) -> float:
    vs = [svd(up_grads[i]).v[:, :r] for i in active]
    vals = [principal_similarity(a, b) for a, b in itertools.combinations(vs, 2)]
    return float(np.mean(vals)) if vals else float("nan")


def _ortho_residual(params: MoeParams) -> float:
    if params.config.variant != "sd":
        return float("nan")
    return max(dl.orthogonality_residual() for dl in params.decoupled.values())


def train(
    params: MoeParams,
    spec: SyntheticTaskSpec,
    cfg: TrainConfig,
    analysis: AnalysisConfig = AnalysisConfig(),
    track_metrics: bool = True,
) -> tuple[MoeParams, MetricsLog]:
    """Train a copy of ``params`` on fresh planted batches.

    The sd variant splits each proxy gradient, sums common parts into W_c and
    refreshes the bases every ``cfg.refresh_interval`` steps. Raises
    :class:`DivergenceError` (with the partial log attached as ``.log``) on a
    non-finite or exploding task loss.
    """
    params = params.copy()
    moe = params.config
    if moe.d_model != spec.d:
        raise ValueError(f"task width {spec.d} does not match d_model {moe.d_model}")
    task = planted_task(spec)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    mlog = MetricsLog()
    for dl in params.decoupled.values():
        dl.refresh_interval = cfg.refresh_interval

    for step in range(1, cfg.steps + 1):
        x, targets = gen_batch(spec, step, task)
        y, cache = layer_forward(params, x)
        loss, dy = _task_loss(y, targets)
        aux = load_balance_loss(cache.routing)
        mlog.task_trace.append(loss)
        mlog.aux_trace.append(aux)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS or not math.isfinite(aux):
            err = DivergenceError(f"task loss {loss!r} at step {step}", step)
            err.log = mlog
            raise err
        grads = layer_backward(params, cache, dy, aux_coef=cfg.aux_coef)
        active = grads.active()

        opt.step("w_gate", params.w_gate, grads.w_gate)
        dropped, refreshed = 0.0, False
        if moe.variant == "sd":
            for p in PROJECTIONS:
                dl = params.decoupled[p]
                accumulate_updates(dl, {i: grads.experts[p][i] for i in active}, opt, name=p)
                if dl.steps_since_refresh >= dl.refresh_interval:
                    before = dl.orthogonality_residual()
                    rep = refresh_basis(dl, cfg.reproject)
                    mlog.refreshes.append(
                        RefreshEvent(step, p, max(before, rep.residual_before), rep.residual_after,
                                     rep.energy_before, rep.energy_after, rep.dropped_energy)
                    )
                    dropped += sum(rep.dropped_energy)
                    refreshed = True
        else:
            for p in PROJECTIONS:
                for i in active:
                    opt.step(f"{p}.{i}", params.experts[p][i], grads.experts[p][i])
            if params.shared is not None:
                for p in PROJECTIONS:
                    opt.step(f"{p}.shared", params.shared[p], grads.shared[p])
        params.bump()

        if step == 1 or step % cfg.log_every == 0 or refreshed or step == cfg.steps:
            if track_metrics:
                esim = head_similarity(params, analysis).mean_off_diagonal()
                gsim = _grad_similarity(grads.experts["up"], active, spec.r)
            else:
                esim = gsim = float("nan")
            mlog.rows.append(
                (step, loss, aux, esim, gsim, _ortho_residual(params), dropped, int(refreshed))
            )
            log.debug("step %d loss %.6g aux %.6g", step, loss, aux)
    return params, mlog


# ---------------------------------------------------------------- measurements


@dataclass
class GradientAlignment:
    experts: list[int]
    excluded: list[int]
    similarity: SimilarityMatrix
    alignment_to_c: dict[int, float]
    unique_alignment_to_c: dict[int, float] = field(default_factory=dict)
    support_ratio: dict[int, float] = field(default_factory=dict)

    def mean_pairwise(self) -> float:
        return self.similarity.mean_off_diagonal()

    def mean_alignment(self) -> float:
        return float(np.mean(list(self.alignment_to_c.values())))


def expert_gradients(params: MoeParams, spec: SyntheticTaskSpec, batch_index: int = 0):
    """One forward/backward of the task loss on a fresh batch."""
    x, targets = gen_batch(spec, batch_index)
    y, cache = layer_forward(params, x)
    _, dy = _task_loss(y, targets)
    return layer_backward(params, cache, dy, aux_coef=0.0)


def measure_gradient_alignment(
    params: MoeParams, spec: SyntheticTaskSpec, k: int | None = None, batch_index: int = 10**6
) -> GradientAlignment:
    """Pairwise right-subspace similarity of the per-expert up-proj gradients
    and each gradient's alignment with the planted subspace C."""
    k = spec.r if k is None else k
    c = planted_task(spec).basis
    grads = expert_gradients(params, spec, batch_index)
    up = grads.experts["up"]
    included = [i for i in range(params.config.n_experts) if grads.token_counts[i] > 0]
    excluded = [i for i in range(params.config.n_experts) if grads.token_counts[i] == 0]
    vs = {i: svd(up[i]).v[:, :k] for i in included}
    n = len(included)
    vals = np.eye(n)
    for a, b in itertools.combinations(range(n), 2):
        vals[a, b] = vals[b, a] = principal_similarity(vs[included[a]], vs[included[b]])
    align = {i: principal_similarity(vs[i], c) for i in included}
    p_perp = np.eye(spec.d) - c @ c.T
    support = {i: float(np.linalg.norm(up[i] @ p_perp) / np.linalg.norm(up[i])) for i in included}
    uniq = {}
    if params.config.variant == "sd":
        dl = params.decoupled["up"]
        for i in included:
            _, g_u = split_gradient(dl, up[i])
            uniq[i] = principal_similarity(svd(g_u).v[:, :k], c)
    if excluded:
        log.info("experts %s received no tokens and were excluded", excluded)
    return GradientAlignment(included, excluded, SimilarityMatrix(vals), align, uniq, support)


@dataclass
class SpecializationReport:
    variant: str
    head_rank: int
    similarity: dict[str, SimilarityMatrix]
    gate_alignment: list[np.ndarray]

    @property
    def head_similarity(self) -> float:
        return self.similarity["up"].mean_off_diagonal()


def specialization_report(params: MoeParams, analysis: AnalysisConfig = AnalysisConfig()) -> SpecializationReport:
    sims = {p: head_similarity(params, analysis, p) for p in PROJECTIONS}
    bases = expert_bases(params, "up")
    gate = [gate_alignment_profile(params.w_gate[i], b) for i, b in enumerate(bases)]
    k = analysis.head_rank(min(params.config.proj_shape("up")))
    return SpecializationReport(params.config.variant, k, sims, gate)


# ---------------------------------------------------------------- sweeps


def rank_sweep(
    moe: MoeConfig,
    spec: SyntheticTaskSpec,
    cfg: TrainConfig,
    ks,
    analysis: AnalysisConfig = AnalysisConfig(),
) -> list[dict]:
    """One sd run per common rank; seeds are shared across rows."""
    rows = []
    for k in ks:
        run_cfg = replace(moe, variant="sd", k=int(k))
        params = init_params(run_cfg, cfg.seed, cfg.refresh_interval)
        trained, mlog = train(params, spec, cfg, analysis, track_metrics=False)
        rows.append(
            {
                "k": int(k),
                "final_loss": mlog.task_trace[-1],
                "mean_expert_similarity": head_similarity(trained, analysis).mean_off_diagonal(),
            }
        )
    return rows


def lr_stress(
    moe: MoeConfig,
    spec: SyntheticTaskSpec,
    cfg: TrainConfig,
    lrs,
    variants=("baseline", "sd"),
) -> list[dict]:
    """Run every (variant, lr) until ``cfg.steps`` or divergence."""
    lrs = [float(v) for v in lrs]
    if any(v <= 0 for v in lrs) or lrs != sorted(lrs):
        raise ValueError("learning rates must be positive and ascending")
    rows = []
    for variant in variants:
        for lr in lrs:
            params = init_params(replace(moe, variant=variant), cfg.seed, cfg.refresh_interval)
            run = replace(cfg, lr=lr)
            try:
                _, mlog = train(params, spec, run, track_metrics=False)
                diverged, div_step = False, 0
            except DivergenceError as err:
                mlog, diverged, div_step = err.log, True, err.step
            aux = [a for a in mlog.aux_trace if math.isfinite(a)]
            rows.append(
                {
                    "variant": variant,
                    "lr": lr,
                    "diverged": int(diverged),
                    "divergence_step": div_step,
                    "peak_aux_loss": max(aux) if aux else float("nan"),
                    "final_task_loss": mlog.task_trace[-1] if mlog.task_trace else float("nan"),
                }
            )
    return rows
