import math

import numpy as np
import pytest

from sdmoe.errors import DivergenceError
from sdmoe.moe_layer import PROJECTIONS, MoeConfig, init_params, layer_backward, layer_forward
from sdmoe.spectral_metrics import data_subspace_similarity
from sdmoe.train_harness import (
    SyntheticTaskSpec,
    TrainConfig,
    gen_batch,
    head_similarity,
    lr_stress,
    measure_gradient_alignment,
    planted_task,
    rank_sweep,
    shared_energy_fraction,
    specialization_report,
    train,
)

TINY = MoeConfig(d_model=8, d_ff=12, n_experts=3, top_n=2, k=2)
TINY_SPEC = SyntheticTaskSpec(d=8, r=2, n_tokens=32, seed=1)


def quiet(**kw):
    return TrainConfig(**{"log_every": 10**6, **kw})


# ---------------------------------------------------------------- data


def test_task_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(d=4, r=4)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(rho=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)


def test_planted_basis_orthonormal_and_complement():
    t = planted_task(SyntheticTaskSpec(d=16, r=3))
    full = np.hstack([t.basis, t.complement])
    assert np.max(np.abs(full.T @ full - np.eye(16))) <= 1e-12


def test_rho_one_tokens_lie_in_c():
    spec = SyntheticTaskSpec(rho=1.0, n_tokens=128)
    x, _ = gen_batch(spec)
    c = planted_task(spec).basis
    assert np.linalg.norm(x - x @ c @ c.T) <= 1e-10


def test_shared_energy_fraction_tracks_rho():
    spec = SyntheticTaskSpec(rho=0.9, n_tokens=1024)
    x, _ = gen_batch(spec)
    frac = shared_energy_fraction(x, planted_task(spec).basis)
    assert 0.85 <= frac <= 0.95


def test_batches_share_planted_subspace():
    spec = SyntheticTaskSpec(d=32, r=4, rho=0.95, n_tokens=256)
    xa, _ = gen_batch(spec, 0)
    xb, _ = gen_batch(spec, 1)
    assert not np.array_equal(xa, xb)
    assert data_subspace_similarity(xa, xb, 4 / 32) >= 0.9


def test_targets_linear_and_classification():
    spec = SyntheticTaskSpec(n_tokens=20)
    x, y = gen_batch(spec, 3)
    np.testing.assert_allclose(y, x @ planted_task(spec).target_map.T, atol=1e-15)
    cls = SyntheticTaskSpec(n_tokens=20, target_rule="subspace_classification")
    xc, yc = gen_batch(cls, 3)
    assert np.array_equal(xc, x)
    assert set(np.unique(yc)) <= {-1.0, 1.0}
    assert np.array_equal(yc, np.where(y >= 0, 1.0, -1.0))


def test_gen_batch_deterministic():
    a = gen_batch(TINY_SPEC, 5)
    b = gen_batch(TINY_SPEC, 5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


# ---------------------------------------------------------------- training


@pytest.mark.parametrize("variant", ["baseline", "sd"])
def test_lr_zero_leaves_params_unchanged(variant):
    p = init_params(MoeConfig(**{**TINY.__dict__, "variant": variant}), 0)
    trained, mlog = train(p, TINY_SPEC, quiet(steps=8, lr=0.0, optimizer="sgd"))
    assert trained.w_gate.tobytes() == p.w_gate.tobytes()
    for i in range(3):
        assert all(a.tobytes() == b.tobytes() for a, b in zip(trained.expert(i), p.expert(i)))
    assert np.all(np.isfinite(mlog.task_trace))


def test_one_sgd_step_hand_check():
    cfg = MoeConfig(d_model=5, d_ff=7, n_experts=1, top_n=1)
    spec = SyntheticTaskSpec(d=5, r=2, n_tokens=16, seed=2)
    p = init_params(cfg, 3)
    lr = 0.1
    trained, _ = train(p, spec, quiet(steps=1, lr=lr, optimizer="sgd", aux_coef=0.0))
    x, t = gen_batch(spec, 1)
    y, cache = layer_forward(p, x)
    g = layer_backward(p, cache, (y - t) / x.shape[0], aux_coef=0.0)
    for q in PROJECTIONS:
        np.testing.assert_allclose(trained.experts[q][0], p.experts[q][0] - lr * g.experts[q][0], atol=1e-15)


def test_train_does_not_mutate_input():
    p = init_params(TINY, 0)
    snap = p.copy()
    train(p, TINY_SPEC, quiet(steps=3, lr=0.1, optimizer="sgd"))
    assert np.array_equal(p.w_gate, snap.w_gate) and p.version == snap.version


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        train(init_params(TINY, 0), SyntheticTaskSpec(d=6, r=2), quiet(steps=1))


def test_metrics_log_bitwise_deterministic():
    cfg = MoeConfig(**{**TINY.__dict__, "variant": "sd"})
    run = TrainConfig(steps=20, lr=1e-2, refresh_interval=5, log_every=3)
    _, a = train(init_params(cfg, 4, 5), TINY_SPEC, run)
    _, b = train(init_params(cfg, 4, 5), TINY_SPEC, run)
    assert repr(a.rows) == repr(b.rows)
    steps = a.column("step")
    assert np.all(np.diff(steps) > 0)
    assert steps[0] == 1 and steps[-1] == 20


def test_refresh_sawtooth():
    cfg = MoeConfig(**{**TINY.__dict__, "variant": "sd"})
    run = TrainConfig(steps=24, lr=3e-2, refresh_interval=8, log_every=1)
    _, mlog = train(init_params(cfg, 5, 8), TINY_SPEC, run)
    assert sorted({e.step for e in mlog.refreshes}) == [8, 16, 24]
    assert {e.proj for e in mlog.refreshes} == set(PROJECTIONS)
    refreshed = mlog.column("refreshed").astype(bool)
    resid = mlog.column("ortho_residual")
    assert np.all(resid[refreshed] <= 1e-10)
    for e in mlog.refreshes:
        assert e.residual_after <= 1e-10 < e.residual_before
        for before, after, drop in zip(e.energy_before, e.energy_after, e.dropped_energy):
            assert abs(before - after - drop) <= 1e-9 * before


def test_divergence_reports_step():
    p = init_params(TINY, 0)
    with pytest.raises(DivergenceError) as exc:
        train(p, TINY_SPEC, quiet(steps=200, lr=1e4, optimizer="sgd"))
    assert exc.value.step >= 1
    assert len(exc.value.log.task_trace) == exc.value.step


def test_default_toy_run_halves_loss():
    _, mlog = train(init_params(MoeConfig(), 0), SyntheticTaskSpec(), TrainConfig(log_every=50))
    assert mlog.task_trace[-1] <= 0.5 * mlog.task_trace[0]


# ---------------------------------------------------------------- measurements


def test_gradient_alignment_rho_one():
    spec = SyntheticTaskSpec(d=16, r=3, rho=1.0, n_tokens=64)
    for variant in ("baseline", "sd"):
        p = init_params(MoeConfig(d_model=16, d_ff=24, n_experts=3, variant=variant, k=2), 2)
        ga = measure_gradient_alignment(p, spec)
        assert ga.experts
        for i in ga.experts:
            assert ga.alignment_to_c[i] == pytest.approx(1.0, abs=1e-6)
            assert ga.support_ratio[i] <= 1e-9


def test_gradient_alignment_excludes_idle_experts():
    spec = SyntheticTaskSpec(d=8, r=2, rho=1.0, n_tokens=32, seed=3)
    p = init_params(MoeConfig(d_model=8, d_ff=12, n_experts=3, top_n=1), 3)
    c = planted_task(spec).basis
    a = c[:, 0]
    # expert 2 sees logit 0, one of the opposite rows always scores >= 0
    p.w_gate[:] = np.stack([a, -a, np.zeros(8)])
    ga = measure_gradient_alignment(p, spec)
    assert ga.excluded == [2]
    assert ga.experts == [0, 1]
    assert ga.similarity.n == 2


def test_rank_sweep_rows_and_determinism():
    run = quiet(steps=15, lr=1e-2)
    rows = rank_sweep(TINY, TINY_SPEC, run, [1, 2, 2])
    assert [r["k"] for r in rows] == [1, 2, 2]
    assert all(math.isfinite(r["final_loss"]) for r in rows)
    assert rows[1] == rows[2]


def test_lr_stress_schema_and_tiny_lr():
    run = quiet(steps=15)
    rows = lr_stress(TINY, TINY_SPEC, run, [1e-4, 1e5])
    assert [(r["variant"], r["lr"]) for r in rows] == [
        ("baseline", 1e-4), ("baseline", 1e5), ("sd", 1e-4), ("sd", 1e5)
    ]
    assert set(rows[0]) == {"variant", "lr", "diverged", "divergence_step", "peak_aux_loss", "final_task_loss"}
    assert rows[0]["diverged"] == 0 and rows[2]["diverged"] == 0
    with pytest.raises(ValueError):
        lr_stress(TINY, TINY_SPEC, run, [1e-2, 1e-3])


def test_specialization_report_at_sd_init():
    p = init_params(MoeConfig(variant="sd"), 0)
    rep = specialization_report(p)
    assert rep.head_rank == 1
    assert rep.head_similarity <= 0.5
    assert len(rep.gate_alignment) == 4
    assert all(np.all((g >= 0) & (g <= 1 + 1e-12)) for g in rep.gate_alignment)
    assert head_similarity(p).n == 4
