import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdmoe.errors import NotOrthonormalError, SdMoeError, ShapeError
from sdmoe.spectral_metrics import (
    AnalysisConfig,
    SubspaceInterval,
    activation_ratio,
    comparison_basis,
    data_subspace_similarity,
    energy_cdf,
    gate_alignment_profile,
    gradient_subspace_similarity,
    interval_similarity_scan,
    pairwise_expert_similarity,
    principal_similarity,
    shuffle_projection_delta,
)


def rand_basis(rng, n, r):
    return np.linalg.qr(rng.standard_normal((n, r)))[0]


def rand_rotation(rng, r):
    q, rr = np.linalg.qr(rng.standard_normal((r, r)))
    return q * np.sign(np.diag(rr))


E = np.eye(4)


def test_analysis_config_head_rank():
    cfg = AnalysisConfig()
    assert cfg.head_rank(32) == 1
    assert cfg.head_rank(150) == 2
    assert AnalysisConfig(head_fraction=0.25).head_rank(8) == 2
    with pytest.raises(ValueError):
        AnalysisConfig(head_fraction=0.0)


def test_comparison_basis_sides():
    w = np.diag([2.0, 1.0])
    up = comparison_basis(w, "up_or_gate")
    np.testing.assert_allclose(up.basis, np.eye(2), atol=1e-15)
    down = comparison_basis(w, "down")
    np.testing.assert_allclose(down.basis, np.eye(2), atol=1e-15)
    w = np.random.default_rng(0).standard_normal((8, 6))
    for kind, rows in (("up_or_gate", 6), ("down", 8)):
        b = comparison_basis(w, kind).basis
        assert b.shape[0] == rows
        assert np.max(np.abs(b.T @ b - np.eye(6))) <= 1e-10
    with pytest.raises(ValueError):
        comparison_basis(w, "sideways")


def test_principal_similarity_examples():
    assert principal_similarity(E[:, :2], E[:, :2]) == pytest.approx(1.0, abs=1e-15)
    assert principal_similarity(E[:, :2], E[:, 2:]) == 0.0
    b2 = ((E[:, 0] + E[:, 1]) / math.sqrt(2))[:, None]
    assert principal_similarity(E[:, :1], b2) == pytest.approx(0.70710678, abs=1e-8)


def test_principal_similarity_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        b1, b2 = rand_basis(rng, 16, 3), rand_basis(rng, 16, 3)
        ref = np.linalg.svd(b1.T @ b2, compute_uv=False)[0]
        assert abs(principal_similarity(b1, b2) - ref) <= 1e-10


def test_principal_similarity_rejects_non_orthonormal():
    with pytest.raises(NotOrthonormalError):
        principal_similarity(2 * E[:, :2], E[:, :2])
    with pytest.raises(ShapeError):
        principal_similarity(E[:, :2], np.eye(3)[:, :2])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 20), data=st.data())
def test_principal_similarity_properties(seed, n, data):
    r1 = data.draw(st.integers(1, n - 1))
    r2 = data.draw(st.integers(1, n - 1))
    rng = np.random.default_rng(seed)
    b1, b2 = rand_basis(rng, n, r1), rand_basis(rng, n, r2)
    s = principal_similarity(b1, b2)
    assert -1e-12 <= s <= 1 + 1e-12
    assert principal_similarity(b2, b1) == s
    assert principal_similarity(b1, b1) == pytest.approx(1.0, abs=1e-9)
    rot = principal_similarity(b1 @ rand_rotation(rng, r1), b2 @ rand_rotation(rng, r2))
    assert abs(rot - s) <= 1e-10


def test_principal_similarity_monotone_under_containment():
    rng = np.random.default_rng(2)
    for _ in range(10):
        full = rand_basis(rng, 12, 6)
        b1 = rand_basis(rng, 12, 2)
        prev = -1.0
        for r in range(1, 7):
            s = principal_similarity(b1, full[:, :r])
            assert s >= prev - 1e-12
            prev = s


def test_pairwise_expert_similarity_examples():
    rng = np.random.default_rng(3)
    b = rand_basis(rng, 8, 4)
    iv = SubspaceInterval(1, 2)
    np.testing.assert_allclose(pairwise_expert_similarity([b, b, b], iv).values, np.ones((3, 3)), atol=1e-12)
    blocks = [np.eye(8)[:, 0:2], np.eye(8)[:, 2:4], np.eye(8)[:, 4:6]]
    np.testing.assert_array_equal(pairwise_expert_similarity(blocks, iv).values, np.eye(3))


def test_pairwise_expert_similarity_matches_scalar_op():
    rng = np.random.default_rng(4)
    bases = [rand_basis(rng, 10, 5) for _ in range(4)]
    iv = SubspaceInterval(2, 4)
    m = pairwise_expert_similarity(bases, iv).values
    for i in range(4):
        for j in range(4):
            ref = 1.0 if i == j else principal_similarity(bases[i][:, 1:4], bases[j][:, 1:4])
            assert abs(m[i, j] - ref) <= 1e-12
    assert np.array_equal(m, m.T)


def test_pairwise_interval_out_of_range():
    with pytest.raises(ShapeError):
        pairwise_expert_similarity([np.eye(4)[:, :2]] * 2, SubspaceInterval(1, 3))


def test_energy_cdf_examples():
    np.testing.assert_allclose(energy_cdf([3.0, 1.0]), [0.9, 1.0], atol=1e-15)
    np.testing.assert_allclose(energy_cdf([1.0] * 4), [0.25, 0.5, 0.75, 1.0], atol=1e-15)


def test_energy_cdf_matches_direct_sum():
    s = np.sort(np.random.default_rng(5).random(20))[::-1]
    sq = s * s
    ref = np.array([sum(sq[: i + 1]) / sum(sq) for i in range(20)])
    out = energy_cdf(s)
    assert np.max(np.abs(out - ref)) <= 1e-14
    assert np.all(np.diff(out) >= 0) and out[-1] == 1.0


def test_energy_cdf_rejects_zero():
    with pytest.raises(SdMoeError):
        energy_cdf([0.0, 0.0])


def test_interval_scan_examples():
    rng = np.random.default_rng(6)
    b = rand_basis(rng, 8, 8)
    for _, mean in interval_similarity_scan([b, b], 0.25):
        assert mean == pytest.approx(1.0, abs=1e-12)
    blocks = [np.eye(16)[:, :8], np.eye(16)[:, 8:]]
    for _, mean in interval_similarity_scan(blocks, 0.25):
        assert mean == 0.0


def test_interval_scan_matches_manual():
    rng = np.random.default_rng(7)
    bases = [rand_basis(rng, 12, 8) for _ in range(3)]
    scan = interval_similarity_scan(bases, 0.25)
    assert [(iv.start, iv.end) for iv, _ in scan] == [(1, 2), (3, 4), (5, 6), (7, 8)]
    scan = interval_similarity_scan(bases, 0.5)
    assert [(iv.start, iv.end) for iv, _ in scan] == [(1, 4), (5, 8)]
    for iv, mean in scan:
        cols = slice(iv.start - 1, iv.end)
        vals = [principal_similarity(bases[i][:, cols], bases[j][:, cols]) for i, j in [(0, 1), (0, 2), (1, 2)]]
        assert abs(mean - np.mean(vals)) <= 1e-12


def test_activation_ratio_limits():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((50, 6))
    v = rand_basis(rng, 6, 3)
    np.testing.assert_array_equal(activation_ratio(x, v, AnalysisConfig(activation_threshold_scale=1e-12)), np.ones(3))
    np.testing.assert_array_equal(activation_ratio(x, v, AnalysisConfig(activation_threshold_scale=1e6)), np.zeros(3))


def test_activation_ratio_constructed():
    signs = np.where(np.arange(40) % 2 == 0, 1.0, -1.0)
    x = np.column_stack([10 * signs, 0.1 * signs, -0.1 * signs, 0.1 * signs])
    out = activation_ratio(x, np.eye(4), AnalysisConfig(activation_threshold_scale=1.0))
    np.testing.assert_array_equal(out, [1.0, 0.0, 0.0, 0.0])


def flat_cos(a, b):
    return float(np.dot(a.ravel(), b.ravel()) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_shuffle_identity_and_constant_rows():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((10, 5))
    head, tail = np.eye(5)[:, :2], np.eye(5)[:, 2:]
    assert shuffle_projection_delta(x, head, tail, np.arange(10)) == pytest.approx((1.0, 1.0), abs=1e-15)
    xc = np.tile(rng.standard_normal(5), (10, 1))
    assert shuffle_projection_delta(xc, head, tail, rng.permutation(10)) == pytest.approx((1.0, 1.0), abs=1e-12)


def test_shuffle_position_dependent_head():
    rng = np.random.default_rng(10)
    n, d = 64, 6
    t = np.linspace(-1, 1, n)
    x = np.zeros((n, d))
    x[:, 0], x[:, 1] = 3 * t, 3 * t**3
    x[:, 2:] = rng.standard_normal((n, d - 2))
    head, tail = np.eye(d)[:, :2], np.eye(d)[:, 2:]
    perm = np.arange(n)[::-1]
    ch, ct = shuffle_projection_delta(x, head, tail, perm)
    assert ch == pytest.approx(flat_cos(x @ head, x[perm] @ head), abs=1e-14)
    assert ct == pytest.approx(flat_cos(x @ tail, x[perm] @ tail), abs=1e-14)
    assert ch < ct


def test_shuffle_rejects_bad_perm():
    with pytest.raises(ValueError):
        shuffle_projection_delta(np.ones((3, 2)), np.eye(2)[:, :1], np.eye(2)[:, 1:], [0, 0, 1])


def test_gradient_subspace_similarity_examples():
    rng = np.random.default_rng(11)
    g = rng.standard_normal((7, 5))
    assert gradient_subspace_similarity(g, 2 * g, 3) == pytest.approx(1.0, abs=1e-9)
    assert gradient_subspace_similarity(g, -0.5 * g, 2, side="left") == pytest.approx(1.0, abs=1e-9)
    e = np.eye(4)
    assert gradient_subspace_similarity(np.outer(e[0], e[0]), np.outer(e[1], e[1]), 1) == pytest.approx(0.0, abs=1e-15)
    x = rng.standard_normal(5)
    g1, g2 = np.outer(rng.standard_normal(7), x), np.outer(rng.standard_normal(7), x)
    assert gradient_subspace_similarity(g1, g2, 1) == pytest.approx(1.0, abs=1e-12)


def test_gate_alignment_examples():
    rng = np.random.default_rng(12)
    b = rand_basis(rng, 6, 4)
    np.testing.assert_allclose(gate_alignment_profile(b[:, 0], b), [1, 0, 0, 0], atol=1e-12)
    w = rand_basis(rng, 6, 6)[:, 5]
    w = w - b @ (b.T @ w)
    np.testing.assert_allclose(gate_alignment_profile(w, b), np.zeros(4), atol=1e-12)
    w = (b[:, 0] + b[:, 1]) / math.sqrt(2)
    np.testing.assert_allclose(gate_alignment_profile(w, b), [0.70710678, 0.70710678, 0, 0], atol=1e-8)


def test_data_subspace_similarity_examples():
    rng = np.random.default_rng(13)
    xa = rng.standard_normal((40, 8)) * np.array([5, 4, 3, 2, 1, 1, 1, 1])
    assert data_subspace_similarity(xa, xa[rng.permutation(40)], 0.25) == pytest.approx(1.0, abs=1e-9)
    e = np.eye(8)
    xa = np.outer(rng.standard_normal(20), e[0])
    xb = np.outer(rng.standard_normal(20), e[1])
    assert data_subspace_similarity(xa, xb, 1 / 8) == pytest.approx(0.0, abs=1e-12)
