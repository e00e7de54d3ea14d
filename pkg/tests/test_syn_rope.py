import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synav.latent_codec import TARGET, reference
from synav.numerics import ContractError, DimensionError, Tensor
from synav.syn_rope import (AllocationError, PositionMap, RopeConfig, apply_rotation, assign_positions,
                            compute_gamma, kernel_profile, rotation_angles)

CFG = RopeConfig()

# Brute-force kernel means over Δ∈[1,8] and Δ∈[142,158], head_dim 8, base 1e4, 1000 vectors, seed 0.
INTRA_MEAN = 0.7406875676626523
CROSS_MEAN = 0.11183329231100952


def test_gamma():
    assert compute_gamma(31, 31) == 1.0
    assert compute_gamma(16, 32) == 0.5
    assert compute_gamma(150, 60) == 2.5
    with pytest.raises(ContractError):
        compute_gamma(0, 4)


def test_config_invariants():
    with pytest.raises(ContractError):
        RopeConfig(head_dim=7)
    with pytest.raises(ContractError):
        RopeConfig(margin_M=31, max_target_len_L=8)
    assert RopeConfig.for_length(8).margin_M == 150
    assert RopeConfig.for_length(100).margin_M == 400


def test_reference_positions():
    pm = assign_positions([(TARGET, 8), (reference(1), 4)], 1.0, CFG)
    assert pm.positions[pm.indices(reference(1))].tolist() == [150, 151, 152, 153]
    assert pm.positions[pm.indices(TARGET)].tolist() == list(range(8))


def test_gamma_scaled_audio():
    cfg = RopeConfig.for_length(16)
    video = assign_positions([(TARGET, 16)], 1.0, cfg, "video")
    audio = assign_positions([(TARGET, 8)], compute_gamma(16, 8), cfg, "audio")
    assert audio.positions[3] == 6.0 == video.positions[6]


def test_empty_references():
    assert assign_positions([(TARGET, 8)], 1.0, CFG).positions.tolist() == list(range(8))


def test_allocation_errors():
    with pytest.raises(AllocationError):
        assign_positions([(TARGET, 8), (reference(0), 2)], 1.0, CFG)
    with pytest.raises(AllocationError):
        assign_positions([(TARGET, 8), (reference(1), 151)], 1.0, CFG)
    with pytest.raises(AllocationError):
        assign_positions([(TARGET, 8), (reference(2), 2)], 1.0, CFG)
    with pytest.raises(AllocationError):
        assign_positions([(TARGET, 9)], 1.0, CFG)


def test_margin_disjointness_three_identities():
    layout = [(TARGET, 8)] + [(reference(k), 150) for k in (1, 2, 3)]
    pm = assign_positions(layout, 1.0, CFG)
    segments = [set(pm.positions[pm.indices(r)].tolist()) for r, _ in layout]
    for i in range(len(segments)):
        for j in range(i + 1, len(segments)):
            assert not segments[i] & segments[j]
    for k in (1, 2, 3):
        p = pm.positions[pm.indices(reference(k))]
        assert p.min() == 150 * k and p.max() == 150 * (k + 1) - 1


def test_identity_segments_shared_across_modalities():
    v = assign_positions([(TARGET, 8), (reference(1), 1), (reference(2), 1)], 1.0, CFG, "video")
    a = assign_positions([(TARGET, 32), (reference(1), 8), (reference(2), 8)], 0.25, CFG, "audio")
    for k in (1, 2):
        assert v.positions[v.indices(reference(k))][0] == a.positions[a.indices(reference(k))][0] == 150 * k


@pytest.mark.parametrize("gamma", [1.0, 2.0, 0.5])
def test_cross_modal_alignment(gamma):
    L_v = 8
    L_a = int(L_v / gamma)
    cfg = RopeConfig.for_length(L_v)
    v = assign_positions([(TARGET, L_v)], 1.0, cfg, "video").positions
    a = assign_positions([(TARGET, L_a)], gamma, cfg, "audio").positions
    for i in range(L_a):
        for j in range(L_v):
            assert (a[i] == v[j]) == (i * gamma == j)


def test_rotation_examples():
    x = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(apply_rotation(Tensor(x), np.zeros(3), CFG).value, x)
    cfg2 = RopeConfig(head_dim=2)
    for p in (0.3, 2.0, -1.5):
        out = apply_rotation(Tensor([[1.0, 0.0]]), np.array([p]), cfg2).value
        assert np.allclose(out, [[math.cos(p), math.sin(p)]], atol=1e-15)
    with pytest.raises(DimensionError):
        apply_rotation(Tensor(np.zeros((3, 8))), np.zeros(2), CFG)
    with pytest.raises(DimensionError):
        apply_rotation(Tensor(np.zeros((3, 6))), np.zeros(3), CFG)


@given(st.integers(0, 2 ** 16), st.booleans())
def test_rotation_preserves_norm(seed, spatial):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 8))
    pm = PositionMap(rng.uniform(0, 500, 5), [TARGET] * 5, rng.integers(0, 4, 5), rng.integers(0, 4, 5))
    y = apply_rotation(Tensor(x), pm, CFG, spatial=spatial).value
    assert np.allclose(np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), atol=1e-9)


def test_shift_invariance_100_draws():
    rng = np.random.default_rng(0)
    for _ in range(100):
        q, k = rng.standard_normal(8), rng.standard_normal(8)
        p, p2, d = rng.uniform(-500, 500, 3)

        def dot(a, b):
            rq = apply_rotation(Tensor(q[None]), np.array([a]), CFG).value[0]
            rk = apply_rotation(Tensor(k[None]), np.array([b]), CFG).value[0]
            return rq @ rk

        base = dot(p, p2)
        assert abs(dot(p + d, p2 + d) - base) <= 1e-6 * max(abs(base), 1e-12) + 1e-12


def test_spatial_split_uses_separate_blocks():
    pm = PositionMap(np.array([5.0]), [TARGET], np.array([2.0]), np.array([3.0]))
    ang = rotation_angles(pm, CFG, spatial=True)[0]
    assert ang[0] == 5.0 and ang[2] == 2.0 and ang[3] == 3.0


def test_kernel_profile_examples():
    prof = kernel_profile(8, 1e4, [0.0, 1.0, 37.0, 150.0])
    assert prof[0] == pytest.approx(1.0, abs=1e-15)
    assert all(v <= 1.0 + 1e-12 for v in prof)


def _brute_profile(offsets, head_dim=8, base=1e4, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, head_dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    out = []
    for d in offsets:
        acc = 0.0
        for m in range(head_dim // 2):
            th = d * base ** (-2 * m / head_dim)
            rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
            pair = x[:, 2 * m:2 * m + 2]
            acc = acc + np.sum((pair @ rot.T) * pair, axis=1)
        out.append(float(acc.mean()))
    return out


def test_kernel_profile_ordering_matches_oracle():
    intra, cross = range(1, 9), range(142, 159)
    got_i, got_c = np.mean(kernel_profile(8, 1e4, intra)), np.mean(kernel_profile(8, 1e4, cross))
    assert got_i == pytest.approx(np.mean(_brute_profile(intra)), abs=1e-12)
    assert got_c == pytest.approx(np.mean(_brute_profile(cross)), abs=1e-12)
    assert got_i == pytest.approx(INTRA_MEAN, abs=1e-12)
    assert got_c == pytest.approx(CROSS_MEAN, abs=1e-12)
    assert got_c < got_i


def test_self_similarity_argmax_at_zero():
    offsets = np.arange(-300, 301, 1.0)
    prof = kernel_profile(8, 1e4, offsets)
    assert offsets[int(np.argmax(prof))] == 0.0
