import numpy as np
import pytest
from hypothesis import given, strategies as st

from synav.conditioning import (R2AV, RA2V, RV2AV, CompositionError, ConditionBundle, InpairLayout,
                                UnsupportedTaskError, build_masks, compose, derive_task)
from synav.latent_codec import TARGET, Codec, RawAudio, RawVideo, reference
from synav.numerics import ContractError
from synav.syn_rope import AllocationError, RopeConfig, assign_positions

CODEC = Codec()
CFG = RopeConfig()


def latents(seed, frames=8, n_ids=2):
    rng = np.random.default_rng(seed)
    z_v = CODEC.encode(RawVideo(rng.uniform(-1, 1, (frames, 16, 16))))
    z_a = CODEC.encode(RawAudio(rng.uniform(-1, 1, 16 * frames)))
    ids = [CODEC.encode(RawVideo(rng.uniform(-1, 1, (1, 8, 8))), reference(k)) for k in range(1, n_ids + 1)]
    tims = [CODEC.encode(RawAudio(rng.uniform(-1, 1, 32)), reference(k)) for k in range(1, n_ids + 1)]
    src = CODEC.encode(RawVideo(rng.uniform(-1, 1, (frames, 16, 16))))
    dri = CODEC.encode(RawAudio(rng.uniform(-1, 1, 16 * frames)))
    return z_v, z_a, ids, tims, src, dri


def test_null_structural_is_pure_concatenation():
    z_v, z_a, ids, tims, _, _ = latents(0)
    c = compose(z_v, z_a, ConditionBundle(ids, tims), CFG)
    assert np.array_equal(c.x_v, np.concatenate([z_v.tokens] + [r.tokens for r in ids]))
    assert np.array_equal(c.x_a, np.concatenate([z_a.tokens] + [r.tokens for r in tims]))
    assert not c.additive_v.any() and not c.additive_a.any()


def test_zero_target_with_source_equals_source():
    z_v, z_a, ids, tims, src, _ = latents(1)
    zero = z_v.with_tokens(np.zeros_like(z_v.tokens))
    c = compose(zero, z_a, ConditionBundle(ids, tims, source_video=src), CFG)
    assert np.array_equal(c.x_v[c.target_slice_v], src.tokens)


@given(st.integers(0, 2 ** 16), st.integers(0, 2), st.booleans())
def test_additive_zero_over_references(seed, n_ids, use_src):
    z_v, z_a, ids, tims, src, dri = latents(seed, n_ids=n_ids)
    bundle = ConditionBundle(ids, [] if not use_src else tims, src if use_src else None,
                             None if use_src else dri)
    c = compose(z_v, z_a, bundle, CFG)
    ref_v = ~c.is_target_v
    ref_a = ~c.is_target_a
    assert not c.additive_v[ref_v].any() and not c.additive_a[ref_a].any()
    assert np.array_equal(c.x_v[ref_v], np.concatenate([r.tokens for r in ids]) if ids else c.x_v[ref_v])


def test_toggle_equivalence_zero_canvas():
    z_v, z_a, ids, tims, src, _ = latents(2)
    zero_src = src.with_tokens(np.zeros_like(src.tokens))
    a = compose(z_v, z_a, ConditionBundle(ids, tims), CFG)
    b = compose(z_v, z_a, ConditionBundle(ids, tims, source_video=zero_src), CFG)
    assert np.array_equal(a.x_v, b.x_v) and np.array_equal(a.x_a, b.x_a)
    assert derive_task(ConditionBundle(ids, tims)).kind == R2AV
    assert derive_task(ConditionBundle(ids, tims, source_video=zero_src)).kind == RV2AV


def test_positions_two_identities():
    z_v, z_a, ids, tims, _, _ = latents(3)
    c = compose(z_v, z_a, ConditionBundle(ids, tims), CFG)
    tv = np.unique(c.pos_v.positions).tolist()
    assert tv == list(range(8)) + [150, 300]
    oracle = assign_positions([(TARGET, 32), (reference(1), 8), (reference(2), 8)], 0.25, CFG, "audio")
    assert np.array_equal(c.pos_a.positions, oracle.positions)


def test_references_sorted_by_k():
    z_v, z_a, ids, tims, _, _ = latents(4)
    a = compose(z_v, z_a, ConditionBundle(ids, tims), CFG)
    b = compose(z_v, z_a, ConditionBundle(ids[::-1], tims[::-1]), CFG)
    assert np.array_equal(a.x_v, b.x_v) and np.array_equal(a.pos_a.positions, b.pos_a.positions)


def test_composition_errors():
    z_v, z_a, ids, tims, src, dri = latents(5)
    short = src.with_tokens(src.tokens[:-4])
    with pytest.raises(CompositionError):
        compose(z_v, z_a, ConditionBundle(ids, tims, source_video=short), CFG)
    with pytest.raises(CompositionError):
        compose(z_v, z_a, ConditionBundle(ids, [], driving_audio=dri.with_tokens(dri.tokens[:8])), CFG)
    with pytest.raises(AllocationError):
        compose(z_v, z_a, ConditionBundle([ids[0].with_role(reference(0))], []), CFG)


@given(st.integers(1, 8), st.integers(0, 2))
def test_lengths_depend_only_on_shapes(frames, n_ids):
    z_v, z_a, ids, tims, _, _ = latents(frames, frames=frames, n_ids=n_ids)
    c = compose(z_v, z_a, ConditionBundle(ids, tims), CFG)
    assert c.x_v.shape[0] == z_v.length + sum(r.length for r in ids)
    assert c.x_a.shape[0] == z_a.length + sum(r.length for r in tims)


def test_derive_task_table():
    z_v, z_a, ids, tims, src, dri = latents(6)
    assert derive_task(ConditionBundle(ids, tims)).kind == R2AV
    rv = derive_task(ConditionBundle(ids, tims, source_video=src))
    assert rv.kind == RV2AV and rv.has_timbre_refs and rv.has_source_video
    ra = derive_task(ConditionBundle(ids, [], driving_audio=dri))
    assert ra.kind == RA2V and not ra.has_timbre_refs and ra.has_driving_audio
    with pytest.raises(UnsupportedTaskError):
        derive_task(ConditionBundle(ids, tims, source_video=src, driving_audio=dri))
    with pytest.raises(UnsupportedTaskError):
        derive_task(ConditionBundle(ids, tims, driving_audio=dri))


def test_masks():
    grid = (8, 2, 2)
    layout = InpairLayout(grid, ((3, 0, 2, 0, 2),), ((4, 12),))
    mv, ma = build_masks(1, layout, 32, 32)
    assert np.flatnonzero(mv).tolist() == [12, 13, 14, 15]
    assert np.flatnonzero(ma).tolist() == list(range(4, 12))
    for stage, inpair in ((2, True), (2, False), (3, False)):
        mv, ma = build_masks(stage, layout, 32, 32, inpair)
        assert not mv.any() and not ma.any()
    mv3, _ = build_masks(3, layout, 32, 32, inpair=True)
    assert np.array_equal(mv3, build_masks(1, layout, 32, 32)[0])
    mv, ma = build_masks(1, InpairLayout(grid), 32, 32)
    assert not mv.any() and not ma.any()
    with pytest.raises(ContractError):
        build_masks(1, InpairLayout(grid, ((8, 0, 1, 0, 1),)), 32, 32)
    with pytest.raises(ContractError):
        build_masks(1, InpairLayout(grid, (), ((30, 40),)), 32, 32)
