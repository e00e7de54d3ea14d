import dataclasses
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synav import numerics as nx
from synav.conditioning import R2AV, RA2V, RV2AV
from synav.data_synth import make_inpair, make_manifest, make_sample
from synav.latent_codec import Codec
from synav.model import DenoiserOutput, ModelConfig, init_params
from synav.numerics import ContractError, Tensor
from synav.training import (CurriculumState, DegenerateLossError, NoiseSchedule, TrainConfig, TrainingError,
                            add_noise, batch_loss, draw_instance, load_state, masked_loss, plan_instance,
                            prepare, run_curriculum, run_stage, sample_task, save_state, train_step)

SCHED = NoiseSchedule()
CODEC = Codec()


def test_schedule_endpoints_and_monotone():
    assert SCHED.alpha_bar(0.0) == pytest.approx(1 - 1e-4, abs=1e-15)
    assert SCHED.alpha_bar(1.0) == pytest.approx(1e-4, abs=1e-15)
    ts = np.linspace(0, 1, 101)
    assert (np.diff([SCHED.alpha_bar(t) for t in ts]) < 0).all()
    with pytest.raises(ContractError):
        SCHED.alpha_bar(1.01)


def test_add_noise_endpoints():
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    assert np.abs(add_noise(z0, 0.0, eps, SCHED) - z0).max() < 0.01 * np.abs(eps).max() + 1e-4
    assert np.abs(add_noise(z0, 1.0, eps, SCHED) - eps).max() < 0.01 * np.abs(z0).max() + 1e-4
    with pytest.raises(nx.DimensionError):
        add_noise(z0, 0.5, eps[:4], SCHED)


def test_add_noise_energy_monte_carlo():
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal(64)
    t = 0.4
    a = SCHED.alpha_bar(t)
    energy = np.mean([np.sum(add_noise(z0, t, rng.standard_normal(64), SCHED) ** 2) for _ in range(1000)])
    expect = a * np.sum(z0 ** 2) + (1 - a) * 64
    assert abs(energy - expect) / expect < 0.05


def _pred(v, a):
    return DenoiserOutput(Tensor(v, name="pv"), Tensor(a, name="pa"))


def test_masked_loss_examples():
    rng = np.random.default_rng(2)
    ev, ea = rng.standard_normal((6, 16)), rng.standard_normal((4, 4))
    assert masked_loss(ev, ea, _pred(ev, ea), np.zeros(6), np.zeros(4)).value == 0.0
    junk = _pred(rng.standard_normal((6, 16)), rng.standard_normal((4, 4)))
    assert masked_loss(ev, ea, junk, np.ones(6), np.zeros(4), 1.0, 0.0).value == 0.0
    ones = _pred(ev - 1.0, ea - 1.0)
    assert masked_loss(ev, ea, ones, np.zeros(6), np.zeros(4)).value == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(DegenerateLossError):
        masked_loss(ev, ea, junk, np.ones(6), np.ones(4))


@given(st.integers(0, 2 ** 16))
def test_loss_invariant_to_masked_values(seed):
    rng = np.random.default_rng(seed)
    ev, ea = rng.standard_normal((6, 16)), rng.standard_normal((5, 4))
    pv, pa = rng.standard_normal((6, 16)), rng.standard_normal((5, 4))
    mv, ma = (rng.random(6) < 0.4).astype(float), (rng.random(5) < 0.4).astype(float)
    mv[0], ma[0] = 0.0, 0.0
    base = masked_loss(ev, ea, _pred(pv, pa), mv, ma).value
    ev2, pv2, pa2 = ev.copy(), pv.copy(), pa.copy()
    ev2[mv == 1] += rng.standard_normal(ev2[mv == 1].shape) * 100
    pv2[mv == 1] = rng.standard_normal(pv2[mv == 1].shape)
    pa2[ma == 1] -= 7.0
    assert masked_loss(ev2, ea, _pred(pv2, pa2), mv, ma).value == base


def test_zero_gradient_at_masked_coordinates():
    rng = np.random.default_rng(3)
    ev, ea = rng.standard_normal((4, 16)), rng.standard_normal((3, 4))
    pv, pa = rng.standard_normal((4, 16)), rng.standard_normal((3, 4))
    mv, ma = np.array([1.0, 0, 1, 0]), np.array([0.0, 1, 0])
    grads = nx.backward(masked_loss(ev, ea, _pred(pv, pa), mv, ma))
    assert np.abs(grads["pv"][mv == 1]).max() == 0.0 and np.abs(grads["pa"][ma == 1]).max() == 0.0
    fd = nx.finite_diff_grad(lambda d: float(masked_loss(ev, ea, _pred(d["pv"], d["pa"]), mv, ma).value),
                             {"pv": pv, "pa": pa})
    assert np.abs(fd["pv"][mv == 1]).max() <= 1e-8 and np.abs(fd["pa"][ma == 1]).max() <= 1e-8
    assert np.allclose(fd["pv"], grads["pv"], atol=1e-6)


def test_stage2_equals_stage1_with_zero_masks():
    cfg = TrainConfig()
    params = init_params(ModelConfig(), 0)
    params = dataclasses.replace(params, tensors={k: v + 0.1 for k, v in params.tensors.items()})
    inst = make_inpair(make_sample(9, 2))
    one = prepare(inst, 1, np.random.default_rng(5), cfg, params.cfg, SCHED, CODEC)
    two = prepare(inst, 2, np.random.default_rng(5), cfg, params.cfg, SCHED, CODEC)
    assert one.composed.mask_v.any() and not two.composed.mask_v.any()
    zeroed = dataclasses.replace(one, composed=dataclasses.replace(
        one.composed, mask_v=np.zeros_like(one.composed.mask_v), mask_a=np.zeros_like(one.composed.mask_a)))
    assert batch_loss([zeroed], params, cfg).value.tobytes() == batch_loss([two], params, cfg).value.tobytes()


def test_sample_task_ratio_and_determinism():
    counts = Counter(sample_task(np.random.default_rng([0, i])) for i in range(10_000))
    for task, p in ((R2AV, 0.4), (RV2AV, 0.3), (RA2V, 0.3)):
        assert abs(counts[task] / 10_000 - p) <= 0.02
    rng = np.random.default_rng(0)
    assert {sample_task(rng, (1, 0, 0)) for _ in range(200)} == {R2AV}
    a = [sample_task(np.random.default_rng(7)) for _ in range(5)]
    assert len(set(a)) == 1
    with pytest.raises(ContractError):
        sample_task(rng, (0, 0, 0))


def test_curriculum_streams():
    manifest = make_manifest(64, 0)
    cfg = TrainConfig()
    plans = [plan_instance(manifest, 3, n, cfg) for n in range(10_000)]
    counts = Counter(p.task for p in plans)
    for task, p in ((R2AV, 0.4), (RV2AV, 0.3), (RA2V, 0.3)):
        assert abs(counts[task] / 10_000 - p) <= 0.02
    for n in range(64):
        inst = draw_instance(manifest, 1, n, cfg)
        assert inst.source_video is None and inst.driving_audio is None and inst.task == R2AV
        assert inst.inpair and inst.masks(1)[0].any()
        two = draw_instance(manifest, 2, n, cfg)
        assert not two.inpair and not two.masks(2)[0].any() and not two.masks(2)[1].any()


def test_manifest_wraps_with_epochs():
    manifest = make_manifest(4, 0)
    cfg = TrainConfig()
    first = {plan_instance(manifest, 1, n, cfg).entry["seed"] for n in range(4)}
    second = {plan_instance(manifest, 1, n, cfg).entry["seed"] for n in range(4, 8)}
    assert first == second == {e["seed"] for e in manifest}


def test_zero_learning_rate_leaves_params():
    manifest = make_manifest(4, 0)
    cfg = TrainConfig(learning_rate=0.0, batch_size=2)
    params = init_params(ModelConfig(), 0)
    batch = [draw_instance(manifest, 1, n, cfg) for n in range(2)]
    new, state, loss = train_step(batch, CurriculumState(), params, cfg)
    assert all(new.tensors[k].tobytes() == params.tensors[k].tobytes() for k in params.tensors)
    assert state.global_step == 1 and np.isfinite(loss)


def test_single_sample_overfit():
    """Fixed probe batch loss falls below a fifth of its initial value in 200 steps."""
    inst = make_inpair(make_sample(5, 1))
    cfg = TrainConfig(learning_rate=1e-2, batch_size=1, cfg_dropout_p=0.0)

    def probe(p):
        rng = np.random.default_rng(123)
        return float(batch_loss([prepare(inst, 2, rng, cfg, p.cfg, SCHED, CODEC) for _ in range(16)], p, cfg).value)

    params, state = init_params(ModelConfig(), 0), CurriculumState(stage=2)
    before = probe(params)
    for _ in range(200):
        params, state, _ = train_step([inst], state, params, cfg)
    assert probe(params) < 0.2 * before


def test_nan_loss_aborts(monkeypatch):
    import synav.training as tr
    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: Tensor(0.0) if False else _Nan())
    with pytest.raises(TrainingError, match="stage 1"):
        train_step([draw_instance(make_manifest(2, 0), 1, 0, TrainConfig())], CurriculumState(),
                   init_params(ModelConfig(), 0), TrainConfig())


class _Nan:
    value = np.array(np.nan)


def test_resume_is_bitwise(tmp_path):
    manifest = make_manifest(8, 1)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=2, stage_steps=(300, 300, 300))
    p0 = init_params(ModelConfig(), 0)
    straight, s1, l1 = run_stage(manifest, p0, CurriculumState(), cfg, until_step=6)
    half, s2, l2a = run_stage(manifest, p0, CurriculumState(), cfg, until_step=3)
    save_state(tmp_path / "mid.ckpt", half, s2, cfg)
    loaded, s3, cfg3, meta = load_state(tmp_path / "mid.ckpt")
    assert meta["stage"] == 1 and meta["step"] == 3 and cfg3 == cfg
    resumed, s4, l2b = run_stage(manifest, loaded, s3, cfg3, until_step=6)
    assert l1 == l2a + l2b
    assert all(straight.tensors[k].tobytes() == resumed.tensors[k].tobytes() for k in straight.tensors)


def test_curriculum_checkpoints_record_stage(tmp_path):
    manifest = make_manifest(6, 2)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=1, stage_steps=(2, 2, 3), step_scale=1.0)
    records = []
    params, state, history = run_curriculum(manifest, cfg, ModelConfig(), tmp_path, on_step=records.append)
    assert [len(history[s]) for s in (1, 2, 3)] == [2, 2, 3]
    for stage in (1, 2, 3):
        _, st, _, meta = load_state(tmp_path / f"stage{stage}.ckpt")
        assert meta["stage"] == stage == st.stage
    assert [r["stage"] for r in records] == [1, 1, 2, 2, 3, 3, 3]
    assert set(records[0]) == {"step", "stage", "loss", "task"}


def test_config_roundtrip():
    cfg = TrainConfig(learning_rate=2e-3, stage_steps=(5, 6, 7))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig().steps_for(1) == 200 and TrainConfig().steps_for(3) == 400
    with pytest.raises(ContractError):
        TrainConfig(task_ratio=(0, 0, 0))
