import numpy as np
import pytest
from hypothesis import given, strategies as st

from synav.data_synth import DEFAULT, gen_identity, make_sample, render_audio
from synav.latent_codec import RawAudio, RawVideo
from synav.metrics import (SyncUndefinedError, aggregate, make_report, metric_identity_sim, metric_spk_conf,
                           metric_sync_offset, metric_timbre_sim, sample_metrics)


def test_identity_self_match_and_blank():
    s = make_sample(1, 2)
    for ident in s.identities:
        assert metric_identity_sim(s.video, ident) >= 0.99
    assert metric_identity_sim(RawVideo(np.zeros((8, 16, 16))), s.identities[0]) == 0.0


# mean over noise seeds 0-9 for gen_identity(3); np.corrcoef brute force agrees to 1e-16
NOISE_BASELINE = 0.22201069369622636


def test_identity_noise_baseline():
    ident = gen_identity(3)
    sims = [metric_identity_sim(RawVideo(np.random.default_rng(k).uniform(-1, 1, (8, 16, 16))), ident)
            for k in range(10)]
    assert np.mean(sims) < 0.3
    assert np.mean(sims) == pytest.approx(NOISE_BASELINE, abs=1e-12)


def test_identity_distinguishes_other_glyphs():
    s = make_sample(2, 1)
    other = gen_identity(99, avoid=s.identities)
    assert metric_identity_sim(s.video, other) < metric_identity_sim(s.video, s.identities[0])


def test_timbre_sim():
    s = make_sample(4, 2)
    fpw = DEFAULT.frames_per_window
    for k, t in enumerate(s.timbres):
        wins = sorted({f // fpw for a, b in s.script.intervals[k] for f in range(a, b)})
        assert metric_timbre_sim(s.audio, t, wins) >= 0.9
        other = s.timbres[1 - k]
        assert metric_timbre_sim(s.audio, other, wins) < 0.1
    assert metric_timbre_sim(RawAudio(np.zeros(128)), s.timbres[0]) == 0.0


def _shift_audio(audio, frames):
    spf = DEFAULT.samples_per_frame
    out = np.zeros_like(audio.samples)
    if frames >= 0:
        out[frames * spf:] = audio.samples[:len(out) - frames * spf]
    else:
        out[:frames * spf] = audio.samples[-frames * spf:]
    return RawAudio(out, audio.sample_rate)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_sync_offset_ground_truth(seed):
    s = make_sample(seed, 1)
    assert metric_sync_offset(s.video, s.audio) == 0


@pytest.mark.parametrize("shift", [-2, -1, 1, 2])
def test_sync_offset_single_burst_shift(shift):
    # one pulse over frames 3-4 keeps the lag unambiguous
    video = np.full((8, 16, 16), -0.2)
    video[3:5, :8, :8] = 1.0
    audio = np.zeros(128)
    spf = DEFAULT.samples_per_frame
    audio[3 * spf:5 * spf] = 0.3 * np.sin(np.arange(2 * spf))
    assert metric_sync_offset(RawVideo(video), RawAudio(audio)) == 0
    assert metric_sync_offset(RawVideo(video), _shift_audio(RawAudio(audio), shift)) == shift


def test_sync_undefined():
    s = make_sample(0, 1)
    with pytest.raises(SyncUndefinedError):
        metric_sync_offset(s.video, RawAudio(np.zeros(128)))
    with pytest.raises(SyncUndefinedError):
        metric_sync_offset(RawVideo(np.zeros((8, 16, 16))), s.audio)


@pytest.mark.parametrize("seed", [0, 5, 11])
def test_spk_conf_truth_and_swap(seed):
    s = make_sample(seed, 2)
    assert metric_spk_conf(s.video, s.audio, s.identities, s.timbres) == 0.0
    swapped = RawAudio(render_audio(s.timbres[::-1], s.script), s.cfg.sample_rate)
    assert metric_spk_conf(s.video, swapped, s.identities, s.timbres) == 1.0


@given(st.integers(0, 2 ** 20), st.integers(1, 2))
def test_ground_truth_metrics(seed, n):
    s = make_sample(seed, n)
    m = sample_metrics("x", s.video, s.audio, s)
    assert m["id_sim"] >= 0.99 and m["timbre_sim"] >= 0.9
    assert m["sync_offset"] == 0 and m["spk_conf"] == 0.0


def test_aggregates_recompute():
    rows = [sample_metrics(str(i), make_sample(i, 1 + i % 2).video, make_sample(i, 1 + i % 2).audio,
                           make_sample(i, 1 + i % 2)) for i in range(5)]
    rows[2] = dict(rows[2], sync_offset=None)
    rows[3] = dict(rows[3], sync_offset=3)
    rep = make_report(rows, {"a": 1})
    agg = rep["aggregates"]
    assert agg == aggregate(rep["samples"])
    assert agg["id_sim"] == float(np.mean([r["id_sim"] for r in rows]))
    assert agg["sync_within_1"] == 0.6 and agg["sync_offset"] == 0.75 and agg["n"] == 5
    assert make_report(rows, {"a": 1})["config_hash"] != make_report(rows, {"a": 2})["config_hash"]
