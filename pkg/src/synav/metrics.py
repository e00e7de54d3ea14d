"""Toy analogs of identity, timbre, lip-sync and speaker-confusion metrics.

All metrics read decoded media, never latents.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional, Sequence

import numpy as np

from .data_synth import DEFAULT, DataConfig, IdentitySpec, Sample, TimbreSpec, ncc
from .latent_codec import RawAudio, RawVideo

REPORT_VERSION = 1
BURST_THRESHOLD = 0.25


class SyncUndefinedError(ValueError):
    pass


def _windows(audio: RawAudio, cfg: DataConfig) -> np.ndarray:
    n = len(audio.samples) // cfg.window
    return audio.samples[:n * cfg.window].reshape(n, cfg.window)


def burst_windows(audio: RawAudio, cfg: DataConfig = DEFAULT) -> list[int]:
    """Indices of speech windows whose energy exceeds a quarter of the loudest."""
    energy = np.sum(_windows(audio, cfg) ** 2, axis=1)
    top = energy.max() if energy.size else 0.0
    if top <= 0:
        return []
    return [int(i) for i in np.flatnonzero(energy > BURST_THRESHOLD * top)]


def _band_power(win: np.ndarray, freqs: Sequence[int]) -> float:
    spec = np.abs(np.fft.fft(win)) ** 2
    n = len(win)
    return float(sum(spec[f] + spec[n - f] for f in freqs))


def glyph_scores(video: RawVideo, glyph: np.ndarray, cfg: DataConfig = DEFAULT) -> np.ndarray:
    """NCC of ``glyph`` against every (frame, slot) window; shape (F, n_slots)."""
    g = cfg.glyph
    out = np.zeros((video.frames.shape[0], len(cfg.slots)))
    for f, frame in enumerate(video.frames):
        for j, (r, c) in enumerate(cfg.slots):
            out[f, j] = ncc(glyph, frame[r:r + g, c:c + g])
    return out


def metric_identity_sim(generated: RawVideo, ref: IdentitySpec, cfg: DataConfig = DEFAULT) -> float:
    return float(glyph_scores(generated, ref.glyph, cfg).max())


def metric_timbre_sim(generated: RawAudio, ref: TimbreSpec, windows: Optional[Sequence[int]] = None,
                      cfg: DataConfig = DEFAULT) -> float:
    """Share of spectral energy in the reference's bins over burst windows."""
    wins = _windows(generated, cfg)
    idx = burst_windows(generated, cfg) if windows is None else list(windows)
    total = float(sum(np.sum(np.abs(np.fft.fft(wins[i])) ** 2) for i in idx))
    if total <= 0:
        return 0.0
    return float(sum(_band_power(wins[i], ref.freqs) for i in idx) / total)


def video_envelope(video: RawVideo) -> np.ndarray:
    return video.frames.mean(axis=(1, 2))


def audio_envelope(audio: RawAudio, n_frames: int) -> np.ndarray:
    return np.sqrt(np.mean(audio.samples.reshape(n_frames, -1) ** 2, axis=1))


def metric_sync_offset(video: RawVideo, audio: RawAudio, max_lag: int = 3) -> int:
    """Frames by which the audio envelope lags the video pulse envelope."""
    n = video.frames.shape[0]
    a = audio_envelope(audio, n)
    if a.max() <= 0:
        raise SyncUndefinedError("no audio bursts")
    v = video_envelope(video)
    v, a = v - v.mean(), a - a.mean()
    if np.abs(v).max() < 1e-9 or np.abs(a).max() < 1e-12:
        raise SyncUndefinedError("flat envelope")
    best, best_score = 0, -np.inf
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda l: (abs(l), l)):
        if lag >= 0:
            score = float(v[:n - lag] @ a[lag:])
        else:
            score = float(v[-lag:] @ a[:n + lag])
        if score > best_score + 1e-12:
            best, best_score = lag, score
    return best


def locate(video: RawVideo, ident: IdentitySpec, cfg: DataConfig = DEFAULT) -> int:
    """Slot where ``ident``'s glyph is most consistently visible."""
    return int(np.argmax(glyph_scores(video, ident.glyph, cfg).mean(axis=0)))


def metric_spk_conf(video: RawVideo, audio: RawAudio, ids: Sequence[IdentitySpec],
                    timbres: Sequence[TimbreSpec], cfg: DataConfig = DEFAULT) -> float:
    """Fraction of audio bursts voiced by a timbre other than the pulsing glyph's."""
    bursts = burst_windows(audio, cfg)
    if not bursts or not ids:
        return 0.0
    wins = _windows(audio, cfg)
    g, fpw = cfg.glyph, cfg.frames_per_window
    slots = [cfg.slots[locate(video, i, cfg)] for i in ids]
    bright = np.array([[np.abs(f[r:r + g, c:c + g]).mean() for f in video.frames] for r, c in slots])
    bright -= np.median(bright, axis=1, keepdims=True)
    confused = 0
    for w in bursts:
        voice = int(np.argmax([_band_power(wins[w], t.freqs) for t in timbres]))
        face = int(np.argmax(bright[:, w * fpw:(w + 1) * fpw].mean(axis=1)))
        confused += voice != face
    return confused / len(bursts)


# ---------------------------------------------------------------------------
# reports


def sample_metrics(sample_id: str, video: RawVideo, audio: RawAudio, truth: Sample) -> dict:
    ids, tims = truth.identities, truth.timbres
    fpw = truth.cfg.frames_per_window
    tsims = []
    for k, t in enumerate(tims):
        wins = sorted({f // fpw for a, b in truth.script.intervals[k] for f in range(a, b)})
        tsims.append(metric_timbre_sim(audio, t, wins, truth.cfg))
    try:
        sync = metric_sync_offset(video, audio)
    except SyncUndefinedError:
        sync = None
    return {"id": sample_id,
            "id_sim": float(np.mean([metric_identity_sim(video, i, truth.cfg) for i in ids])),
            "timbre_sim": float(np.mean(tsims)) if tsims else 0.0,
            "sync_offset": sync,
            "spk_conf": metric_spk_conf(video, audio, ids, tims, truth.cfg),
            "n_identities": len(ids)}


def aggregate(samples: list[dict]) -> dict:
    agg = {}
    for key in ("id_sim", "timbre_sim", "spk_conf"):
        agg[key] = float(np.mean([s[key] for s in samples])) if samples else 0.0
    syncs = [s["sync_offset"] for s in samples if s["sync_offset"] is not None]
    agg["sync_offset"] = float(np.mean(syncs)) if syncs else None
    agg["sync_within_1"] = float(np.mean([s["sync_offset"] is not None and abs(s["sync_offset"]) <= 1
                                          for s in samples])) if samples else 0.0
    agg["n"] = len(samples)
    return agg


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def make_report(samples: list[dict], config: dict, extra: Optional[dict] = None) -> dict:
    report = {"version": REPORT_VERSION, "config_hash": config_hash(config),
              "samples": samples, "aggregates": aggregate(samples)}
    report.update(extra or {})
    return report
