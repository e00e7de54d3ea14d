"""Procedural talking-glyph clips with exactly known identity, voice and timing.

Each identity is an 8x8 binary glyph drawn in one quadrant of a 16x16 frame;
its voice is a chord of three integer frequencies from a band reserved for
its slot. While an identity speaks its glyph brightens from 0.5 to 1.0 and
its chord sounds; otherwise both are off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .caption import Anchor, StructuredCaption, build_vocab
from .conditioning import R2AV, RA2V, RV2AV, TASKS, InpairLayout, build_masks
from .latent_codec import RawAudio, RawVideo


class GenerationError(RuntimeError):
    pass


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    frames: int = 8
    size: int = 16
    n_samples: int = 128  # audio samples per clip
    frame_rate: int = 8
    sample_rate: int = 128
    glyph: int = 8
    glyph_on: int = 32  # lit pixels per glyph
    n_max: int = 2
    pool_per_slot: int = 4
    window: int = 32  # audio samples per speech window (two frames)
    amplitude: float = 0.3
    patch: int = 4
    chunk: int = 4

    @property
    def samples_per_frame(self) -> int:
        return self.n_samples // self.frames

    @property
    def frames_per_window(self) -> int:
        return self.window // self.samples_per_frame

    @property
    def n_windows(self) -> int:
        return self.frames // self.frames_per_window

    @property
    def slots(self) -> list[tuple[int, int]]:
        g = self.glyph
        return [(r, c) for r in range(0, self.size, g) for c in range(0, self.size, g)]

    def band(self, slot: int) -> range:
        width = (self.window // 2) // self.n_max
        return range(slot * width + 1, (slot + 1) * width)


DEFAULT = DataConfig()


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    glyph: np.ndarray = field(compare=False)
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TimbreSpec:
    slot: int
    seed: int
    freqs: tuple[int, ...]


@dataclass(frozen=True)
class Script:
    slots: tuple[int, ...]  # quadrant index per identity
    intervals: tuple[tuple[tuple[int, int], ...], ...]  # per identity, [start, end) frames

    def speaker_at(self, frame: int) -> int:
        for k, ivs in enumerate(self.intervals):
            if any(a <= frame < b for a, b in ivs):
                return k
        return -1


@dataclass
class Sample:
    seed: int
    video: RawVideo
    audio: RawAudio
    caption: StructuredCaption
    identities: list[IdentitySpec]
    timbres: list[TimbreSpec]
    script: Script
    inpair_frames: tuple[int, ...]  # frame each identity's reference crop is taken from
    background: float
    cfg: DataConfig = DEFAULT

    def glyph_box(self, k: int) -> tuple[int, int]:
        return self.cfg.slots[self.script.slots[k]]

    def inpair_layout(self) -> InpairLayout:
        cfg, p = self.cfg, self.cfg.patch
        grid = (cfg.frames, cfg.size // p, cfg.size // p)
        regions, spans = [], []
        for k in range(len(self.identities)):
            r, c = self.glyph_box(k)
            regions.append((self.inpair_frames[k], r // p, (r + cfg.glyph) // p, c // p, (c + cfg.glyph) // p))
            a0 = self.timbre_span(k)[0] // cfg.chunk
            spans.append((a0, a0 + cfg.window // cfg.chunk))
        return InpairLayout(grid, tuple(regions), tuple(spans))

    def timbre_span(self, k: int) -> tuple[int, int]:
        start = self.script.intervals[k][0][0] * self.cfg.samples_per_frame
        return start, start + self.cfg.window


# ---------------------------------------------------------------------------
# identities and voices


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped arrays (0 if either is flat)."""
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 1e-12 else 0.0


def gen_identity(seed: int, avoid: Sequence[IdentitySpec] = (), cfg: DataConfig = DEFAULT) -> IdentitySpec:
    rng = np.random.default_rng([seed, 1])
    n = cfg.glyph * cfg.glyph
    for _ in range(1000):
        flat = np.zeros(n)
        flat[rng.permutation(n)[:cfg.glyph_on]] = 1.0
        glyph = flat.reshape(cfg.glyph, cfg.glyph)
        if all(ncc(glyph, o.glyph) < 0.8 for o in avoid):
            color = tuple(float(v) for v in rng.uniform(0.2, 1.0, 3))
            return IdentitySpec(seed, glyph, color)
    raise GenerationError(f"no sufficiently distinct glyph for seed {seed} after 1000 tries")


def gen_timbre(slot: int, seed: int, cfg: DataConfig = DEFAULT) -> TimbreSpec:
    if not 0 <= slot < cfg.n_max:
        raise GenerationError(f"timbre slot {slot} outside [0, {cfg.n_max})")
    rng = np.random.default_rng([seed, 2, slot])
    band = np.array(cfg.band(slot))
    freqs = tuple(int(f) for f in np.sort(rng.choice(band, size=3, replace=False)))
    return TimbreSpec(slot, seed, freqs)


@lru_cache(maxsize=8)
def identity_pool(cfg: DataConfig = DEFAULT) -> tuple[tuple[IdentitySpec, TimbreSpec], ...]:
    """Recurring cast: ``pool_per_slot`` people per slot, all glyphs mutually distinct."""
    people: list[IdentitySpec] = []
    pool = []
    for slot in range(cfg.n_max):
        for j in range(cfg.pool_per_slot):
            ident = gen_identity(100 * slot + j, avoid=people, cfg=cfg)
            people.append(ident)
            pool.append((ident, gen_timbre(slot, j, cfg)))
    return tuple(pool)


def cast_for(seed: int, n_identities: int, cfg: DataConfig = DEFAULT) -> tuple[list[IdentitySpec], list[TimbreSpec]]:
    rng = np.random.default_rng([seed, 3])
    pool = identity_pool(cfg)
    ids, tims = [], []
    for slot in range(n_identities):
        ident, tim = pool[slot * cfg.pool_per_slot + int(rng.integers(cfg.pool_per_slot))]
        ids.append(ident)
        tims.append(tim)
    return ids, tims


# ---------------------------------------------------------------------------
# scripts and rendering


def gen_script(n_identities: int, seed: int, cfg: DataConfig = DEFAULT,
               avoid_slots: Sequence[int] = ()) -> Script:
    rng = np.random.default_rng([seed, 4])
    free = [s for s in range(len(cfg.slots))]
    for _ in range(1000):
        slots = tuple(int(s) for s in rng.choice(free, size=n_identities, replace=False))
        if not any(a == b for a, b in zip(slots, avoid_slots)):
            break
    else:
        raise GenerationError("could not place glyphs away from the avoided slots")
    for _ in range(1000):
        turns = rng.integers(-1, n_identities, size=cfg.n_windows)
        if (turns == -1).any() and all((turns == k).any() for k in range(n_identities)):
            break
    else:
        raise GenerationError("could not draw a speaking schedule")
    fpw = cfg.frames_per_window
    intervals = []
    for k in range(n_identities):
        ivs: list[list[int]] = []
        for w, who in enumerate(turns):
            if who != k:
                continue
            if ivs and ivs[-1][1] == w * fpw:
                ivs[-1][1] = (w + 1) * fpw
            else:
                ivs.append([w * fpw, (w + 1) * fpw])
        intervals.append(tuple((a, b) for a, b in ivs))
    return Script(slots, tuple(intervals))


def validate_script(script: Script, cfg: DataConfig = DEFAULT) -> None:
    if len(set(script.slots)) != len(script.slots):
        raise ScriptError(f"overlapping glyph positions {script.slots}")
    for k, ivs in enumerate(script.intervals):
        prev = -1
        for a, b in sorted(ivs):
            if not 0 <= a < b <= cfg.frames:
                raise ScriptError(f"interval {(a, b)} of identity {k} outside the clip")
            if a < prev:
                raise ScriptError(f"overlapping intervals for identity {k}")
            prev = b


def render_audio(timbres: Sequence[TimbreSpec], script: Script, cfg: DataConfig = DEFAULT) -> np.ndarray:
    n = np.arange(cfg.n_samples)
    audio = np.zeros(cfg.n_samples)
    spf = cfg.samples_per_frame
    for tim, ivs in zip(timbres, script.intervals):
        chord = sum(cfg.amplitude * np.sin(2 * np.pi * f * n / cfg.window) for f in tim.freqs)
        for a, b in ivs:
            audio[a * spf:b * spf] += chord[a * spf:b * spf]
    return audio


def render_video(ids: Sequence[IdentitySpec], script: Script, background: float,
                 cfg: DataConfig = DEFAULT) -> np.ndarray:
    video = np.full((cfg.frames, cfg.size, cfg.size), background)
    g = cfg.glyph
    for k, ident in enumerate(ids):
        r, c = cfg.slots[script.slots[k]]
        for f in range(cfg.frames):
            level = 1.0 if any(a <= f < b for a, b in script.intervals[k]) else 0.5
            video[f, r:r + g, c:c + g] = level * ident.glyph
    return video


_NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")
_QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
_PATTERNS = ("alpha", "bravo", "delta", "echo", "golf", "kilo", "lima", "oscar")
_COLORS = ("red", "green", "blue")
WORDS = (("appears", "speaks", "from", "to", "pulses", "while", "speaking", "silent", ".", "glyph",
          "pattern", "top", "bottom", "left", "right") + _NUMBERS + _PATTERNS + _COLORS)
VOCAB = build_vocab(WORDS)


def make_caption(ids: Sequence[IdentitySpec], script: Script) -> StructuredCaption:
    anchors = tuple(
        Anchor(f"sub_{k + 1}", f"{_COLORS[int(np.argmax(i.color))]} glyph pattern {_PATTERNS[i.seed % len(_PATTERNS)]}")
        for k, i in enumerate(ids))
    video = " ".join(f"<sub_{k + 1}> appears {_QUADRANTS[s]} ." for k, s in enumerate(script.slots))
    speech = sorted((a, b, k) for k, ivs in enumerate(script.intervals) for a, b in ivs)
    audio = " ".join(f"<sub_{k + 1}> speaks from {_NUMBERS[a]} to {_NUMBERS[b]} ." for a, b, k in speech)
    joint = " ".join(f"<sub_{k + 1}> pulses while speaking ." for k in range(len(ids)))
    return StructuredCaption(anchors, video, audio, joint)


def render_sample(ids: Sequence[IdentitySpec], timbres: Sequence[TimbreSpec], script: Script,
                  cfg: DataConfig = DEFAULT, seed: int = 0) -> Sample:
    if len(ids) != len(timbres):
        raise ScriptError(f"{len(ids)} identities but {len(timbres)} timbres")
    validate_script(script, cfg)
    rng = np.random.default_rng([seed, 5])
    background = float(rng.uniform(-0.4, -0.1))
    frames = tuple(int(f) for f in rng.integers(cfg.frames, size=len(ids)))
    video = render_video(ids, script, background, cfg)
    audio = render_audio(timbres, script, cfg)
    return Sample(seed, RawVideo(video, cfg.frame_rate), RawAudio(audio, cfg.sample_rate),
                  make_caption(ids, script), list(ids), list(timbres), script, frames, background, cfg)


def make_sample(seed: int, n_identities: int, cfg: DataConfig = DEFAULT) -> Sample:
    ids, tims = cast_for(seed, n_identities, cfg)
    return render_sample(ids, tims, gen_script(n_identities, seed, cfg), cfg, seed)


# ---------------------------------------------------------------------------
# training instances


@dataclass
class Instance:
    task: str
    video: RawVideo
    audio: RawAudio
    identity_refs: list[RawVideo]
    timbre_refs: list[RawAudio]
    caption: StructuredCaption
    layout: Optional[InpairLayout] = None
    inpair: bool = True
    source_video: Optional[RawVideo] = None
    driving_audio: Optional[RawAudio] = None
    sample: Optional[Sample] = None

    def masks(self, stage: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.sample.cfg if self.sample else DEFAULT
        L_v = self.video.frames.shape[0] * (self.video.frames.shape[1] // cfg.patch) * (
            self.video.frames.shape[2] // cfg.patch)
        L_a = self.audio.samples.shape[0] // cfg.chunk
        return build_masks(stage, self.layout, L_v, L_a, inpair=self.inpair)


def crop_identity(s: Sample, k: int, frame: int) -> RawVideo:
    r, c = s.glyph_box(k)
    g = s.cfg.glyph
    return RawVideo(s.video.frames[frame:frame + 1, r:r + g, c:c + g].copy(), s.cfg.frame_rate)


def cut_timbre(s: Sample, k: int) -> RawAudio:
    a, b = s.timbre_span(k)
    return RawAudio(s.audio.samples[a:b].copy(), s.cfg.sample_rate)


def _refs_from(s: Sample) -> tuple[list[RawVideo], list[RawAudio]]:
    n = len(s.identities)
    return ([crop_identity(s, k, s.inpair_frames[k]) for k in range(n)],
            [cut_timbre(s, k) for k in range(n)])


def make_inpair(s: Sample) -> Instance:
    ids, tims = _refs_from(s)
    return Instance(R2AV, s.video, s.audio, ids, tims, s.caption, s.inpair_layout(), True, sample=s)


def reference_rendering(s: Sample, ref_seed: int) -> Sample:
    """Independent clip of the same cast: new positions, timing and background."""
    script = gen_script(len(s.identities), ref_seed, s.cfg, avoid_slots=s.script.slots)
    return render_sample(s.identities, s.timbres, script, s.cfg, ref_seed)


def make_crosspair(ids: Sequence[IdentitySpec], timbres: Sequence[TimbreSpec], seeds: tuple[int, int],
                   cfg: DataConfig = DEFAULT) -> Instance:
    target_seed, ref_seed = seeds
    s = render_sample(ids, timbres, gen_script(len(ids), target_seed, cfg), cfg, target_seed)
    return _crosspair_from(s, ref_seed)


def _crosspair_from(s: Sample, ref_seed: int) -> Instance:
    ref_ids, ref_tims = _refs_from(reference_rendering(s, ref_seed))
    return Instance(R2AV, s.video, s.audio, ref_ids, ref_tims, s.caption, s.inpair_layout(), False, sample=s)


def masked_source(s: Sample) -> RawVideo:
    """Target video with every glyph box blanked in every frame."""
    frames = s.video.frames.copy()
    g = s.cfg.glyph
    for k in range(len(s.identities)):
        r, c = s.glyph_box(k)
        frames[:, r:r + g, c:c + g] = 0.0
    return RawVideo(frames, s.cfg.frame_rate)


def make_rv2av(s: Sample, ref_seed: Optional[int] = None) -> Instance:
    base = make_inpair(s) if ref_seed is None else _crosspair_from(s, ref_seed)
    base.task, base.inpair, base.source_video = RV2AV, False, masked_source(s)
    return base


def make_ra2v(s: Sample, ref_seed: Optional[int] = None) -> Instance:
    base = make_inpair(s) if ref_seed is None else _crosspair_from(s, ref_seed)
    base.task, base.inpair, base.driving_audio = RA2V, False, s.audio
    base.timbre_refs = []
    return base


# ---------------------------------------------------------------------------
# manifests


def make_manifest(n: int, seed: int = 0, two_speaker_frac: float = 0.5) -> list[dict]:
    rng = np.random.default_rng([seed, 6])
    seeds = rng.choice(2 ** 31 - 1, size=n, replace=False)
    return [{"seed": int(s), "n_identities": 2 if rng.random() < two_speaker_frac else 1,
             "task_eligibility": list(TASKS)} for s in seeds]


def dumps_manifest(manifest: list[dict]) -> str:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"))


def load_manifest(text: str) -> list[dict]:
    entries = json.loads(text)
    if not isinstance(entries, list) or not entries:
        raise ValueError("manifest must be a non-empty JSON list")
    for e in entries:
        if not {"seed", "n_identities", "task_eligibility"} <= set(e):
            raise ValueError(f"manifest entry missing keys: {e}")
        if not 1 <= e["n_identities"] <= DEFAULT.n_max:
            raise ValueError(f"n_identities must be in [1, {DEFAULT.n_max}]: {e}")
    return entries
