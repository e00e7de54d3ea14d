"""Symmetric composition of targets, references and structural canvases.

References are appended to each stream along the sequence axis; a source
video or driving audio, when present, is added onto the target region only.
Which of the three tasks a bundle represents follows purely from which
inputs are present.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .caption import StructuredCaption
from .latent_codec import AUDIO, TARGET, VIDEO, LatentSequence
from .numerics import ContractError
from .syn_rope import AllocationError, PositionMap, RopeConfig, assign_positions, compute_gamma

R2AV, RV2AV, RA2V = "R2AV", "RV2AV", "RA2V"
TASKS = (R2AV, RV2AV, RA2V)


class CompositionError(ValueError):
    pass


class UnsupportedTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    has_video_refs: bool
    has_timbre_refs: bool
    has_source_video: bool
    has_driving_audio: bool


@dataclass
class ConditionBundle:
    identity_refs: list[LatentSequence] = field(default_factory=list)
    timbre_refs: list[LatentSequence] = field(default_factory=list)
    source_video: Optional[LatentSequence] = None
    driving_audio: Optional[LatentSequence] = None
    caption: Optional[StructuredCaption] = None

    def without_references(self) -> "ConditionBundle":
        return ConditionBundle([], [], self.source_video, self.driving_audio, self.caption)


@dataclass
class ComposedInput:
    x_v: np.ndarray
    x_a: np.ndarray
    pos_v: PositionMap
    pos_a: PositionMap
    mask_v: np.ndarray  # per target token, 1 = excluded from the loss
    mask_a: np.ndarray
    target_slice_v: slice
    target_slice_a: slice
    additive_v: np.ndarray  # structural term over the whole sequence
    additive_a: np.ndarray
    grid_v: tuple[int, int, int]

    @property
    def is_target_v(self) -> np.ndarray:
        return np.array([r == TARGET for r in self.pos_v.segment_of])

    @property
    def is_target_a(self) -> np.ndarray:
        return np.array([r == TARGET for r in self.pos_a.segment_of])


def derive_task(bundle: ConditionBundle) -> TaskSpec:
    has_src = bundle.source_video is not None
    has_dri = bundle.driving_audio is not None
    has_id = bool(bundle.identity_refs)
    has_tim = bool(bundle.timbre_refs)
    if has_src and has_dri:
        raise UnsupportedTaskError("source video and driving audio together is not a supported task")
    if has_dri:
        if has_tim:
            raise UnsupportedTaskError("audio-driven animation takes no timbre references")
        kind = RA2V
    elif has_src:
        kind = RV2AV
    else:
        kind = R2AV
    return TaskSpec(kind, has_id, has_tim, has_src, has_dri)


def _sorted_refs(refs: Sequence[LatentSequence], modality: str) -> list[LatentSequence]:
    for r in refs:
        if r.modality != modality:
            raise CompositionError(f"{r.role} is {r.modality}, expected {modality}")
        if r.role.kind != "reference" or r.role.k < 1:
            raise AllocationError(f"reference latents need role reference(k>=1), got {r.role}")
    return sorted(refs, key=lambda r: r.role.k)


def _video_positions(z_v: LatentSequence, refs: list[LatentSequence], cfg: RopeConfig) -> PositionMap:
    layout = [(TARGET, z_v.frames)] + [(r.role, r.frames) for r in refs]
    temporal = assign_positions(layout, 1.0, cfg, VIDEO)
    seqs = [z_v] + refs
    pos, tags, rows, cols = [], [], [], []
    start = 0
    for seq in seqs:
        f, gh, gw = seq.grid
        t = temporal.positions[start:start + f]
        start += f
        pos.append(np.repeat(t, gh * gw))
        rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        rows.append(np.tile(rr.ravel(), f))
        cols.append(np.tile(cc.ravel(), f))
        tags.extend([seq.role if seq is not z_v else TARGET] * seq.length)
    return PositionMap(np.concatenate(pos), tags, np.concatenate(rows), np.concatenate(cols))


def compose(z_v: LatentSequence, z_a: LatentSequence, bundle: ConditionBundle, cfg: RopeConfig,
            mask_v: np.ndarray | None = None, mask_a: np.ndarray | None = None) -> ComposedInput:
    id_refs = _sorted_refs(bundle.identity_refs, VIDEO)
    tim_refs = _sorted_refs(bundle.timbre_refs, AUDIO)
    gamma = compute_gamma(z_v.frames, z_a.frames)

    pos_v = _video_positions(z_v, id_refs, cfg)
    pos_a = assign_positions([(TARGET, z_a.length)] + [(r.role, r.length) for r in tim_refs],
                             gamma, cfg, AUDIO)

    x_v = np.concatenate([z_v.tokens] + [r.tokens for r in id_refs], axis=0)
    x_a = np.concatenate([z_a.tokens] + [r.tokens for r in tim_refs], axis=0)
    add_v = np.zeros_like(x_v)
    add_a = np.zeros_like(x_a)
    if bundle.source_video is not None:
        if bundle.source_video.tokens.shape != z_v.tokens.shape:
            raise CompositionError(f"source video latents {bundle.source_video.tokens.shape} "
                                   f"do not match target {z_v.tokens.shape}")
        add_v[:z_v.length] = bundle.source_video.tokens
        x_v = x_v + add_v
    if bundle.driving_audio is not None:
        if bundle.driving_audio.tokens.shape != z_a.tokens.shape:
            raise CompositionError(f"driving audio latents {bundle.driving_audio.tokens.shape} "
                                   f"do not match target {z_a.tokens.shape}")
        add_a[:z_a.length] = bundle.driving_audio.tokens
        x_a = x_a + add_a

    mv = np.zeros(z_v.length) if mask_v is None else np.asarray(mask_v, dtype=np.float64)
    ma = np.zeros(z_a.length) if mask_a is None else np.asarray(mask_a, dtype=np.float64)
    if mv.shape != (z_v.length,) or ma.shape != (z_a.length,):
        raise CompositionError("masks must cover exactly the target tokens")
    return ComposedInput(x_v, x_a, pos_v, pos_a, mv, ma, slice(0, z_v.length), slice(0, z_a.length),
                         add_v, add_a, tuple(z_v.grid))


# ---------------------------------------------------------------------------
# loss masks


@dataclass(frozen=True)
class InpairLayout:
    """Where in-pair references were cut from the target.

    ``video_regions`` are (frame, row0, row1, col0, col1) boxes in patch
    units (half-open); ``audio_spans`` are half-open audio token ranges.
    """

    grid: tuple[int, int, int]
    video_regions: tuple[tuple[int, int, int, int, int], ...] = ()
    audio_spans: tuple[tuple[int, int], ...] = ()

    def video_token_indices(self) -> np.ndarray:
        f_n, gh, gw = self.grid
        idx = []
        for f, r0, r1, c0, c1 in self.video_regions:
            if not (0 <= f < f_n and 0 <= r0 < r1 <= gh and 0 <= c0 < c1 <= gw):
                raise ContractError(f"video region {(f, r0, r1, c0, c1)} outside grid {self.grid}")
            for r in range(r0, r1):
                idx.extend(f * gh * gw + r * gw + c for c in range(c0, c1))
        return np.array(sorted(set(idx)), dtype=np.int64)


def build_masks(stage: int, layout: InpairLayout | None, L_v: int, L_a: int,
                inpair: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-token loss masks. Stage 1 (and in-pair samples of stage 3) mask the
    regions references were cut from; stage 2 and cross-pair samples mask nothing."""
    if stage not in (1, 2, 3):
        raise ContractError(f"unknown stage {stage}")
    mask_v, mask_a = np.zeros(L_v), np.zeros(L_a)
    if layout is None:
        return mask_v, mask_a
    vidx = layout.video_token_indices()
    for a0, a1 in layout.audio_spans:
        if not 0 <= a0 < a1 <= L_a:
            raise ContractError(f"audio span {(a0, a1)} outside target length {L_a}")
    if len(vidx) and vidx[-1] >= L_v:
        raise ContractError(f"video region exceeds target length {L_v}")
    if stage == 2 or (stage == 3 and not inpair):
        return mask_v, mask_a
    mask_v[vidx] = 1.0
    for a0, a1 in layout.audio_spans:
        mask_a[a0:a1] = 1.0
    return mask_v, mask_a
