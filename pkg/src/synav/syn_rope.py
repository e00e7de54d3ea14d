"""Rotary positions with cross-modal rate matching and per-identity margins.

Target video frames sit at temporal positions ``0..L_v-1``; target audio
tokens are stretched by ``gamma = L_v / L_a`` so both streams share one
clock. Reference identity ``k`` (its image and its voice alike) starts at
``k * M``, far outside the target range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .latent_codec import Role, TARGET
from .numerics import ContractError, DimensionError, Tensor

DEFAULT_MARGIN = 150


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = 8
    base: float = 10000.0
    margin_M: int = DEFAULT_MARGIN
    max_target_len_L: int = 8

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ContractError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.margin_M < 4 * self.max_target_len_L:
            raise ContractError(
                f"margin {self.margin_M} too small for target length {self.max_target_len_L} (need M >= 4L)")

    @classmethod
    def for_length(cls, max_target_len_L: int, head_dim: int = 8, base: float = 10000.0) -> "RopeConfig":
        """Default margin, widened when the target would not fit four times inside it."""
        return cls(head_dim, base, max(DEFAULT_MARGIN, 4 * max_target_len_L), max_target_len_L)


@dataclass
class PositionMap:
    positions: np.ndarray  # temporal position per token
    segment_of: list[Role]
    rows: np.ndarray = field(default=None)  # spatial patch row (zeros when not spatial)
    cols: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = len(self.positions)
        if len(self.segment_of) != n:
            raise DimensionError("segment tags must cover every position")
        self.rows = np.zeros(n) if self.rows is None else np.asarray(self.rows, dtype=np.float64)
        self.cols = np.zeros(n) if self.cols is None else np.asarray(self.cols, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.positions)

    def indices(self, role: Role) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.segment_of) if r == role], dtype=np.int64)

    @staticmethod
    def concat(maps: Sequence["PositionMap"]) -> "PositionMap":
        return PositionMap(np.concatenate([m.positions for m in maps]),
                           [r for m in maps for r in m.segment_of],
                           np.concatenate([m.rows for m in maps]),
                           np.concatenate([m.cols for m in maps]))


def compute_gamma(L_v: int, L_a: int) -> float:
    if L_v < 1 or L_a < 1:
        raise ContractError(f"sequence lengths must be positive, got L_v={L_v}, L_a={L_a}")
    return L_v / L_a


def assign_positions(layout: Sequence[tuple[Role, int]], gamma: float, cfg: RopeConfig,
                     modality: str = "video") -> PositionMap:
    """Temporal positions for a layout of (role, count) segments.

    Target segments of the audio modality are scaled by ``gamma``; reference
    segments always use integer offsets from ``k * M``.
    """
    positions: list[np.ndarray] = []
    tags: list[Role] = []
    ks = []
    for role, count in layout:
        if role.kind == "reference":
            if role.k < 1:
                raise AllocationError("reference index k=0 collides with the target range")
            if count > cfg.margin_M:
                raise AllocationError(
                    f"reference({role.k}) has {count} tokens, exceeding margin {cfg.margin_M}")
            ks.append(role.k)
            pos = role.k * cfg.margin_M + np.arange(count, dtype=np.float64)
        else:
            pos = np.arange(count, dtype=np.float64)
            if role == TARGET and modality == "audio":
                pos = pos * gamma
            if count and pos[-1] >= cfg.max_target_len_L:
                raise AllocationError(
                    f"target extent {pos[-1]} exceeds max target length {cfg.max_target_len_L}")
        positions.append(pos)
        tags.extend([role] * count)
    if ks and sorted(set(ks)) != list(range(1, max(ks) + 1)):
        raise AllocationError(f"reference indices must be contiguous from 1, got {sorted(set(ks))}")
    flat = np.concatenate(positions) if positions else np.zeros(0)
    return PositionMap(flat, tags)


# ---------------------------------------------------------------------------
# rotation


def _freqs(dim: int, base: float) -> np.ndarray:
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def rotation_angles(pos: PositionMap | np.ndarray, cfg: RopeConfig, spatial: bool = False) -> np.ndarray:
    """Per-token rotation angles, shape (L, head_dim / 2).

    With ``spatial`` the head splits into a temporal half and two quarter
    blocks for patch row and column; otherwise the whole head is temporal.
    """
    if isinstance(pos, PositionMap):
        t, rows, cols = pos.positions, pos.rows, pos.cols
    else:
        t = np.asarray(pos, dtype=np.float64)
        rows = cols = np.zeros_like(t)
    if not spatial:
        return np.outer(t, _freqs(cfg.head_dim, cfg.base))
    if cfg.head_dim % 8:
        raise ContractError("spatial rotation needs head_dim divisible by 8")
    dt, ds = cfg.head_dim // 2, cfg.head_dim // 4
    return np.concatenate([np.outer(t, _freqs(dt, cfg.base)),
                           np.outer(rows, _freqs(ds, cfg.base)),
                           np.outer(cols, _freqs(ds, cfg.base))], axis=1)


def rotate(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs of the last axis by ``angles``.

    ``x`` has shape (..., L, d); ``angles`` has shape (L, d/2).
    """
    if x.shape[-2:] != (angles.shape[0], 2 * angles.shape[1]):
        raise DimensionError(f"cannot rotate {x.shape} by angles {angles.shape}")
    c, s = np.cos(angles), np.sin(angles)

    def turn(v: np.ndarray, sign: float) -> np.ndarray:
        p = v.reshape(v.shape[:-1] + (-1, 2))
        a, b = p[..., 0], p[..., 1]
        out = np.stack([a * c - sign * b * s, sign * a * s + b * c], axis=-1)
        return out.reshape(v.shape)

    return Tensor.from_op(turn(x.value, 1.0), (x,), lambda g: (turn(g, -1.0),))


def apply_rotation(x: Tensor, pos: PositionMap | np.ndarray, cfg: RopeConfig,
                   spatial: bool = False) -> Tensor:
    if x.shape[-1] != cfg.head_dim:
        raise DimensionError(f"head_dim mismatch: tensor has {x.shape[-1]}, config {cfg.head_dim}")
    if x.shape[-2] != len(pos):
        raise DimensionError(f"{x.shape[-2]} rows but {len(pos)} positions")
    return rotate(x, rotation_angles(pos, cfg, spatial))


def kernel_profile(head_dim: int, base: float, offsets: Sequence[float],
                   n_samples: int = 1000, seed: int = 0) -> list[float]:
    """Mean self-similarity <R(offset) x, x> over seeded random unit vectors."""
    cfg = RopeConfig(head_dim, base, DEFAULT_MARGIN, 1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, head_dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    xt = Tensor(x)
    out = []
    for off in offsets:
        rx = apply_rotation(xt, np.full(n_samples, float(off)), cfg).value
        out.append(float(np.mean(np.sum(rx * x, axis=1))))
    return out
