"""Exactly invertible patch codecs for grayscale video and mono audio.

Each non-overlapping video patch (P x P pixels) or audio chunk (Q samples) is
multiplied by a fixed seeded orthogonal matrix, so encode/decode are exact
inverses and preserve energy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MEDIA_MAGIC = b"DIDM"
MEDIA_VERSION = 1
VIDEO, AUDIO = "video", "audio"
_MODALITY_CODE = {VIDEO: 0, AUDIO: 1}


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RawVideo:
    frames: np.ndarray  # (F, H, W) in [-1, 1]
    frame_rate: int = 8

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"video frames must be (F>=1, H, W), got {self.frames.shape}")


@dataclass(frozen=True)
class RawAudio:
    samples: np.ndarray  # (S,) in [-1, 1]
    sample_rate: int = 128

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise ShapeError(f"audio samples must be 1-D, got {self.samples.shape}")


@dataclass(frozen=True)
class Role:
    kind: str = "target"  # target | reference | structural
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("target", "reference", "structural"):
            raise ValueError(f"unknown role {self.kind!r}")

    def __str__(self) -> str:
        return f"reference({self.k})" if self.kind == "reference" else self.kind


TARGET = Role("target")
STRUCTURAL = Role("structural")


def reference(k: int) -> Role:
    return Role("reference", k)


@dataclass(frozen=True)
class LatentSequence:
    tokens: np.ndarray  # (L, D)
    modality: str
    role: Role = TARGET
    grid: tuple[int, ...] = ()  # (F, H/P, W/P) for video, (L,) for audio
    rate: int = 0

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def frames(self) -> int:
        """Temporal length: latent frames for video, tokens for audio."""
        return self.grid[0]

    def with_role(self, role: Role) -> "LatentSequence":
        return replace(self, role=role)

    def with_tokens(self, tokens: np.ndarray) -> "LatentSequence":
        return replace(self, tokens=tokens)


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class Codec:
    patch: int = 4
    chunk: int = 4
    seed: int = 0
    w_video: np.ndarray = field(init=False, repr=False)
    w_audio: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.w_video = _orthogonal(self.patch * self.patch, rng)
        self.w_audio = _orthogonal(self.chunk, rng)
        for w in (self.w_video, self.w_audio):
            if np.abs(w.T @ w - np.eye(w.shape[0])).max() > 1e-10:
                raise ConfigError("patch projection is not orthogonal")

    @property
    def video_dim(self) -> int:
        return self.patch * self.patch

    @property
    def audio_dim(self) -> int:
        return self.chunk

    def dim(self, modality: str) -> int:
        return self.video_dim if modality == VIDEO else self.audio_dim

    def video_grid(self, n_frames: int, height: int, width: int) -> tuple[int, int, int]:
        p = self.patch
        if height % p or width % p:
            raise ShapeError(f"frame size {height}x{width} not divisible by patch {p}")
        return n_frames, height // p, width // p

    def encode(self, raw: RawVideo | RawAudio, role: Role = TARGET) -> LatentSequence:
        if isinstance(raw, RawVideo):
            f, h, w = raw.frames.shape
            grid = self.video_grid(f, h, w)
            p = self.patch
            patches = (raw.frames.reshape(f, grid[1], p, grid[2], p)
                       .transpose(0, 1, 3, 2, 4).reshape(-1, p * p))
            return LatentSequence(patches @ self.w_video.T, VIDEO, role, grid, raw.frame_rate)
        s = raw.samples.shape[0]
        if s % self.chunk:
            raise ShapeError(f"audio length {s} not divisible by chunk {self.chunk}")
        chunks = raw.samples.reshape(-1, self.chunk)
        return LatentSequence(chunks @ self.w_audio.T, AUDIO, role, (s // self.chunk,), raw.sample_rate)

    def decode(self, lat: LatentSequence, clamp: bool = True) -> RawVideo | RawAudio:
        if lat.tokens.ndim != 2 or lat.tokens.shape[1] != self.dim(lat.modality):
            raise ConfigError(
                f"{lat.modality} latents need width {self.dim(lat.modality)}, got {lat.tokens.shape}")
        if lat.modality == VIDEO:
            f, gh, gw = lat.grid
            p = self.patch
            x = (lat.tokens @ self.w_video).reshape(f, gh, gw, p, p).transpose(0, 1, 3, 2, 4)
            x = x.reshape(f, gh * p, gw * p)
            return RawVideo(np.clip(x, -1, 1) if clamp else x, lat.rate or 8)
        x = (lat.tokens @ self.w_audio).reshape(-1)
        return RawAudio(np.clip(x, -1, 1) if clamp else x, lat.rate or 128)


# ---------------------------------------------------------------------------
# binary media files


def dumps_media(raw: RawVideo | RawAudio) -> bytes:
    if isinstance(raw, RawVideo):
        modality, data, rate = VIDEO, raw.frames, raw.frame_rate
    else:
        modality, data, rate = AUDIO, raw.samples, raw.sample_rate
    head = MEDIA_MAGIC + struct.pack("<HBB", MEDIA_VERSION, _MODALITY_CODE[modality], 0)
    dims = struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape) + struct.pack("<I", rate)
    return head + dims + np.ascontiguousarray(data, dtype="<f4").tobytes()


def loads_media(buf: bytes) -> RawVideo | RawAudio:
    if buf[:4] != MEDIA_MAGIC:
        raise ValueError("not a media file (bad magic)")
    version, code, _ = struct.unpack_from("<HBB", buf, 4)
    if version != MEDIA_VERSION:
        raise ValueError(f"unsupported media version {version}")
    (ndim,) = struct.unpack_from("<I", buf, 8)
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    (rate,) = struct.unpack_from("<I", buf, off)
    data = np.frombuffer(buf, dtype="<f4", offset=off + 4).astype(np.float64).reshape(shape)
    if code == _MODALITY_CODE[VIDEO]:
        return RawVideo(data, rate)
    return RawAudio(data, rate)


def write_media(path: str | Path, raw: RawVideo | RawAudio) -> None:
    Path(path).write_bytes(dumps_media(raw))


def read_media(path: str | Path) -> RawVideo | RawAudio:
    return loads_media(Path(path).read_bytes())
