"""Toy dual-stream denoiser.

Each block runs, per stream: rotary self-attention, cross-attention to the
other stream (video attends audio, then audio attends the updated video),
cross-attention to caption tokens, and an MLP. Every residual branch is
scaled by a timestep-modulated gate that starts at zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .caption import TokenSequence
from .conditioning import ComposedInput
from .latent_codec import TARGET, Role
from .numerics import NumericError, Tensor
from .syn_rope import PositionMap, RopeConfig, rotate, rotation_angles

STREAMS = ("v", "a")
N_MOD = 8  # sa shift/scale/gate, cross gate, text gate, mlp shift/scale/gate


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    heads: int = 2
    depth: int = 2
    vocab_size: int = 64
    video_dim: int = 16
    audio_dim: int = 4
    mlp_ratio: int = 4
    max_len_v: int = 512
    max_len_a: int = 256
    n_max: int = 2
    rope: RopeConfig = field(default_factory=RopeConfig)

    def __post_init__(self):
        if self.dim != self.heads * self.rope.head_dim:
            raise ValueError(f"dim {self.dim} != heads {self.heads} x head_dim {self.rope.head_dim}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.rope.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["rope"] = RopeConfig(**d["rope"])
        return cls(**d)


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class DenoiserOutput:
    eps_v: Tensor
    eps_a: Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, H = cfg.dim, cfg.dim * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "t_embed.w1": (D, D), "t_embed.b1": (D,), "t_embed.w2": (D, D), "t_embed.b2": (D,),
        "tok_embed": (cfg.vocab_size, D),
    }
    for s, d_in in (("v", cfg.video_dim), ("a", cfg.audio_dim)):
        shapes.update({
            f"{s}.in.w": (d_in, D), f"{s}.in.b": (D,),
            f"{s}.final_mod.w": (D, 2 * D), f"{s}.final_mod.b": (2 * D,),
            f"{s}.out.w": (D, d_in), f"{s}.out.b": (d_in,),
        })
    for i in range(cfg.depth):
        for s in STREAMS:
            p = f"blocks.{i}.{s}"
            shapes.update({
                f"{p}.mod.w": (D, N_MOD * D), f"{p}.mod.b": (N_MOD * D,),
                f"{p}.attn.qkv": (D, 3 * D), f"{p}.attn.out": (D, D),
                f"{p}.xattn.q": (D, D), f"{p}.xattn.kv": (D, 2 * D), f"{p}.xattn.out": (D, D),
                f"{p}.text.q": (D, D), f"{p}.text.kv": (D, 2 * D), f"{p}.text.out": (D, D),
                f"{p}.mlp.w1": (D, H), f"{p}.mlp.b1": (H,), f"{p}.mlp.w2": (H, D), f"{p}.mlp.b2": (D,),
            })
    return shapes


_RESIDUAL_OUT = (".attn.out", ".xattn.out", ".text.out", ".mlp.w2")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(2 * cfg.depth)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 or ".mod." in name or "final_mod" in name:
            tensors[name] = np.zeros(shape)
            continue
        std = 1.0 / math.sqrt(shape[0])
        if name == "tok_embed":
            std = 1.0
        w = rng.standard_normal(shape) * std
        if name.endswith(_RESIDUAL_OUT):
            w *= resid_scale
        tensors[name] = w
    return ModelParams(cfg, tensors)


def timestep_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    arg = 1000.0 * t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])[None, :]


def _heads(x: Tensor, heads: int) -> Tensor:
    L, D = x.shape
    return nx.transpose(nx.reshape(x, (L, heads, D // heads)), (1, 0, 2))


def _merge(x: Tensor) -> Tensor:
    H, L, hd = x.shape
    return nx.reshape(nx.transpose(x, (1, 0, 2)), (L, H * hd))


def _cols(x: Tensor, i: int, width: int) -> Tensor:
    return x[:, i * width:(i + 1) * width]


class _Trace:
    def __init__(self):
        self.records: list[tuple[str, str, int, np.ndarray]] = []

    def add(self, kind: str, stream: str, block: int, probs: np.ndarray):
        self.records.append((kind, stream, block, probs))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              ang_q: Optional[np.ndarray] = None, ang_k: Optional[np.ndarray] = None,
              record=None) -> Tensor:
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    if ang_q is not None:
        qh, kh = rotate(qh, ang_q), rotate(kh, ang_k)
    scores = nx.mul(nx.matmul(qh, nx.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(qh.shape[-1]))
    probs = nx.softmax(scores, axis=-1)
    if record is not None:
        record(probs.value)
    return _merge(nx.matmul(probs, vh))


class _Stream:
    """Per-call view of one stream's hidden state and fixed geometry."""

    def __init__(self, name: str, h: Tensor, pos: PositionMap, select: np.ndarray, cfg: ModelConfig):
        self.name, self.h = name, h
        self.ang_self = rotation_angles(pos, cfg.rope, spatial=True)
        temporal = PositionMap(pos.positions, pos.segment_of)
        self.ang_cross = rotation_angles(temporal, cfg.rope, spatial=True)
        self.select = select  # (L, 2) one-hot: [noisy target, clean reference]


def _modulation(P, prefix: str, c_pair: Tensor, select: np.ndarray, width: int) -> Tensor:
    per_t = nx.add(nx.matmul(nx.silu(c_pair), P[f"{prefix}.w"]), P[f"{prefix}.b"])
    return nx.matmul(Tensor(select), per_t)


def forward(composed: ComposedInput, tokens: TokenSequence, t: float, params: ModelParams,
            grad: bool = False, trace: Optional[_Trace] = None) -> DenoiserOutput:
    cfg = params.cfg
    D, heads = cfg.dim, cfg.heads
    if composed.x_v.shape[0] > cfg.max_len_v or composed.x_a.shape[0] > cfg.max_len_a:
        raise nx.DimensionError(
            f"sequence lengths {composed.x_v.shape[0]}/{composed.x_a.shape[0]} exceed "
            f"model maxima {cfg.max_len_v}/{cfg.max_len_a}")
    if not 0.0 <= t <= 1.0:
        raise nx.ContractError(f"timestep {t} outside [0, 1]")
    P = {k: Tensor(v, name=k) if grad else Tensor(v) for k, v in params.tensors.items()}

    feats = Tensor(np.concatenate([timestep_features(t, D), timestep_features(0.0, D)]))
    c = nx.add(nx.matmul(nx.silu(nx.add(nx.matmul(feats, P["t_embed.w1"]), P["t_embed.b1"])),
                         P["t_embed.w2"]), P["t_embed.b2"])  # rows: [t, 0]

    text = None
    if len(tokens):
        text = P["tok_embed"][np.asarray(tokens.ids, dtype=np.int64)]

    streams = {}
    for s, x, pos in (("v", composed.x_v, composed.pos_v), ("a", composed.x_a, composed.pos_a)):
        is_t = np.array([r == TARGET for r in pos.segment_of], dtype=np.float64)
        select = np.stack([is_t, 1.0 - is_t], axis=1)
        h = nx.add(nx.matmul(Tensor(x), P[f"{s}.in.w"]), P[f"{s}.in.b"])
        streams[s] = _Stream(s, h, pos, select, cfg)

    for i in range(cfg.depth):
        try:
            _block(i, streams, text, c, P, cfg, trace)
        except NumericError as e:
            raise NumericError(f"non-finite activations in block {i}: {e}") from None

    outs = []
    for s, sl in (("v", composed.target_slice_v), ("a", composed.target_slice_a)):
        st = streams[s]
        mod = _modulation(P, f"{s}.final_mod", c, st.select, D)
        n = nx.add(nx.mul(nx.layer_norm(st.h), nx.add(_cols(mod, 1, D), 1.0)), _cols(mod, 0, D))
        out = nx.add(nx.matmul(n, P[f"{s}.out.w"]), P[f"{s}.out.b"])
        outs.append(out[sl])
    return DenoiserOutput(*outs)


def _block(i: int, streams: dict, text: Optional[Tensor], c: Tensor, P, cfg: ModelConfig,
           trace: Optional[_Trace]) -> None:
    D, heads = cfg.dim, cfg.heads
    mods = {}
    for s, st in streams.items():
        mods[s] = _modulation(P, f"blocks.{i}.{s}.mod", c, st.select, D)

    def rec(kind, s):
        if trace is None:
            return None
        return lambda probs: trace.add(kind, s, i, probs)

    # self-attention
    for s, st in streams.items():
        p, m = f"blocks.{i}.{s}", mods[s]
        n = nx.add(nx.mul(nx.layer_norm(st.h), nx.add(_cols(m, 1, D), 1.0)), _cols(m, 0, D))
        qkv = nx.matmul(n, P[f"{p}.attn.qkv"])
        o = attention(_cols(qkv, 0, D), _cols(qkv, 1, D), _cols(qkv, 2, D), heads,
                      st.ang_self, st.ang_self, rec("self", s))
        st.h = nx.add(st.h, nx.mul(_cols(m, 2, D), nx.matmul(o, P[f"{p}.attn.out"])))

    # bidirectional cross-modal attention, video first
    for s, other in (("v", "a"), ("a", "v")):
        st, ot = streams[s], streams[other]
        p, m = f"blocks.{i}.{s}", mods[s]
        q = nx.matmul(nx.layer_norm(st.h), P[f"{p}.xattn.q"])
        kv = nx.matmul(nx.layer_norm(ot.h), P[f"{p}.xattn.kv"])
        o = attention(q, _cols(kv, 0, D), _cols(kv, 1, D), heads, st.ang_cross, ot.ang_cross,
                      rec("cross", s))
        st.h = nx.add(st.h, nx.mul(_cols(m, 3, D), nx.matmul(o, P[f"{p}.xattn.out"])))

    # caption cross-attention; an empty caption contributes nothing
    if text is not None:
        for s, st in streams.items():
            p, m = f"blocks.{i}.{s}", mods[s]
            q = nx.matmul(nx.layer_norm(st.h), P[f"{p}.text.q"])
            kv = nx.matmul(text, P[f"{p}.text.kv"])
            o = attention(q, _cols(kv, 0, D), _cols(kv, 1, D), heads, record=rec("text", s))
            st.h = nx.add(st.h, nx.mul(_cols(m, 4, D), nx.matmul(o, P[f"{p}.text.out"])))

    for s, st in streams.items():
        p, m = f"blocks.{i}.{s}", mods[s]
        n = nx.add(nx.mul(nx.layer_norm(st.h), nx.add(_cols(m, 6, D), 1.0)), _cols(m, 5, D))
        hid = nx.gelu(nx.add(nx.matmul(n, P[f"{p}.mlp.w1"]), P[f"{p}.mlp.b1"]))
        o = nx.add(nx.matmul(hid, P[f"{p}.mlp.w2"]), P[f"{p}.mlp.b2"])
        st.h = nx.add(st.h, nx.mul(_cols(m, 7, D), o))


def _segment_indices(pos: PositionMap, seg) -> np.ndarray:
    if isinstance(seg, str):
        if seg == "all":
            return np.arange(len(pos))
        if seg == "target":
            return pos.indices(TARGET)
        if seg.startswith("reference(") and seg.endswith(")"):
            return pos.indices(Role("reference", int(seg[10:-1])))
        raise ValueError(f"unknown segment {seg!r}")
    if isinstance(seg, Role):
        return pos.indices(seg)
    return np.asarray(seg, dtype=np.int64)


def count_cross_attention_mass(composed: ComposedInput, tokens: TokenSequence, t: float,
                               params: ModelParams, from_segment, to_segment,
                               stream: str = "v") -> float:
    """Mean post-softmax self-attention weight flowing from one token segment
    to another in ``stream``, averaged over heads and blocks."""
    trace = _Trace()
    forward(composed, tokens, t, params, trace=trace)
    pos = composed.pos_v if stream == "v" else composed.pos_a
    src, dst = _segment_indices(pos, from_segment), _segment_indices(pos, to_segment)
    masses = []
    for kind, s, _, probs in trace.records:
        if kind == "self" and s == stream:
            masses.append(probs[:, src][:, :, dst].sum(axis=-1).mean())
    return float(np.mean(masses))
