"""Chained two-condition guidance and a deterministic DDIM sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .caption import EMPTY_TOKENS, TokenSequence, tokenize
from .conditioning import ComposedInput, ConditionBundle, compose, derive_task
from .data_synth import VOCAB
from .latent_codec import Codec, LatentSequence, RawAudio, RawVideo
from .model import ModelParams, forward
from .training import NoiseSchedule

# (composed, tokens, t) -> (eps_v, eps_a) over the target regions
Predictor = Callable[[ComposedInput, TokenSequence, float], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class GuidanceConfig:
    w_T: float = 5.0
    w_S: float = 5.0
    steps: int = 32

    def __post_init__(self):
        if not (math.isfinite(self.w_T) and math.isfinite(self.w_S)) or self.w_T < 0 or self.w_S < 0:
            raise ValueError("guidance weights must be finite and nonnegative")
        if self.steps < 1:
            raise ValueError("need at least one sampling step")


@dataclass(frozen=True)
class TargetShape:
    frames: int = 8
    height: int = 16
    width: int = 16
    samples: int = 128
    frame_rate: int = 8
    sample_rate: int = 128


@dataclass
class GuidedOutput:
    eps_v: np.ndarray
    eps_a: np.ndarray
    branches: dict  # branch name -> (eps_v, eps_a)


def model_predictor(params: ModelParams) -> Predictor:
    def predict(composed, tokens, t):
        out = forward(composed, tokens, t, params)
        return out.eps_v.value, out.eps_a.value
    return predict


def cfg_predict(z_v: LatentSequence, z_a: LatentSequence, t: float, bundle: ConditionBundle,
                g: GuidanceConfig, predict: Predictor, rope, tokens: Optional[TokenSequence] = None,
                calls: Optional[list] = None) -> GuidedOutput:
    """Three forward passes: nothing, text only, text plus references.

    Structural canvases stay in every branch. The video stream's reference
    condition is the identity images, the audio stream's is the timbre clips.
    """
    if tokens is None:
        tokens = tokenize(bundle.caption, VOCAB) if bundle.caption is not None else EMPTY_TOKENS
    bare = bundle.without_references()
    branches = {}
    for name, b, tok in (("null", bare, EMPTY_TOKENS), ("text", bare, tokens), ("full", bundle, tokens)):
        if calls is not None:
            calls.append({"branch": name, "identity_refs": len(b.identity_refs),
                          "timbre_refs": len(b.timbre_refs), "text": len(tok) > 0,
                          "source_video": b.source_video is not None,
                          "driving_audio": b.driving_audio is not None})
        branches[name] = predict(compose(z_v, z_a, b, rope), tok, t)
    (n_v, n_a), (t_v, t_a), (f_v, f_a) = branches["null"], branches["text"], branches["full"]
    eps_v = n_v + g.w_T * (t_v - n_v) + g.w_S * (f_v - t_v)
    eps_a = n_a + g.w_T * (t_a - n_a) + g.w_S * (f_a - t_a)
    return GuidedOutput(eps_v, eps_a, branches)


def _empty_targets(shape: TargetShape, codec: Codec) -> tuple[LatentSequence, LatentSequence]:
    v = codec.encode(RawVideo(np.zeros((shape.frames, shape.height, shape.width)), shape.frame_rate))
    a = codec.encode(RawAudio(np.zeros(shape.samples), shape.sample_rate))
    return v, a


def sample_latents(bundle: ConditionBundle, g: GuidanceConfig, seed: int, predict: Predictor, rope,
                   sched: NoiseSchedule = NoiseSchedule(), shape: TargetShape = TargetShape(),
                   codec: Optional[Codec] = None, clip: Optional[float] = None,
                   project: bool = False) -> tuple[LatentSequence, LatentSequence]:
    """Deterministic (eta = 0) reverse process over ``g.steps`` uniform times from 1 to 0.

    Returns the clean-signal estimate of the final step. With ``project`` each
    clean estimate is clamped to the media range [-1, 1] in pixel/sample space
    (exact, the codec being orthogonal) and the noise estimate recomputed from it.
    """
    codec = codec or Codec()
    derive_task(bundle)
    v0, a0 = _empty_targets(shape, codec)
    rng = np.random.default_rng([seed, 17])
    z_v = rng.standard_normal(v0.tokens.shape)
    z_a = rng.standard_normal(a0.tokens.shape)
    tokens = tokenize(bundle.caption, VOCAB) if bundle.caption is not None else EMPTY_TOKENS
    ts = np.linspace(1.0, 0.0, g.steps + 1)
    for i in range(g.steps):
        a = sched.alpha_bar(float(ts[i]))
        out = cfg_predict(v0.with_tokens(z_v), a0.with_tokens(z_a), float(ts[i]), bundle, g, predict, rope, tokens)
        x_v = (z_v - math.sqrt(1 - a) * out.eps_v) / math.sqrt(a)
        x_a = (z_a - math.sqrt(1 - a) * out.eps_a) / math.sqrt(a)
        if clip is not None:
            x_v, x_a = np.clip(x_v, -clip, clip), np.clip(x_a, -clip, clip)
        if project:
            x_v = codec.encode(codec.decode(v0.with_tokens(x_v))).tokens
            x_a = codec.encode(codec.decode(a0.with_tokens(x_a))).tokens
            out.eps_v = (z_v - math.sqrt(a) * x_v) / math.sqrt(1 - a)
            out.eps_a = (z_a - math.sqrt(a) * x_a) / math.sqrt(1 - a)
        if i == g.steps - 1:
            z_v, z_a = x_v, x_a
            break
        a_next = sched.alpha_bar(float(ts[i + 1]))
        z_v = math.sqrt(a_next) * x_v + math.sqrt(1 - a_next) * out.eps_v
        z_a = math.sqrt(a_next) * x_a + math.sqrt(1 - a_next) * out.eps_a
    return v0.with_tokens(z_v), a0.with_tokens(z_a)


def sample(bundle: ConditionBundle, g: GuidanceConfig, seed: int, params: ModelParams,
           sched: NoiseSchedule = NoiseSchedule(), shape: TargetShape = TargetShape(),
           codec: Optional[Codec] = None, clip: Optional[float] = None,
           project: bool = False) -> tuple[RawVideo, RawAudio]:
    codec = codec or Codec()
    lv, la = sample_latents(bundle, g, seed, model_predictor(params), params.cfg.rope, sched, shape, codec,
                            clip, project)
    return codec.decode(lv), codec.decode(la)
