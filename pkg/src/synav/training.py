"""Noise schedule, masked reconstruction loss and the three-stage curriculum.

Stage 1 trains generation from references cut out of the target itself, with
the cut regions excluded from the loss. Stage 2 takes references from an
independent rendering and drops the masks. Stage 3 mixes generation, editing
and audio-driven animation.

Randomness is derived statelessly from ``(seed, global_step, stream)`` so a
run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from . import numerics as nx
from .caption import EMPTY_TOKENS, tokenize
from .conditioning import R2AV, RA2V, RV2AV, TASKS, ComposedInput, ConditionBundle, compose
from .data_synth import Instance, _crosspair_from, make_inpair, make_ra2v, make_rv2av, make_sample, VOCAB
from .latent_codec import Codec, reference
from .model import DenoiserOutput, ModelConfig, ModelParams, forward, init_params
from .numerics import ContractError, Tensor

log = logging.getLogger(__name__)

_STREAM_DATA, _STREAM_NOISE = 11, 7


class DegenerateLossError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative signal level squeezed into [delta, 1 - delta]."""

    delta: float = 1e-4
    steps: int = 32

    def alpha_bar(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"timestep {t} outside [0, 1]")
        return self.delta + (1.0 - 2.0 * self.delta) * math.cos(0.5 * math.pi * t) ** 2


def add_noise(z0: np.ndarray, t: float, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    if np.shape(z0) != np.shape(eps):
        raise nx.DimensionError(f"signal {np.shape(z0)} and noise {np.shape(eps)} differ in shape")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * np.asarray(z0) + math.sqrt(1.0 - a) * np.asarray(eps)


def masked_loss(eps_v: np.ndarray, eps_a: np.ndarray, pred: DenoiserOutput,
                mask_v: np.ndarray, mask_a: np.ndarray,
                lambda_v: float = 1.0, lambda_a: float = 1.0) -> Tensor:
    """Weighted squared error on unmasked target elements, mean-normalized per stream.

    Masks are per token (shape ``(L,)``) or per element; 1 marks excluded.
    """
    terms = []
    full = 0
    for eps, p, m, lam in ((eps_v, pred.eps_v, mask_v, lambda_v), (eps_a, pred.eps_a, mask_a, lambda_a)):
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != p.shape:
            raise nx.DimensionError(f"noise {eps.shape} vs prediction {p.shape}")
        m = np.asarray(m, dtype=np.float64)
        keep = 1.0 - (m[:, None] if m.ndim == 1 else m)
        keep = np.broadcast_to(keep, eps.shape)
        n = float(keep.sum())
        if n == 0:
            full += 1
            continue
        diff = nx.mul(nx.sub(Tensor(eps), p), Tensor(keep))
        terms.append(nx.mul(nx.sum(nx.square(diff)), lam / n))
    if full == 2:
        raise DegenerateLossError("both streams fully masked; nothing to train on")
    if not terms:
        return Tensor(0.0)
    return terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])


def sample_task(rng: np.random.Generator, ratio: Sequence[float] = (4, 3, 3)) -> str:
    w = np.asarray(ratio, dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise ContractError(f"task ratio must be nonnegative with positive sum, got {ratio}")
    u = rng.random() * w.sum()
    return TASKS[min(int(np.searchsorted(np.cumsum(w), u, side="right")), len(TASKS) - 1)]


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    stage_steps: tuple[int, int, int] = (10000, 20000, 20000)
    step_scale: float = 0.02
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    task_ratio: tuple[float, float, float] = (4.0, 3.0, 3.0)
    cfg_dropout_p: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ContractError("learning rate must be >= 0 and batch size >= 1")
        if any(r < 0 for r in self.task_ratio) or sum(self.task_ratio) <= 0:
            raise ContractError("task ratio must be positive")

    def steps_for(self, stage: int) -> int:
        return max(1, int(round(self.stage_steps[stage - 1] * self.step_scale)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)


@dataclass
class CurriculumState:
    stage: int = 1
    step: int = 0  # steps completed within the stage
    global_step: int = 0
    adam_t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# instance streams


def _entry_for(manifest: list[dict], n: int, seed: int) -> dict:
    epoch, i = divmod(n, len(manifest))
    order = np.random.default_rng([seed, epoch, 13]).permutation(len(manifest))
    return manifest[int(order[i])]


@dataclass(frozen=True)
class Draw:
    """What the ``n``-th instance of a stage will be, before any rendering."""

    entry: dict
    task: str
    inpair: bool
    ref_seed: int


def plan_instance(manifest: list[dict], stage: int, n: int, cfg: TrainConfig) -> Draw:
    entry = _entry_for(manifest, n, cfg.seed)
    rng = np.random.default_rng([cfg.seed, stage, n, _STREAM_DATA])
    ref_seed = int(rng.integers(2 ** 31 - 1))
    if stage == 1:
        return Draw(entry, R2AV, True, ref_seed)
    if stage == 2:
        return Draw(entry, R2AV, False, ref_seed)
    task = sample_task(rng, cfg.task_ratio)
    if task not in entry.get("task_eligibility", TASKS):
        task = R2AV
    # editing and animation take references from an independent clip
    inpair = task == R2AV and rng.random() < 0.5
    return Draw(entry, task, inpair, ref_seed)


def draw_instance(manifest: list[dict], stage: int, n: int, cfg: TrainConfig) -> Instance:
    """The ``n``-th training instance of ``stage`` (wraps around the manifest)."""
    d = plan_instance(manifest, stage, n, cfg)
    s = make_sample(d.entry["seed"], d.entry["n_identities"])
    if d.task == RV2AV:
        return make_rv2av(s, d.ref_seed)
    if d.task == RA2V:
        return make_ra2v(s, d.ref_seed)
    return make_inpair(s) if d.inpair else _crosspair_from(s, d.ref_seed)


def instance_bundle(inst: Instance, codec: Codec) -> ConditionBundle:
    return ConditionBundle(
        [codec.encode(r, reference(k + 1)) for k, r in enumerate(inst.identity_refs)],
        [codec.encode(r, reference(k + 1)) for k, r in enumerate(inst.timbre_refs)],
        None if inst.source_video is None else codec.encode(inst.source_video),
        None if inst.driving_audio is None else codec.encode(inst.driving_audio),
        inst.caption)


@dataclass
class Prepared:
    composed: ComposedInput
    tokens: object
    t: float
    eps_v: np.ndarray
    eps_a: np.ndarray
    task: str


def prepare(inst: Instance, stage: int, rng: np.random.Generator, cfg: TrainConfig,
            model_cfg: ModelConfig, sched: NoiseSchedule, codec: Codec) -> Prepared:
    z_v, z_a = codec.encode(inst.video), codec.encode(inst.audio)
    t = float(rng.random())
    eps_v = rng.standard_normal(z_v.tokens.shape)
    eps_a = rng.standard_normal(z_a.tokens.shape)
    drop_text = rng.random() < cfg.cfg_dropout_p
    drop_refs = rng.random() < cfg.cfg_dropout_p
    bundle = instance_bundle(inst, codec)
    if drop_refs:
        bundle = bundle.without_references()
    tokens = EMPTY_TOKENS if drop_text else tokenize(inst.caption, VOCAB)
    mask_v, mask_a = inst.masks(stage)
    zt_v = z_v.with_tokens(add_noise(z_v.tokens, t, eps_v, sched))
    zt_a = z_a.with_tokens(add_noise(z_a.tokens, t, eps_a, sched))
    composed = compose(zt_v, zt_a, bundle, model_cfg.rope, mask_v, mask_a)
    return Prepared(composed, tokens, t, eps_v, eps_a, inst.task)


def batch_loss(prepared: Sequence[Prepared], params: ModelParams, cfg: TrainConfig) -> Tensor:
    losses = []
    for p in prepared:
        out = forward(p.composed, p.tokens, p.t, params, grad=True)
        losses.append(masked_loss(p.eps_v, p.eps_a, out, p.composed.mask_v, p.composed.mask_a,
                                  cfg.lambda_v, cfg.lambda_a))
    total = losses[0]
    for l in losses[1:]:
        total = nx.add(total, l)
    return nx.mul(total, 1.0 / len(losses))


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: CurriculumState,
                cfg: TrainConfig) -> ModelParams:
    b1, b2 = cfg.betas
    state.adam_t += 1
    c1, c2 = 1.0 - b1 ** state.adam_t, 1.0 - b2 ** state.adam_t
    new = {}
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p)) * b1 + (1.0 - b1) * g
        v = state.v.get(name, np.zeros_like(p)) * b2 + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return ModelParams(params.cfg, new)


def train_step(batch: Sequence[Instance], state: CurriculumState, params: ModelParams, cfg: TrainConfig,
               sched: NoiseSchedule = NoiseSchedule(), codec: Optional[Codec] = None
               ) -> tuple[ModelParams, CurriculumState, float]:
    codec = codec or Codec()
    rng = np.random.default_rng([cfg.seed, state.global_step, _STREAM_NOISE])
    prepared = [prepare(inst, state.stage, rng, cfg, params.cfg, sched, codec) for inst in batch]
    loss = batch_loss(prepared, params, cfg)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at stage {state.stage} step {state.step}: "
                            f"tasks={[p.task for p in prepared]}")
    grads = nx.backward(loss)
    params = adam_update(params, grads, state, cfg)
    state.step += 1
    state.global_step += 1
    return params, state, value


# ---------------------------------------------------------------------------
# checkpoints and the curriculum driver


def save_state(path: str | Path, params: ModelParams, state: CurriculumState, cfg: TrainConfig,
               extra: Optional[dict] = None) -> None:
    meta = {"kind": "synav-train", "model": params.cfg.to_dict(), "train": cfg.to_dict(),
            "stage": state.stage, "step": state.step, "global_step": state.global_step,
            "adam_t": state.adam_t, "vocab": list(VOCAB.words)}
    meta.update(extra or {})
    tensors = dict(params.tensors)
    tensors.update({f"adam.m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in state.v.items()})
    checkpoint.save(path, meta, tensors)


def load_state(path: str | Path) -> tuple[ModelParams, CurriculumState, TrainConfig, dict]:
    meta, tensors = checkpoint.load(path)
    cfg = ModelConfig.from_dict(meta["model"])
    params = ModelParams(cfg, {k: v for k, v in tensors.items() if not k.startswith("adam.")})
    state = CurriculumState(meta["stage"], meta["step"], meta["global_step"], meta["adam_t"],
                            {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")},
                            {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")})
    return params, state, TrainConfig.from_dict(meta["train"]), meta


def run_stage(manifest: list[dict], params: ModelParams, state: CurriculumState, cfg: TrainConfig,
              until_step: Optional[int] = None, on_step: Optional[Callable[[dict], None]] = None,
              sched: NoiseSchedule = NoiseSchedule()) -> tuple[ModelParams, CurriculumState, list[float]]:
    """Advance the current stage until ``until_step`` (default: the stage length)."""
    codec = Codec()
    end = cfg.steps_for(state.stage) if until_step is None else until_step
    losses = []
    while state.step < end:
        first = state.step * cfg.batch_size
        batch = [draw_instance(manifest, state.stage, first + b, cfg) for b in range(cfg.batch_size)]
        params, state, loss = train_step(batch, state, params, cfg, sched, codec)
        losses.append(loss)
        if on_step:
            on_step({"step": state.global_step, "stage": state.stage, "loss": loss,
                     "task": [inst.task for inst in batch]})
    return params, state, losses


def run_curriculum(manifest: list[dict], cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(),
                   out_dir: Optional[str | Path] = None, params: Optional[ModelParams] = None,
                   state: Optional[CurriculumState] = None,
                   on_step: Optional[Callable[[dict], None]] = None
                   ) -> tuple[ModelParams, CurriculumState, dict[int, list[float]]]:
    params = params or init_params(model_cfg, cfg.seed)
    state = state or CurriculumState()
    history: dict[int, list[float]] = {}
    out = Path(out_dir) if out_dir else None
    while state.stage <= 3:
        params, state, losses = run_stage(manifest, params, state, cfg, on_step=on_step)
        history[state.stage] = losses
        log.info("stage %d done after %d steps, last loss %.4f", state.stage, state.step,
                 losses[-1] if losses else float("nan"))
        if out:
            save_state(out / f"stage{state.stage}.ckpt", params, state, cfg)
        if state.stage == 3:
            break
        state = replace(state, stage=state.stage + 1, step=0)
    return params, state, history


def write_jsonl(path: str | Path) -> Callable[[dict], None]:
    fh = open(path, "a", encoding="utf-8")

    def emit(record: dict):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return emit
