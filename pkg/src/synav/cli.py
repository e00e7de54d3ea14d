"""Command line entry point.

Exit codes: 0 ok, 1 usage, 2 validation failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import caption as cap
from .conditioning import R2AV, RA2V, RV2AV, ConditionBundle, derive_task
from .data_synth import (Instance, _crosspair_from, dumps_manifest, load_manifest, make_manifest,
                         make_ra2v, make_rv2av, make_sample)
from .inference import GuidanceConfig, sample
from .latent_codec import Codec, read_media, reference, write_media
from .metrics import config_hash, make_report, sample_metrics
from .model import ModelConfig, init_params
from .syn_rope import kernel_profile
from .training import (CurriculumState, TrainConfig, instance_bundle, load_state, run_curriculum,
                       run_stage, save_state, write_jsonl)

log = logging.getLogger("synav")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def provenance(command: str, seed: int, config) -> dict:
    return {"tool": "synav", "version": __version__, "command": command, "seed": seed,
            "config_hash": config_hash(config)}


# ---------------------------------------------------------------------------
# bundles on disk


def write_bundle(directory: Path, inst: Instance) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(inst.identity_refs, start=1):
        write_media(directory / f"identity_{k}.didm", r)
    for k, r in enumerate(inst.timbre_refs, start=1):
        write_media(directory / f"timbre_{k}.didm", r)
    if inst.source_video is not None:
        write_media(directory / "source_video.didm", inst.source_video)
    if inst.driving_audio is not None:
        write_media(directory / "driving_audio.didm", inst.driving_audio)
    (directory / "caption.json").write_text(cap.serialize(inst.caption), encoding="utf-8")


def read_bundle(directory: Path, codec: Codec) -> ConditionBundle:
    def refs(prefix):
        out, k = [], 1
        while (directory / f"{prefix}_{k}.didm").exists():
            out.append(codec.encode(read_media(directory / f"{prefix}_{k}.didm"), reference(k)))
            k += 1
        return out

    src = directory / "source_video.didm"
    dri = directory / "driving_audio.didm"
    caption = cap.parse((directory / "caption.json").read_text(encoding="utf-8"))
    bundle = ConditionBundle(refs("identity"), refs("timbre"),
                             codec.encode(read_media(src)) if src.exists() else None,
                             codec.encode(read_media(dri)) if dri.exists() else None, caption)
    cap.validate_against_references(caption, len(bundle.identity_refs), len(bundle.timbre_refs))
    return bundle


def task_instance(task: str, s, ref_seed: int) -> Instance:
    if task == RV2AV:
        return make_rv2av(s, ref_seed)
    if task == RA2V:
        return make_ra2v(s, ref_seed)
    return _crosspair_from(s, ref_seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.manifest and Path(args.manifest).exists():
        manifest = load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    elif args.n:
        manifest = make_manifest(args.n, args.seed)
    else:
        raise UsageError("gen-data needs an existing --manifest or --n")
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(dumps_manifest(manifest), encoding="utf-8")
    for i, entry in enumerate(manifest):
        s = make_sample(entry["seed"], entry["n_identities"])
        d = out / "samples" / f"{i:05d}"
        d.mkdir(parents=True, exist_ok=True)
        write_media(d / "video.didm", s.video)
        write_media(d / "audio.didm", s.audio)
        (d / "caption.json").write_text(cap.serialize(s.caption), encoding="utf-8")
        _json_dump(d / "script.json", {"seed": s.seed, "slots": list(s.script.slots),
                                       "intervals": [list(map(list, iv)) for iv in s.script.intervals],
                                       "identities": [i.seed for i in s.identities],
                                       "timbres": [list(t.freqs) for t in s.timbres]})
        if args.bundles:
            for task in (R2AV, RV2AV, RA2V):
                write_bundle(d / "bundles" / task, task_instance(task, s, args.seed * 7919 + i))
    _json_dump(out / "provenance.json", provenance("gen-data", args.seed, manifest))
    return EXIT_OK


def _load_train_config(args) -> tuple[TrainConfig, ModelConfig]:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    model_raw = raw.pop("model", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    tc = TrainConfig.from_dict(raw)
    mc = ModelConfig.from_dict(model_raw) if model_raw else ModelConfig()
    return tc, mc


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    emit = write_jsonl(out / "metrics.jsonl")
    if args.resume:
        params, state, tc, _ = load_state(args.resume)
        if args.stage is not None and args.stage != state.stage:
            raise UsageError(f"checkpoint is in stage {state.stage}, not {args.stage}")
    else:
        tc, mc = _load_train_config(args)
        params, state = init_params(mc, tc.seed), CurriculumState(stage=args.stage or 1)
    prov = provenance("train", tc.seed, {"train": tc.to_dict(), "model": params.cfg.to_dict()})
    if args.stage is None and args.steps is None:
        params, state, history = run_curriculum(manifest, tc, params.cfg, out, params, state, emit)
    else:
        params, state, losses = run_stage(manifest, params, state, tc, args.steps, emit)
        history = {state.stage: losses}
    loss_stats = {str(k): {"first": v[0], "last": v[-1], "mean": float(np.mean(v)), "n": len(v)}
                  for k, v in history.items() if v}
    save_state(out / "last.ckpt", params, state, tc, {"provenance": prov, "loss": loss_stats})
    _json_dump(out / "provenance.json", prov)
    return EXIT_OK


def cmd_sample(args) -> int:
    params, _, _, _ = load_state(args.checkpoint)
    codec = Codec()
    bundle = read_bundle(Path(args.bundle), codec)
    task = derive_task(bundle).kind
    g = GuidanceConfig(args.w_text, args.w_ref, args.steps)
    video, audio = sample(bundle, g, args.seed, params, codec=codec, project=args.project)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_media(out / "video.didm", video)
    write_media(out / "audio.didm", audio)
    side = {"task": task, "seed": args.seed, "weights": {"w_T": g.w_T, "w_S": g.w_S}, "steps": g.steps,
            "project": args.project}
    side["provenance"] = provenance("sample", args.seed, side)
    _json_dump(out / "sample.json", side)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = Path(args.data)
    manifest = load_manifest((data / "manifest.json").read_text(encoding="utf-8"))
    if args.limit:
        manifest = manifest[:args.limit]
    params, meta = None, {}
    if args.checkpoint:
        params, _, _, meta = load_state(args.checkpoint)
    g = GuidanceConfig(args.w_text, args.w_ref, args.steps)
    codec = Codec()
    rows = []
    for i, entry in enumerate(manifest):
        truth = make_sample(entry["seed"], entry["n_identities"])
        if params is None:
            d = data / "samples" / f"{i:05d}"
            video, audio = read_media(d / "video.didm"), read_media(d / "audio.didm")
        else:
            inst = task_instance(args.task, truth, args.seed * 7919 + i)
            video, audio = sample(instance_bundle(inst, codec), g, args.seed + i, params, codec=codec,
                                  project=args.project)
        rows.append(sample_metrics(f"{i:05d}", video, audio, truth))
    config = {"checkpoint": args.checkpoint, "task": args.task, "guidance": vars(g) if params else None,
              "project": args.project,
              "manifest": config_hash(manifest)}
    report = make_report(rows, config, {"provenance": provenance("eval", args.seed, config),
                                        "mode": "model" if params else "ground-truth",
                                        "loss": meta.get("loss")})
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _offsets(spec: str) -> list[float]:
    if ":" in spec:
        parts = [float(p) for p in spec.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1.0
        return list(np.arange(start, stop + 1e-9, step))
    return [float(p) for p in spec.split(",") if p]


def cmd_rope_inspect(args) -> int:
    offsets = _offsets(args.offsets)
    prof = kernel_profile(args.head_dim, args.base, offsets, args.samples, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset", "similarity"])
    for o, s in zip(offsets, prof):
        w.writerow([repr(float(o)), repr(s)])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        _json_dump(Path(args.out).with_suffix(".provenance.json"),
                   provenance("rope-inspect", args.seed, vars(args)))
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_caption_lint(args) -> int:
    text = Path(args.file).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        print(f"document: invalid JSON: {e}")
        return EXIT_INVALID
    errors = cap.check(doc)
    for e in errors:
        print(f"{e.subject}: {e}")
    return EXIT_INVALID if errors else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset from a manifest")
    g.add_argument("--manifest")
    g.add_argument("--n", type=int, default=0, help="create a manifest of this many samples")
    g.add_argument("--out", required=True)
    g.add_argument("--bundles", action="store_true", help="also write per-task condition bundles")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the curriculum or part of one stage")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2, 3))
    t.add_argument("--steps", type=int, help="train the stage until this many steps")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    for name, func in (("sample", cmd_sample), ("eval", cmd_eval)):
        s = sub.add_parser(name)
        s.add_argument("--checkpoint", required=name == "sample")
        if name == "sample":
            s.add_argument("--bundle", required=True)
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--data", required=True)
            s.add_argument("--out")
            s.add_argument("--task", choices=(R2AV, RV2AV, RA2V), default=R2AV)
            s.add_argument("--limit", type=int, default=0)
        s.add_argument("--w-text", type=float, default=5.0)
        s.add_argument("--w-ref", type=float, default=5.0)
        s.add_argument("--steps", type=int, default=32)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--project", action="store_true", help="clamp clean estimates to the media range")
        s.set_defaults(func=func)

    r = sub.add_parser("rope-inspect", help="rotary self-similarity profile as CSV")
    r.add_argument("--head-dim", type=int, default=8)
    r.add_argument("--base", type=float, default=10000.0)
    r.add_argument("--offsets", default="0:300")
    r.add_argument("--samples", type=int, default=1000)
    r.add_argument("--out")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_rope_inspect)

    c = sub.add_parser("caption-lint", help="validate a structured caption file")
    c.add_argument("file")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_caption_lint)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing subcommand")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (cap.CaptionError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.exception("failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
