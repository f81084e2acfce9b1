"""Command-line entry point: gen-data, train, eval and converse.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every command appends one JSON line to ``manifest.jsonl`` in its output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path


from . import __version__
from .features import (
    AuPoseSequence, CsvFormatError, clamp_native, generate_dataset, ingest_csv,
    load_dataset, read_transcript, train_stats, write_csv,
)
from .numerics import CheckpointError, NumericError, load_checkpoint
from .plotting import plot_history, plot_synth_history, plot_tracks
from .synthesizer.gan import (
    dataset_sequences, evaluate_synth, load_synth, rollout, save_synth, train_synth,
)
from .synthesizer.networks import SynthConfig
from .synthesizer.render import conditioning_batch, write_frames
from .training import (
    TrainConfig, convert_fields, evaluate, load_model, read_key_values, save_model,
    train_listening, train_speaking,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PHASES = ("listening", "speaking", "synth")
SYNTH_EXTRA = {"phase": "synth", "dataset_dir": "", "checkpoint": "", "seq_len": "8"}


class UsageError(Exception):
    pass


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def _write_manifest(out_dir, command, config, seed, inputs, outputs, t0):
    rec = {"command": command, "config": config, "seed": seed, "version": __version__,
           "inputs": [str(p) for p in inputs], "outputs": [str(p) for p in outputs],
           "duration_s": round(time.perf_counter() - t0, 3)}
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "manifest.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _fmt_metrics(metrics: dict) -> str:
    return "".join(f"{k} = {v:.6f}\n" for k, v in metrics.items())


def checkpoint_phase(path) -> str:
    """Phase recorded in a checkpoint's metadata block."""
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blocks = load_checkpoint(path)
    for phase in PHASES:
        if f"meta.{phase}" in blocks:
            return phase
    raise CheckpointError(f"{path}: checkpoint has no model metadata")


def _require_phase(path, phase):
    found = checkpoint_phase(path)
    if found != phase:
        raise UsageError(f"{path} holds a {found} checkpoint, not {phase}")


# ---------------------------------------------------------------- config

def read_config(path, phase):
    """(config object, plain dict snapshot) for ``phase`` from a key=value file."""
    try:
        raw = read_key_values(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    if raw.get("phase", phase) != phase:
        raise UsageError(f"config phase {raw['phase']!r} does not match --phase {phase}")
    raw.pop("phase", None)
    try:
        if phase == "synth":
            extra = {k: raw.pop(k, v) for k, v in SYNTH_EXTRA.items() if k != "phase"}
            cfg = SynthConfig(**convert_fields(SynthConfig, raw))
            extra["seq_len"] = int(extra["seq_len"])
            if extra["seq_len"] < 2:
                raise ValueError("seq_len must be >= 2")
            snap = dict(dataclasses.asdict(cfg), phase=phase, **extra)
            snap["g_widths"], snap["d_widths"] = list(cfg.g_widths), list(cfg.d_widths)
            return (cfg, extra), snap
        cfg = TrainConfig.parse("", dict(raw, phase=phase))
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg, dataclasses.asdict(cfg)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    t0 = time.perf_counter()
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = Path(args.out)
    try:
        generate_dataset(out, args.samples, args.frames, args.seed)
    except OSError as e:
        raise UsageError(f"cannot write dataset: {e}") from None
    print(f"samples = {args.samples}\nout = {out}")
    _write_manifest(out, "gen-data", {"samples": args.samples, "frames": args.frames},
                    args.seed, [], [out], t0)
    return EXIT_OK


def _print_row(row):
    print(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]), flush=True)


def cmd_train(args):
    t0 = time.perf_counter()
    cfg, snap = read_config(args.config, args.phase)
    dataset_dir = snap["dataset_dir"]
    ckpt = snap["checkpoint"]
    if not dataset_dir:
        raise UsageError("config is missing dataset_dir")
    if not ckpt:
        raise UsageError("config is missing checkpoint")
    ckpt = Path(ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset_dir)
    hist_path = Path(f"{ckpt}.history.csv")
    png_path = Path(f"{ckpt}.loss.png")
    outputs = [ckpt, hist_path, png_path]
    if args.phase == "synth":
        scfg, extra = cfg
        seqs = dataset_sequences(samples, extra["seq_len"])
        stats = train_stats(samples)
        print("step,l_gan,l1,perc,total,g_loss,d_loss", flush=True)
        res = train_synth(seqs, stats, scfg, log=_print_row)
        save_synth(ckpt, res.store, scfg, stats)
        res.history.write_csv(hist_path)
        plot_synth_history(res.history, png_path)
        seed = scfg.seed
    else:
        print("iter,total,mse,con", flush=True)
        if args.phase == "listening":
            res = train_listening(samples, cfg, log=_print_row)
        else:
            res = train_speaking(samples, cfg, log=_print_row)
            outputs.append(Path(f"{ckpt}.vocab"))
        save_model(ckpt, res.model, res.stats)
        res.history.write_csv(hist_path)
        plot_history(res.history, png_path)
        seed = cfg.seed
    print(f"checkpoint = {ckpt}")
    _write_manifest(ckpt.parent, f"train {args.phase}", snap, seed, [Path(dataset_dir), Path(args.config)],
                    outputs, t0)
    return EXIT_OK


def cmd_eval(args):
    t0 = time.perf_counter()
    _require_phase(args.checkpoint, args.phase)
    samples = [s for s in load_dataset(args.dataset) if s.split == args.split]
    if not samples:
        raise ValueError(f"dataset has no {args.split} samples")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "metrics.txt"]
    if args.phase == "synth":
        G, _, stats = load_synth(args.checkpoint)
        r = evaluate_synth(G, dataset_sequences(samples, args.seq_len, args.split), stats)
        metrics = {"l1": r.l1, "d_au": r.d_au, "d_pose": r.d_pose,
                   "failures": r.failures, "frames": r.frames}
    else:
        model, stats = load_model(args.checkpoint)
        r = evaluate(model, stats, samples)
        metrics = {"d_mse": r.d_mse, "d_cos": r.d_cos, "continuity": r.continuity, "count": r.count}
        png = out / "tracks.png"
        plot_tracks(stats.denormalize(r.predictions[0]), png, title=f"{args.phase} prediction")
        outputs.append(png)
    text = _fmt_metrics(metrics)
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    _write_manifest(out, f"eval {args.phase}", {"split": args.split, "seq_len": args.seq_len}, None,
                    [Path(args.checkpoint), Path(args.dataset)], outputs, t0)
    return EXIT_OK


def _emit_turn(turn_dir, name, frames_native, G, synth_stats, fps):
    """CSV, track figure and generator frames for one turn."""
    turn_dir.mkdir(parents=True, exist_ok=True)
    write_csv(turn_dir / f"{name}.csv", AuPoseSequence(frames_native, fps))
    plot_tracks(frames_native, turn_dir / "tracks.png", title=turn_dir.name)
    X = conditioning_batch(frames_native, synth_stats, G.cfg.res)
    images = rollout(G, X[None])[0]
    write_frames(turn_dir / "frames", images, fps)
    return [turn_dir / f"{name}.csv", turn_dir / "tracks.png", turn_dir / "frames"]


def cmd_converse(args):
    t0 = time.perf_counter()
    if args.turns < 1:
        raise UsageError("--turns must be >= 1")
    _require_phase(args.listen_ckpt, "listening")
    _require_phase(args.speak_ckpt, "speaking")
    _require_phase(args.synth_ckpt, "synth")
    listen, l_stats = load_model(args.listen_ckpt)
    speak, s_stats = load_model(args.speak_ckpt)
    G, _, g_stats = load_synth(args.synth_ckpt)
    inp = Path(args.input)
    speaker = ingest_csv(inp / "speaker.csv")
    transcript = read_transcript(inp / "transcript.txt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = listen.cfg.n
    outputs = []
    print("turn,role,frames,dir")
    for k in range(args.turns):
        idx = k // 2
        if k % 2 == 0:
            window = speaker.frames[idx * n:(idx + 1) * n]
            if len(window) < n:
                _warn(f"speaker track exhausted after {k} turns")
                break
            pred = listen.predict(l_stats.normalize(window))
            role, name = "listen", "listener"
            frames = clamp_native(l_stats.denormalize(pred))
        else:
            if idx >= len(transcript):
                _warn(f"transcript exhausted after {k} turns")
                break
            pred = speak.predict([transcript[idx]])[0]
            role, name = "speak", "speaker"
            frames = clamp_native(s_stats.denormalize(pred))
        turn_dir = out / f"turn{k:02d}_{role}"
        outputs += _emit_turn(turn_dir, name, frames, G, g_stats, speaker.fps)
        print(f"{k},{role},{len(frames)},{turn_dir.name}", flush=True)
    _write_manifest(out, "converse", {"turns": args.turns}, None,
                    [Path(args.listen_ckpt), Path(args.speak_ckpt), Path(args.synth_ckpt), inp],
                    outputs, t0)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="nvconv", description="Nonverbal conversation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic conversation dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from a key=value config")
    t.add_argument("--phase", choices=PHASES, required=True)
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one dataset split")
    e.add_argument("--phase", choices=PHASES, required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--seq-len", type=int, default=8, help="synth sequence length")
    e.add_argument("--out", default="", help="report directory (default: checkpoint directory)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("converse", help="alternate listening and speaking turns")
    c.add_argument("--listen-ckpt", required=True)
    c.add_argument("--speak-ckpt", required=True)
    c.add_argument("--synth-ckpt", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--turns", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_converse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CsvFormatError, CheckpointError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
