"""Command-line entry point: ``eend-eda <subcommand> ...``.

Subcommands: simulate, featurize, train, infer, combine, score, count.
Every run that writes artifacts also writes a JSON run manifest (config,
seed, checkpoint hashes, argv, timestamps) next to its outputs.

Exit codes: 0 success, 1 runtime error, 2 usage error (bad or conflicting
flags, missing input files).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .combine import combine_annotations
from .features import featurize, mean_normalize, read_features, read_wav, write_features
from .inference import infer
from .model import load_model
from .rttm import ActivityMatrix, Annotation, rasterize, read_labels, read_rttm, segmentize, write_rttm
from .scoring import counting_confusion, der, format_confusion, jer
from .simulate import SimConfig, write_corpus
from .trainer import TrainConfig, load_config, read_manifest, train

log = logging.getLogger("eend_eda")

SCORE_COLUMNS = ("recording", "speech", "miss", "false_alarm", "confusion", "der")


class UsageError(Exception):
    """Bad invocation: reported with exit code 2."""


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(path, args, argv, started, seed=None, config=None, checkpoints=()):
    record = {
        "command": args.command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "config": config if config is not None else _jsonable(vars(args)),
        "checkpoints": {str(p): sha256(p) for p in checkpoints if Path(p).exists()},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _jsonable(values):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in values.items()
            if k != "func" and not callable(v)}


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"no such file or directory: {p}")


def _output_manifest(output):
    out = Path(output)
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".run.json")


# ---------------------------------------------------------------- inputs

def collect_inputs(paths, factor=10):
    """(recording id, FeatureSequence, label path or None) for WAV, feature, manifest or directory inputs."""
    items = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files = sorted(list(path.glob("*.feat")) + list(path.glob("*.wav")))
            items.extend(collect_inputs(files, factor))
        elif path.suffix == ".tsv":
            for e in read_manifest(path):
                items.append((e.recording_id, read_features(e.features), e.labels))
        elif path.suffix == ".wav":
            items.append((path.stem, featurize(read_wav(path), factor), None))
        else:
            items.append((path.stem, read_features(path), None))
    return items


def load_sad(path, recording_id, seq):
    """Frame speech labels (length T) from an RTTM or frame-label file."""
    path = Path(path)
    if path.suffix == ".rttm":
        anns = {a.recording_id: a for a in read_rttm(path)}
        ann = anns.get(recording_id, Annotation(recording_id))
        mat = rasterize(ann, seq.frame_period, seq.num_frames).matrix
    else:
        mat = read_labels(path, seq.num_frames).matrix
        if mat.shape[1] != seq.num_frames:
            raise ValueError(f"{path}: {mat.shape[1]} SAD frames for {seq.num_frames} feature frames")
    return mat.any(axis=0) if mat.size else np.zeros(seq.num_frames, dtype=bool)


def model_input(seq, meta):
    norm = meta.get("train", {}).get("mean_norm", 1)
    return mean_normalize(seq.frames) if norm else seq.frames


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args, argv, started):
    cfg = SimConfig(num_speakers=args.nspk, num_mixtures=args.count, beta=args.beta, seed=args.seed,
                    mode=args.mode, crop=args.crop, speaker_pool=args.speaker_pool,
                    speaker_seed=args.speaker_seed, min_utterances=args.min_utterances,
                    max_utterances=args.max_utterances)
    manifest = write_corpus(cfg, args.output, jobs=args.jobs)
    write_run_manifest(Path(args.output) / "run_manifest.json", args, argv, started, cfg.seed, asdict(cfg))
    print(manifest)


def cmd_featurize(args, argv, started):
    _require(*args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.input:
        seq = featurize(read_wav(path), args.factor)
        write_features(out / f"{Path(path).stem}.feat", seq)
    write_run_manifest(out / "run_manifest.json", args, argv, started)


def cmd_train(args, argv, started):
    _require(args.config, args.init, *args.train)
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    try:
        config = load_config(args.config, overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc
    out = Path(args.output)
    train(args.train, config, out, init=args.init,
          progress=lambda epoch, m: print(f"epoch {epoch}\tdiar {m[0]:.4f}\texist {m[1]:.4f}\ttotal {m[2]:.4f}"))
    ckpts = [out / "checkpoint.npz"] + ([Path(args.init)] if args.init else [])
    write_run_manifest(out / "run_manifest.json", args, argv, started, config.seed, asdict(config), ckpts)


def cmd_infer(args, argv, started):
    _require(args.model, *args.input)
    sad = None if args.sad in (None, "none") else args.sad
    if sad is not None:
        _require(sad)
        if args.mode != "plain":
            raise UsageError("--sad can only be combined with --mode plain")
    model, meta = load_model(args.model)
    annotations = []
    for rec, seq, _ in collect_inputs(args.input, args.factor):
        z = load_sad(sad, rec, seq) if sad else None
        y = infer(model_input(seq, meta), model, args.mode, s_max=args.smax, tau=args.tau,
                  seed=args.seed, shuffle=not args.no_shuffle, sad=z)
        act = ActivityMatrix(y, seq.frame_period, [f"{rec}_spk{i}" for i in range(y.shape[0])])
        annotations.append(segmentize(act, rec))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rttm(out, annotations)
    write_run_manifest(_output_manifest(out), args, argv, started, args.seed, checkpoints=[args.model])


def cmd_combine(args, argv, started):
    _require(*args.hypotheses)
    per_file = [{a.recording_id: a for a in read_rttm(p)} for p in args.hypotheses]
    recordings = list(dict.fromkeys(r for hyp in per_file for r in hyp))
    fused = []
    for rec in recordings:
        anns = [hyp.get(rec, Annotation(rec)) for hyp in per_file]
        fused.append(combine_annotations(anns, args.frame_period, recording_id=rec))
    write_rttm(args.output, fused)
    write_run_manifest(_output_manifest(Path(args.output)), args, argv, started)


def score_report(refs, hyps, collar, with_jer=False):
    """Tab-separated per-recording scores plus a TOTAL line; returns (text, total DER)."""
    cols = SCORE_COLUMNS + (("jer",) if with_jer else ())
    lines = ["\t".join(cols)]
    total = None
    jers = []
    for rec, ref in refs.items():
        hyp = hyps.get(rec, Annotation(rec))
        b = der(ref, hyp, collar)
        total = b if total is None else total + b
        s = b.seconds()
        row = [rec, f"{s['speech']:.3f}", f"{s['miss']:.3f}", f"{s['false_alarm']:.3f}",
               f"{s['confusion']:.3f}", f"{100 * b.der:.2f}"]
        if with_jer:
            jers.append(jer(ref, hyp).jer)
            row.append(f"{100 * jers[-1]:.2f}")
        lines.append("\t".join(row))
    s = total.seconds()
    row = ["TOTAL", f"{s['speech']:.3f}", f"{s['miss']:.3f}", f"{s['false_alarm']:.3f}",
           f"{s['confusion']:.3f}", f"{100 * total.der:.2f}"]
    if with_jer:
        row.append(f"{100 * float(np.mean(jers)):.2f}")
    lines.append("\t".join(row))
    return "\n".join(lines) + "\n", total.der


def cmd_score(args, argv, started):
    _require(args.ref, args.hyp)
    refs = {a.recording_id: a for a in read_rttm(args.ref) if a.segments}
    if not refs:
        raise ValueError(f"{args.ref}: no reference speech")
    hyps = {a.recording_id: a for a in read_rttm(args.hyp)}
    text, total = score_report(refs, hyps, args.collar, args.jer)
    sys.stdout.write(text)
    print(f"DER {100 * total:.2f}")
    if args.output:
        Path(args.output).write_text(text)
        write_run_manifest(_output_manifest(Path(args.output)), args, argv, started)


def cmd_count(args, argv, started):
    _require(args.model, *args.input)
    model, meta = load_model(args.model)
    refs, hyps, lines = [], [], ["recording\treference\testimate"]
    for rec, seq, labels in collect_inputs(args.input, args.factor):
        est = model.estimate(model_input(seq, meta), order=None if args.no_shuffle else args.seed,
                             tau=args.tau)
        ref = int(read_labels(labels).matrix.any(axis=1).sum()) if labels else -1
        lines.append(f"{rec}\t{ref}\t{est.count}")
        if labels:
            refs.append(ref)
            hyps.append(est.count)
    text = "\n".join(lines) + "\n"
    if refs:
        mat, acc = counting_confusion(refs, hyps)
        text += format_confusion(mat) + f"\naccuracy\t{acc:.4f}\n"
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text)
        write_run_manifest(_output_manifest(Path(args.output)), args, argv, started, args.seed,
                           checkpoints=[args.model])


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        conv = {"int": int, "float": float, "str": str}[f.type]
        p.add_argument(flag, dest=f.name, type=conv, default=None,
                       help=f"training config '{f.name}' (default {f.default})")


def build_parser():
    parser = argparse.ArgumentParser(prog="eend-eda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a simulated multi-speaker corpus")
    p.add_argument("--nspk", type=int, default=2, help="speakers per mixture")
    p.add_argument("--beta", type=float, default=2.0, help="mean silence gap in seconds")
    p.add_argument("--count", type=int, default=100, help="number of mixtures")
    p.add_argument("--mode", choices=("feature", "waveform"), default="feature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=float, default=0.0, help="cut mixtures to this many seconds (0: off)")
    p.add_argument("--speaker-pool", type=int, default=0, help="draw speakers from a fixed pool (0: fresh)")
    p.add_argument("--speaker-seed", type=int, default=-1, help="seed of the speaker profiles (-1: --seed)")
    p.add_argument("--min-utterances", type=int, default=10)
    p.add_argument("--max-utterances", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", help="log-Mel features of 8/16 kHz WAV files")
    p.add_argument("input", nargs="+", help="WAV files")
    p.add_argument("--factor", type=int, choices=(5, 10), default=10, help="subsampling factor")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model from corpus manifests")
    p.add_argument("--train", nargs="+", required=True, help="manifest files")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--init", help="checkpoint to start from (adaptation)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize recordings and write an RTTM")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--input", nargs="+", required=True, help="WAV, feature, manifest (.tsv) or directory")
    p.add_argument("--sad", default="none", help="SAD as RTTM or frame-label file, or 'none'")
    p.add_argument("--mode", choices=("plain", "iterative", "iterative-plus"), default="plain")
    p.add_argument("--smax", type=int, default=20, help="largest speaker count the model outputs")
    p.add_argument("--tau", type=float, default=0.5, help="attractor existence threshold")
    p.add_argument("--seed", type=int, default=0, help="seed of the attractor input shuffle")
    p.add_argument("--no-shuffle", action="store_true", help="feed frames in chronological order")
    p.add_argument("--factor", type=int, choices=(5, 10), default=10, help="subsampling for WAV input")
    p.add_argument("-o", "--output", required=True, help="hypothesis RTTM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("combine", help="fuse RTTM hypotheses by overlap-aware voting")
    p.add_argument("hypotheses", nargs="+", help="RTTM files")
    p.add_argument("--frame-period", type=float, default=0.05, help="voting grid in seconds")
    p.add_argument("-o", "--output", required=True, help="fused RTTM")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("score", help="DER (and JER) of a hypothesis RTTM",
                       description="Prints tab-separated columns " + ", ".join(SCORE_COLUMNS) +
                       " (seconds, DER in percent; jer last with --jer), one line per reference "
                       "recording and a TOTAL line, then 'DER <percent>'.")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.25, help="seconds around reference boundaries")
    p.add_argument("--jer", action="store_true", help="add a JER column")
    p.add_argument("-o", "--output", help="also write the table here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("count", help="estimate speaker counts and report a confusion matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--input", nargs="+", required=True, help="manifest (.tsv), feature or WAV files")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--factor", type=int, choices=(5, 10), default=10)
    p.add_argument("-o", "--output", help="also write the report here")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        args.func(args, argv, started)
    except UsageError as exc:
        print(f"eend-eda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure is reported, not traced
        if args.verbose:
            log.exception("failed")
        print(f"eend-eda {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
