"""Command-line entry point: ``mmtsd <command> [options]``.

Exit status is 0 on success, 2 for usage errors and 1 for any other
reported error.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_run_config, with_overrides
from .errors import InputError, MMTSDError, UsageError
from .evaluation import (EVAL_COLUMNS, attach_labels, read_eval_csv, read_predictions, score_records,
                         write_eval_csv, write_predictions)
from .io import format_rttm
from .metrics import binarize_track, runs_of
from .pipeline import (build_system, load_data_dir, run_align, run_pretrain, run_train, speaker_pools,
                       synth_to_dir, text_corpus)
from .plotting import FrameTrack, plot_tracks, read_frames, write_frames
from .promptenc.corpus import EVENT_TARGETS
from .promptenc.speaker import MIN_ENROLL_FRAMES
from .prompts import PromptSpec, audio_text_pair
from .worldsim import derive_event_track, render_face_observation

SUBCOMMANDS = ("synth", "pretrain", "align", "train", "eval", "infer", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args, data_run: RunConfig | None = None) -> RunConfig:
    run = load_run_config(args.config)
    if data_run is not None:
        run = dataclasses.replace(run, world=data_run.world, data=data_run.data).resolved()
    return run


def _metric_overrides(run: RunConfig, args) -> RunConfig:
    changes = {k: getattr(args, k) for k in ("threshold", "median_window", "collar_s")
               if getattr(args, k, None) is not None}
    return with_overrides(run, metrics=changes) if changes else run


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    if args.seed is not None:
        run = with_overrides(run, world={"seed": args.seed})
    splits = synth_to_dir(run, args.out)
    print("\t".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_pretrain(args) -> int:
    run = load_run_config(args.config)
    stats = run_pretrain(run, args.out, args.log)
    print(f"speaker_accuracy={stats['speaker_accuracy']:.4f}\ttext_accuracy={stats['text_accuracy']:.4f}")
    return 0


def cmd_align(args) -> int:
    run = load_run_config(args.config)
    _, history = run_align(run, args.pretrained, args.out, args.log)
    print(f"best_epoch={history.best_epoch}\tval_mse={min(history.val_loss, default=math.nan):.6f}")
    return 0


def cmd_train(args) -> int:
    data_run, splits = load_data_dir(args.data, ("train", "val"))
    run = _config(args, data_run)
    if args.seed is not None:
        run = with_overrides(run, train={"seed": args.seed})
    progress = None
    if args.verbose:
        def progress(epoch, tr, va):
            print(f"epoch {epoch}\ttrain {tr:.4f}\tval {va:.4f}", file=sys.stderr, flush=True)
    result = run_train(run, splits, args.init, args.out, args.log, progress)
    print(f"best_epoch={result.best_epoch}\tbest_val={result.best_val:.6f}")
    return 0


def cmd_eval(args) -> int:
    data_run, splits = load_data_dir(args.data, (args.split,))
    samples = splits.get(args.split, [])
    if not samples:
        raise UsageError(f"split {args.split!r} has no samples in {args.data}")
    run = _metric_overrides(_config(args, data_run), args)
    profiles = speaker_pools(run).profiles()
    if args.predictions:
        records = attach_labels(read_predictions(args.predictions), samples, profiles)
        rows = score_records(records, samples, args.split, run.metrics, run.world.frame_rate)
    else:
        from .evaluation import predict_records

        system = build_system(run, args.checkpoint, text_corpus(run), trained=True)
        records = predict_records(system, samples, profiles, text_corpus(run), run.world,
                                  run.train.seed, run.mmtsd.enrollment)
        rows = score_records(records, samples, args.split, run.metrics, run.world.frame_rate)
        if args.save_predictions:
            write_predictions(records, args.save_predictions)
    write_eval_csv(rows, args.out)
    for r in rows:
        print("\t".join(f"{k}={r[k]:.4f}" if isinstance(r[k], float) else f"{k}={r[k]}"
                        for k in EVAL_COLUMNS))
    return 0


def _enrollment_from(samples_by_id, ref: str, target_id: str, max_frames: int) -> tuple[int, np.ndarray]:
    try:
        sample_id, speaker = ref.rsplit(":", 1)
        speaker_id = int(speaker)
    except ValueError:
        raise UsageError(f"--enroll expects <sample:speaker>, got {ref!r}") from None
    if sample_id == target_id:
        raise UsageError("enrollment must come from a different sample than the one analysed")
    source = samples_by_id.get(sample_id)
    if source is None:
        raise UsageError(f"unknown enrollment sample {sample_id!r}")
    if speaker_id not in source.speaker_ids:
        raise UsageError(f"speaker {speaker_id} does not talk in {sample_id}")
    row = source.speaker_ids.index(speaker_id)
    solo = (source.activity[row] == 1) & (source.activity.sum(axis=0) == 1)
    runs = runs_of(solo)
    if not runs:
        raise InputError(f"speaker {speaker_id} never talks alone in {sample_id}")
    a, b = max(runs, key=lambda r: (r[1] - r[0], -r[0]))
    if b - a < MIN_ENROLL_FRAMES:
        raise InputError(f"longest solo region of speaker {speaker_id} in {sample_id} has "
                         f"{b - a} frames, need {MIN_ENROLL_FRAMES}")
    return speaker_id, source.features[a:min(b, a + max_frames)]


def cmd_infer(args) -> int:
    if args.text is not None and not args.text.strip():
        raise UsageError("--text must not be empty")
    if args.text is None and args.enroll is None and args.face is None:
        raise UsageError("give a prompt: --text, --enroll, --face, or --text with --enroll")
    if args.face is not None and (args.text is not None or args.enroll is not None):
        raise UsageError("--face cannot be combined with other prompts")
    if args.event is not None and args.event not in EVENT_TARGETS:
        raise UsageError(f"unknown --event {args.event!r}; choose from {', '.join(EVENT_TARGETS)}")
    data_run, splits = load_data_dir(args.data)
    run = _metric_overrides(_config(args, data_run), args)
    by_id = {s.sample_id: s for split in splits.values() for s in split}
    sample = by_id.get(args.sample)
    if sample is None:
        raise UsageError(f"unknown sample {args.sample!r}")
    profiles = speaker_pools(run).profiles()

    attribute, value = None, None
    if args.enroll is not None:
        speaker_id, seg = _enrollment_from(by_id, args.enroll, args.sample, run.mmtsd.enroll_max_frames)
        if args.text is not None:
            event = args.event or "include_enrolled"
            groups = [audio_text_pair(event, args.text, speaker_id, seg)]
            attribute, value = EVENT_TARGETS[event][0], speaker_id
        else:
            groups = [[PromptSpec("audio", "audio", "speaker_id", speaker_id, seg)]]
            attribute, value = "speaker_id", speaker_id
    elif args.face is not None:
        if args.face not in profiles:
            raise UsageError(f"unknown speaker {args.face}")
        obs = render_face_observation(profiles[args.face], aug=False, seed=0, face_noise=run.world.face_noise)
        groups = [[PromptSpec("face", "face", "face_id", args.face, obs)]]
        attribute, value = "face_id", args.face
    else:
        groups = [[PromptSpec("text", "text", None, None, args.text)]]
        if args.event is not None:
            attribute, value = EVENT_TARGETS[args.event]

    system = build_system(run, args.checkpoint, text_corpus(run), trained=True)
    prompts = [p for g in groups for p in g]
    with torch.no_grad():
        probs = system.predict(sample.features[None], [prompts], [len(g) for g in groups]).probs[0]
    probs = probs[-1].double().numpy()
    truth = None
    if attribute is not None:
        if attribute in ("speaker_id", "face_id", "included_id", "excluded_id") and value not in sample.speaker_ids:
            track = np.zeros(sample.n_frames, dtype=np.uint8)
            truth = 1 - track if attribute == "excluded_id" else track
        else:
            truth = derive_event_track(sample, profiles, attribute, value).labels
    fr = run.world.frame_rate
    write_frames(FrameTrack(args.sample, np.arange(sample.n_frames) / fr, probs, truth), args.out_csv)
    segments = binarize_track(probs, run.metrics.threshold, run.metrics.median_window, fr, args.label)
    Path(args.out_rttm).write_text(format_rttm(segments, args.sample), encoding="utf-8")
    print(f"frames={sample.n_frames}\tsegments={len(segments)}")
    return 0


def merge_eval_tables(paths) -> list[dict]:
    """Rows of several eval CSVs keyed by (modality, attribute, split); duplicates are errors."""
    from .errors import FormatError

    seen: dict[tuple, str] = {}
    rows = []
    for path in paths:
        for row in read_eval_csv(path):
            key = (row["modality"], row["attribute"], row["split"])
            if key in seen:
                raise FormatError(f"duplicate key {key} in {seen[key]} and {path}")
            seen[key] = str(path)
            rows.append(row)
    return sorted(rows, key=lambda r: (r["modality"], r["attribute"], r["split"]))


def cmd_report(args) -> int:
    if not args.eval and not args.track:
        raise UsageError("report needs --eval CSVs and/or --track frame CSVs")
    if args.eval:
        if not args.out:
            raise UsageError("--eval needs --out")
        rows = merge_eval_tables(args.eval)
        lines = ["\t".join(EVAL_COLUMNS)] + ["\t".join(r[k] for k in EVAL_COLUMNS) for r in rows]
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"rows={len(rows)}")
    if args.track:
        if not args.plot:
            raise UsageError("--track needs --plot")
        tracks = [read_frames(p) for p in args.track]
        if args.frames_out:
            if len(tracks) != 1:
                raise UsageError("--frames-out takes exactly one --track")
            write_frames(tracks[0], args.frames_out)
        plot_tracks(tracks, args.plot)
        print(f"plotted={len(tracks)}")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmtsd", description="Prompt-driven target speech diarization on a synthetic world.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_, func):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration (INI); defaults apply when omitted")
        sp.set_defaults(func=func)
        return sp

    def metric_flags(sp):
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--median-window", dest="median_window", type=int)
        sp.add_argument("--collar", dest="collar_s", type=float)

    sp = command("synth", "generate the synthetic datasets", cmd_synth)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)

    sp = command("pretrain", "pretrain the speaker embedder and text base", cmd_pretrain)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = command("align", "train the voice-face aligner", cmd_align)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")

    sp = command("train", "multi-task prompt-driven training", cmd_train)
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="checkpoint from the align stage")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--verbose", action="store_true")

    sp = command("eval", "score a split", cmd_eval)
    sp.add_argument("--data", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="score an existing predictions file")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--save-predictions", dest="save_predictions")
    metric_flags(sp)

    sp = command("infer", "run one prompt on one sample", cmd_infer)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", required=True)
    sp.add_argument("--text")
    sp.add_argument("--enroll", help="<sample:speaker> to cut the enrollment from")
    sp.add_argument("--face", type=int, help="speaker id whose face is the prompt")
    sp.add_argument("--event", help="event key for the reference track of a text prompt")
    sp.add_argument("--label", default="target", help="speaker label in the RTTM")
    sp.add_argument("--out-csv", dest="out_csv", required=True)
    sp.add_argument("--out-rttm", dest="out_rttm", required=True)
    metric_flags(sp)

    sp = command("report", "merge eval tables and plot frame tracks", cmd_report)
    sp.add_argument("--eval", nargs="+", default=[])
    sp.add_argument("--out")
    sp.add_argument("--track", nargs="+", default=[])
    sp.add_argument("--frames-out", dest="frames_out")
    sp.add_argument("--plot")
    return p


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose from {', '.join(SUBCOMMANDS)}")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (MMTSDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


def main():
    # byte-identical checkpoints are only promised for single-threaded runs
    torch.set_num_threads(1)
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
