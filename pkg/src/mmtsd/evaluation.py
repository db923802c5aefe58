"""Scoring a trained system: per-(modality, attribute) detection metrics, diarizer DER,
the exclusion-complement agreement, and cross-modal verification."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, UndefinedMetricError
from .metrics import (activity_to_segmentation, average_precision, binarize_track, binarized_frames,
                      der, eer, frame_accuracy, roc_auc)
from .prompts import EnrollmentSpec, evaluation_prompts, flatten, prompt_labels
from .promptenc.face import FaceEncoder, VoiceFaceAligner
from .promptenc.speaker import SpeakerEmbedder
from .worldsim import ConversationSample, WorldConfig, render_enrollment, render_face_observation

EVAL_COLUMNS = ("modality", "attribute", "split", "n_frames", "ap", "auc", "eer", "acc", "der")


@dataclass(frozen=True)
class MetricConfig:
    threshold: float = 0.5
    median_window: int = 11
    collar_s: float = 0.0


@dataclass
class TrackRecord:
    sample_id: str
    modality: str
    attribute: str
    value: object
    probs: np.ndarray
    labels: np.ndarray | None = None


def predict_records(system, samples, profiles, corpus, world: WorldConfig, seed: int = 0,
                    enroll: EnrollmentSpec = EnrollmentSpec(), split: str = "test") -> list[TrackRecord]:
    """Run the evaluation prompt set on every sample; one record per scored prompt."""
    system.eval()
    records = []
    with torch.no_grad():
        for k, s in enumerate(samples):
            rng = np.random.default_rng([seed, 21, k])
            groups = evaluation_prompts(s, profiles, corpus, world, rng, enroll, split)
            prompts, sizes = flatten(groups)
            idx, labels = prompt_labels(s, profiles, prompts)
            probs = system.predict(s.features[None], [prompts], sizes).probs[0].double().numpy()
            for row, i in enumerate(idx):
                p = prompts[i]
                records.append(TrackRecord(s.sample_id, p.modality, p.attribute, p.value,
                                           probs[i], labels[row]))
    return records


def attach_labels(records, samples, profiles):
    """Fill in reference tracks for records read from a predictions file."""
    from .worldsim import derive_event_track

    by_id = {s.sample_id: s for s in samples}
    for r in records:
        s = by_id.get(r.sample_id)
        if s is None:
            raise FormatError(f"prediction for unknown sample {r.sample_id!r}")
        r.labels = derive_event_track(s, profiles, r.attribute, r.value).labels
        if len(r.labels) != len(r.probs):
            raise FormatError(f"{r.sample_id}: {len(r.probs)} probabilities for {len(r.labels)} frames")
    return records


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return math.nan


def pooled(records, modality: str, attribute: str, sample_ids=None):
    chosen = [r for r in records if r.modality == modality and r.attribute == attribute
              and (sample_ids is None or r.sample_id in sample_ids)]
    if not chosen:
        return np.empty(0), np.empty(0, dtype=np.uint8)
    return (np.concatenate([r.probs for r in chosen]),
            np.concatenate([r.labels for r in chosen]).astype(np.uint8))


def diarizer_der(records, samples, metric: MetricConfig, frame_rate: float) -> float:
    """Corpus DER with one audio prompt per speaker, each track binarized on its own."""
    by_sample = defaultdict(list)
    for r in records:
        if r.modality == "audio" and r.attribute == "speaker_id":
            by_sample[r.sample_id].append(r)
    errors = total = 0
    for s in samples:
        recs = by_sample.get(s.sample_id)
        if not recs:
            continue
        ref = activity_to_segmentation(s.activity, s.speaker_ids, frame_rate)
        hyp = [seg for r in recs for seg in binarize_track(
            r.probs, metric.threshold, metric.median_window, frame_rate, f"hyp{r.value}")]
        try:
            _, d = der(ref, hyp, frame_rate, metric.collar_s, details=True)
        except UndefinedMetricError:
            continue
        errors += d["miss"] + d["false_alarm"] + d["confusion"]
        total += d["total"]
    return errors / total if total else math.nan


def score_records(records, samples, split: str, metric: MetricConfig = MetricConfig(),
                  frame_rate: float = 25.0) -> list[dict]:
    keys = sorted({(r.modality, r.attribute) for r in records})
    rows = []
    for modality, attribute in keys:
        s, y = pooled(records, modality, attribute)
        rows.append({
            "modality": modality, "attribute": attribute, "split": split, "n_frames": len(s),
            "ap": _safe(average_precision, s, y), "auc": _safe(roc_auc, s, y),
            "eer": _safe(eer, s, y), "acc": _safe(frame_accuracy, s, y, metric.threshold),
            "der": math.nan,
        })
    d = diarizer_der(records, samples, metric, frame_rate)
    if not math.isnan(d):
        rows.append({"modality": "audio", "attribute": "diarization", "split": split,
                     "n_frames": sum(s.n_frames for s in samples), "ap": math.nan, "auc": math.nan,
                     "eer": math.nan, "acc": math.nan, "der": d})
    return rows


def not_gate_agreement(records, metric: MetricConfig = MetricConfig()) -> dict[str, float]:
    """Per sample, the fraction of frames where the binarized exclude track is the
    complement of the binarized include track for the same enrolled speaker."""
    inc, exc = {}, {}
    for r in records:
        if r.modality != "audio_text":
            continue
        target = inc if r.attribute == "included_id" else exc
        target[(r.sample_id, r.value)] = r.probs
    agree = defaultdict(lambda: [0, 0])
    for key, p_inc in inc.items():
        if key not in exc:
            continue
        b_inc = binarized_frames(p_inc, metric.threshold, metric.median_window)
        b_exc = binarized_frames(exc[key], metric.threshold, metric.median_window)
        acc = agree[key[0]]
        acc[0] += int(np.sum(b_exc == 1 - b_inc))
        acc[1] += len(b_inc)
    return {sid: a / n for sid, (a, n) in agree.items()}


def gender_pair(sample: ConversationSample, profiles) -> str:
    return "-".join(sorted(profiles[sid].gender for sid in sample.speaker_ids))


def verification_auc(profiles, world: WorldConfig, embedder: SpeakerEmbedder, face: FaceEncoder,
                     aligner: VoiceFaceAligner, seed: int = 0, enroll_frames: int = 100) -> float:
    """AUC of voice-vs-aligned-face cosine scores over all identity pairs."""
    rng = np.random.default_rng([seed, 31])
    segs = [render_enrollment(p, enroll_frames, world.noise_std, rng) for p in profiles]
    obs = np.stack([render_face_observation(p, aug=False, seed=rng.integers(2**31),
                                            face_noise=world.face_noise) for p in profiles])
    with torch.no_grad():
        v = embedder.embed(segs).double()
        f = aligner(face(obs).float()).double()
    v = v / v.norm(dim=1, keepdim=True)
    f = f / f.norm(dim=1, keepdim=True)
    scores = (v @ f.T).numpy()
    labels = np.eye(len(profiles), dtype=np.uint8)
    return roc_auc(scores.ravel(), labels.ravel())


# --------------------------------------------------------------------------- files

def write_eval_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in EVAL_COLUMNS})


def read_eval_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != EVAL_COLUMNS:
            raise FormatError(f"{path}: header {reader.fieldnames} does not match {list(EVAL_COLUMNS)}")
        return list(reader)


PRED_COLUMNS = ("sample_id", "modality", "attribute", "value", "probs")


def _format_value(v) -> str:
    return "" if v is None else str(v)


def _parse_value(attribute: str, text: str):
    if text == "":
        return None
    if attribute in ("speaker_id", "face_id", "included_id", "excluded_id", "keynote"):
        return int(text)
    return text


def write_predictions(records, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(PRED_COLUMNS) + "\n")
        for r in records:
            probs = " ".join(f"{p:.9g}" for p in r.probs)  # float32 round-trips at 9 digits
            f.write(f"{r.sample_id}\t{r.modality}\t{r.attribute}\t{_format_value(r.value)}\t{probs}\n")


def read_predictions(path) -> list[TrackRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != PRED_COLUMNS:
        raise FormatError(f"{path}: bad predictions header")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(PRED_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(PRED_COLUMNS)} fields")
        try:
            probs = np.array([float(x) for x in parts[4].split()])
            value = _parse_value(parts[2], parts[3])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed value or probabilities") from None
        records.append(TrackRecord(parts[0], parts[1], parts[2], value, probs))
    return records
