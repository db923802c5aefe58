"""End-to-end stages over files: synthesize, pretrain, align, train, evaluate.

Speaker pools: ids ``0 .. n_pretrain_speakers-1`` form the pretraining pool
(speaker embedder and aligner); its first ``n_train_speakers`` speak in the
training conversations.  Unseen test speakers take the ids after the pool.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, format_run_config, load_run_config
from .errors import ConfigurationError, DatasetError
from .evaluation import predict_records, score_records
from .io import load_dataset, save_dataset
from .promptenc.corpus import TextPromptCorpus, build_text_corpus, load_templates
from .promptenc.face import FaceEncoder, VoiceFaceAligner
from .promptenc.speaker import SpeakerEmbedder
from .promptenc.text import TextPromptEncoder
from .system import MMTSDSystem, has_component, load_modules, save_modules
from .training import (format_log, pretrain_speaker_embedder, pretrain_text_base, train_aligner_stage,
                       train_mm_tsd)
from .tsdmodel import TSDModel
from .worldsim import (AugmentConfig, WorldConfig, make_noise_pool, make_world, sample_rng,
                       simulate_conversation)

SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000, "test_seen": 3_000_000,
                 "test_same_gender": 4_000_000}
CONFIG_FILE = "run.cfg"


@dataclass
class SpeakerPools:
    pretrain: list
    train: list
    test: list

    def profiles(self) -> dict:
        return {p.speaker_id: p for p in self.pretrain + self.test}


def speaker_pools(run: RunConfig) -> SpeakerPools:
    pre = make_world(run.world, run.data.n_pretrain_speakers)
    test = make_world(run.world, run.data.n_test_speakers, first_id=run.data.n_pretrain_speakers)
    return SpeakerPools(pre, pre[: run.data.n_train_speakers], test)


def _same_gender_pair(pool, rng, k: int):
    first = pool[rng.integers(len(pool))]
    rest = [p for p in pool if p.gender == first.gender and p is not first]
    if len(rest) < k - 1:
        raise ConfigurationError("test pool has too few speakers of one gender")
    picks = rng.choice(len(rest), size=k - 1, replace=False)
    return sorted([first] + [rest[int(i)] for i in picks], key=lambda p: p.speaker_id)


def synthesize(run: RunConfig, pools: SpeakerPools | None = None) -> dict[str, list]:
    pools = pools or speaker_pools(run)
    d = run.data
    plan = {"train": (pools.train, d.n_train), "val": (pools.train, d.n_val),
            "test": (pools.test, d.n_test), "test_seen": (pools.train, d.n_test_seen)}
    splits = {}
    for split, (pool, n) in plan.items():
        off = SPLIT_OFFSETS[split]
        splits[split] = [simulate_conversation(run.world, pool, off + i, split) for i in range(n)]
    off = SPLIT_OFFSETS["test_same_gender"]
    same = []
    for i in range(d.n_test_same_gender):
        rng = sample_rng(run.world.seed, off + i, stream=5)
        speakers = _same_gender_pair(pools.test, rng, run.world.num_speakers)
        same.append(simulate_conversation(run.world, pools.test, off + i, "test_same_gender", speakers))
    splits["test_same_gender"] = same
    return splits


def synth_to_dir(run: RunConfig, directory) -> dict[str, list]:
    pools = speaker_pools(run)
    splits = synthesize(run, pools)
    speakers = ["speaker_id\tgender\tpool"]
    speakers += [f"{p.speaker_id}\t{p.gender}\t{'train' if i < run.data.n_train_speakers else 'pretrain'}"
                 for i, p in enumerate(pools.pretrain)]
    speakers += [f"{p.speaker_id}\t{p.gender}\ttest" for p in pools.test]
    samples = [s for split in splits.values() for s in split]
    save_dataset(samples, directory, run.world.frame_rate, {
        CONFIG_FILE: format_run_config(run, ("world", "data")),
        "speakers.tsv": "\n".join(speakers) + "\n",
    })
    return splits


def load_data_dir(directory, splits=None):
    """(world-and-data run config, samples by split) of a synthesized dataset."""
    run = load_run_config(Path(directory) / CONFIG_FILE)
    _, samples = load_dataset(directory, splits)
    by_split: dict[str, list] = {}
    for s in samples:
        by_split.setdefault(s.split, []).append(s)
    return run, by_split


def text_corpus(run: RunConfig) -> TextPromptCorpus:
    return build_text_corpus(load_templates(), seed=run.world.seed)


def augment_config(run: RunConfig) -> AugmentConfig | None:
    a = run.augment
    if a.p_noise <= 0 and a.p_rir <= 0:
        return None
    return AugmentConfig(a.p_noise, (a.snr_low_db, a.snr_high_db), a.p_rir,
                         (a.rir_decay_low, a.rir_decay_high), make_noise_pool(run.world))


# --------------------------------------------------------------------------- stages

def _write_log(path, rows):
    if path is not None:
        Path(path).write_text(format_log(rows), encoding="utf-8")


def run_pretrain(run: RunConfig, out_ckpt, log_path=None) -> dict:
    pools = speaker_pools(run)
    log = []
    embedder, spk_acc = pretrain_speaker_embedder(pools.pretrain, run.world, run.pretrain_speaker,
                                                  run.model.d_model, log=log)
    text, txt_acc = pretrain_text_base(text_corpus(run), run.text, run.pretrain_text, log=log)
    save_modules(out_ckpt, {"text": text, "speaker": embedder}, run.model)
    _write_log(log_path, log)
    return {"speaker_accuracy": spk_acc, "text_accuracy": txt_acc}


def _pretrained(run: RunConfig, ckpt, corpus):
    text = TextPromptEncoder(corpus.vocabulary, run.text)
    embedder = SpeakerEmbedder(run.world.d_a, out_dim=run.model.d_model)
    load_modules(ckpt, {"text": text, "speaker": embedder})
    embedder.requires_grad_(False).eval()
    text.freeze_base()
    return text, embedder


def run_align(run: RunConfig, in_ckpt, out_ckpt, log_path=None):
    corpus = text_corpus(run)
    text, embedder = _pretrained(run, in_ckpt, corpus)
    face = FaceEncoder(run.world.d_face, seed=run.world.seed)
    log = []
    aligner, history = train_aligner_stage(speaker_pools(run).pretrain, run.world, embedder, face,
                                           run.aligner, run.data.aligner_views_per_speaker, log)
    save_modules(out_ckpt, {"text": text, "speaker": embedder, "face": face, "aligner": aligner},
                 run.model)
    _write_log(log_path, log)
    return aligner, history


def build_system(run: RunConfig, ckpt, corpus: TextPromptCorpus, trained: bool) -> MMTSDSystem:
    """Assemble a system from an aligner-stage checkpoint (``trained=False``) or a trained one."""
    torch.manual_seed(run.train.seed)
    text = TextPromptEncoder(corpus.vocabulary, run.text)
    embedder = SpeakerEmbedder(run.world.d_a, out_dim=run.model.d_model)
    face = FaceEncoder(run.world.d_face, seed=run.world.seed)
    aligner = VoiceFaceAligner(face.weight.shape[0], run.model.d_model)
    tsd = TSDModel(run.model)
    if trained:
        if run.mmtsd.use_lora:
            text.attach_lora()
        system = MMTSDSystem(tsd, text, embedder, face, aligner, run.mmtsd.face_route)
        if run.mmtsd.face_route == "linear" and not has_component(ckpt, "face_proj"):
            raise ConfigurationError(f"{ckpt}: no face projection; was it trained with face_route=aligner?")
        load_modules(ckpt, {"tsd": tsd, "text": text, "speaker": embedder, "face": face,
                            "aligner": aligner, "face_proj": system.face_proj})
    else:
        load_modules(ckpt, {"text": text, "speaker": embedder, "face": face, "aligner": aligner})
        text.freeze_base()
        if run.mmtsd.use_lora:
            text.attach_lora()
        system = MMTSDSystem(tsd, text, embedder, face, aligner, run.mmtsd.face_route)
    return system.freeze()


def system_modules(system: MMTSDSystem) -> dict:
    return {"tsd": system.tsd, "text": system.text, "speaker": system.speaker, "face": system.face,
            "aligner": system.aligner, "face_proj": system.face_proj}


def run_train(run: RunConfig, splits: dict, in_ckpt, out_ckpt, log_path=None, progress=None):
    if "train" not in splits or "val" not in splits:
        raise DatasetError("dataset needs train and val splits")
    corpus = text_corpus(run)
    system = build_system(run, in_ckpt, corpus, trained=False)
    profiles = speaker_pools(run).profiles()
    result = train_mm_tsd(system, splits["train"], splits["val"], profiles, corpus, run.world,
                          run.train, run.mmtsd, augment_config(run), progress)
    save_modules(out_ckpt, system_modules(system), run.model)
    _write_log(log_path, result.log)
    return result


def run_eval(run: RunConfig, system: MMTSDSystem, samples, split: str):
    corpus = text_corpus(run)
    profiles = speaker_pools(run).profiles()
    records = predict_records(system, samples, profiles, corpus, run.world, run.train.seed,
                              run.mmtsd.enrollment)
    return records, score_records(records, samples, split, run.metrics, run.world.frame_rate)
