"""Assembly of the per-utterance prompt lists fed to the decoder, and their label tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, SpeakerLookupError
from .promptenc.corpus import EVENT_TARGETS, TEXT_ONLY_EVENTS, TextPromptCorpus
from .worldsim import (AugmentConfig, ConversationSample, WorldConfig, augment_frames,
                       derive_event_track, render_enrollment, render_face_observation)

# attribute scored for each single-modality prompt source
SOURCE_ATTRIBUTE = {"audio": "speaker_id", "face": "face_id"}


@dataclass
class PromptSpec:
    """One decoder query.

    ``source`` picks the encoder (text, audio or face) and ``payload`` is its
    input.  ``modality`` is the prompt scenario the prediction is reported
    under; the audio half of an audio-text pair has ``scored=False``.
    """

    source: str
    modality: str
    attribute: str | None
    value: object
    payload: object
    scored: bool = True


@dataclass(frozen=True)
class EnrollmentSpec:
    min_frames: int = 50
    max_frames: int = 150


def flatten(groups) -> tuple[list[PromptSpec], list[int]]:
    prompts = [p for g in groups for p in g]
    return prompts, [len(g) for g in groups]


def text_prompt(event: str, text: str) -> PromptSpec:
    attribute, value = EVENT_TARGETS[event]
    return PromptSpec("text", "text", attribute, value, text)


def audio_text_pair(event: str, text: str, speaker_id: int, enrollment) -> list[PromptSpec]:
    attribute, _ = EVENT_TARGETS[event]
    return [PromptSpec("audio", "audio_text", None, speaker_id, enrollment, scored=False),
            PromptSpec("text", "audio_text", attribute, speaker_id, text)]


def _profiles_of(sample: ConversationSample, profiles):
    try:
        return [profiles[sid] for sid in sample.speaker_ids]
    except KeyError as exc:
        raise DatasetError(f"{sample.sample_id}: no profile for speaker {exc.args[0]}") from None


def _enroll(profile, world: WorldConfig, spec: EnrollmentSpec, rng, augment: AugmentConfig | None):
    n = int(rng.integers(spec.min_frames, spec.max_frames + 1))
    seg = render_enrollment(profile, n, world.noise_std, rng)
    if augment is not None:
        seg = augment_frames(seg, augment, rng)
    return seg


def training_prompts(sample: ConversationSample, profiles, corpus: TextPromptCorpus,
                     world: WorldConfig, rng: np.random.Generator,
                     enroll: EnrollmentSpec = EnrollmentSpec(),
                     augment: AugmentConfig | None = None, split: str = "train"):
    """Every event once: six text events, an audio and a face prompt per speaker,
    and one audio-text pair whose include/exclude command is a fair coin."""
    speakers = _profiles_of(sample, profiles)
    groups = []
    for event in TEXT_ONLY_EVENTS:
        texts = corpus.texts(event, split)
        groups.append([text_prompt(event, texts[rng.integers(len(texts))])])
    for p in speakers:
        groups.append([PromptSpec("audio", "audio", "speaker_id", p.speaker_id,
                                  _enroll(p, world, enroll, rng, augment))])
    for p in speakers:
        obs = render_face_observation(p, aug=True, seed=rng.integers(2**31), face_noise=world.face_noise)
        groups.append([PromptSpec("face", "face", "face_id", p.speaker_id, obs)])
    target = speakers[rng.integers(len(speakers))]
    event = "include_enrolled" if rng.random() < 0.5 else "exclude_enrolled"
    texts = corpus.texts(event, split)
    groups.append(audio_text_pair(event, texts[rng.integers(len(texts))], target.speaker_id,
                                  _enroll(target, world, enroll, rng, augment)))
    return groups


def evaluation_prompts(sample: ConversationSample, profiles, corpus: TextPromptCorpus,
                       world: WorldConfig, rng: np.random.Generator,
                       enroll: EnrollmentSpec = EnrollmentSpec(), split: str = "test"):
    """All ``split`` paraphrases of each text event, plus per speaker one audio prompt,
    one clean face prompt, and an include and an exclude pair sharing one enrollment."""
    speakers = _profiles_of(sample, profiles)
    groups = [[text_prompt(event, t)] for event in TEXT_ONLY_EVENTS for t in corpus.texts(event, split)]
    include = corpus.texts("include_enrolled", split)
    exclude = corpus.texts("exclude_enrolled", split)
    for p in speakers:
        seg = _enroll(p, world, enroll, rng, None)
        groups.append([PromptSpec("audio", "audio", "speaker_id", p.speaker_id, seg)])
        obs = render_face_observation(p, aug=False, seed=rng.integers(2**31), face_noise=world.face_noise)
        groups.append([PromptSpec("face", "face", "face_id", p.speaker_id, obs)])
        groups.append(audio_text_pair("include_enrolled", include[rng.integers(len(include))],
                                      p.speaker_id, seg))
        groups.append(audio_text_pair("exclude_enrolled", exclude[rng.integers(len(exclude))],
                                      p.speaker_id, seg))
    return groups


def prompt_labels(sample: ConversationSample, profiles, prompts) -> tuple[list[int], np.ndarray]:
    """Indices of the scored prompts and their (n_scored, T) label tracks."""
    idx, rows = [], []
    for i, p in enumerate(prompts):
        if not p.scored:
            continue
        try:
            track = derive_event_track(sample, profiles, p.attribute, p.value)
        except SpeakerLookupError as exc:
            raise DatasetError(f"{sample.sample_id}: {exc}") from None
        idx.append(i)
        rows.append(track.labels)
    return idx, np.stack(rows)
