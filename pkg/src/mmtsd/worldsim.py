"""Synthetic multimodal world: speakers, conversations, event labels, augmentation.

Every speaker is a latent identity vector ``z``.  Voices and faces are both
linear images of ``z`` (plus a gender offset for the voice), so the two
modalities share identity factors the same way real faces and voices share
age or gender.  Conversations are turn-taking activity matrices rendered
into frame features by superposing the active speakers' voice signatures.

All randomness flows from ``numpy.random.default_rng`` seeded with
``[seed, stream, index]`` tuples, so any sample can be regenerated on its
own, in any order.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, SimulationError, SpeakerLookupError

# RNG stream identifiers
_WORLD_STREAM = 0
_SPEAKER_STREAM = 1
_SAMPLE_STREAM = 2
_NOISE_POOL_STREAM = 3
_FACE_STREAM = 4

ATTRIBUTES = (
    "gender",
    "counter",
    "keynote",
    "speaker_id",
    "face_id",
    "included_id",
    "excluded_id",
)
GENDERS = ("F", "M")
COUNTER_VALUES = ("non_speech", "single", "overlap")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    d_id: int = 16
    d_a: int = 32
    d_face: int = 64
    frame_rate: float = 25.0
    noise_std: float = 0.1
    face_noise: float = 0.05
    turn_mean_s: float = 2.0
    turn_sigma: float = 0.6
    pause_mean_s: float = 0.5
    # calibrated with calibrate_overlap_prob() to a 9.8% overlap ratio
    overlap_prob: float = 0.52
    overlap_mean_s: float = 0.4
    num_speakers: int = 2
    duration_s: float = 30.0
    gender_offset_std: float = 0.5

    def validate(self) -> "WorldConfig":
        for name in ("d_id", "d_a", "d_face", "num_speakers"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("frame_rate", "turn_mean_s", "turn_sigma", "pause_mean_s",
                     "overlap_mean_s", "duration_s"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ConfigurationError(f"overlap_prob must lie in [0, 1], got {self.overlap_prob}")
        if self.noise_std < 0 or self.face_noise < 0:
            raise ConfigurationError("noise levels must be non-negative")
        return self

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.frame_rate))

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: int
    z: np.ndarray
    gender: str
    voice_signature: np.ndarray
    face_params: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, SpeakerProfile):
            return NotImplemented
        return (
            self.speaker_id == other.speaker_id
            and self.gender == other.gender
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.voice_signature, other.voice_signature)
            and np.array_equal(self.face_params, other.face_params)
        )


@dataclass
class ConversationSample:
    sample_id: str
    features: np.ndarray  # (T, d_a) float32
    activity: np.ndarray  # (S, T) uint8
    speaker_ids: list[int]
    config_ref: str = ""
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class EventTrack:
    attribute: str
    value: object
    labels: np.ndarray  # (T,) uint8


@dataclass(frozen=True)
class AugmentConfig:
    p_noise: float = 0.0
    snr_db: tuple[float, float] = (5.0, 20.0)
    p_rir: float = 0.0
    rir_decay: tuple[float, float] = (0.1, 0.8)
    noise_pool: np.ndarray | None = field(default=None, compare=False)


def gender_of(z: np.ndarray) -> str:
    return "F" if z[0] >= 0 else "M"


@functools.lru_cache(maxsize=16)
def _world_matrices(config: WorldConfig):
    rng = np.random.default_rng([config.seed, _WORLD_STREAM])
    a_v = rng.normal(0.0, 1.0 / np.sqrt(config.d_id), size=(config.d_a, config.d_id))
    b = rng.normal(0.0, config.gender_offset_std, size=(2, config.d_a))
    a_f = rng.normal(0.0, 1.0 / np.sqrt(config.d_id), size=(config.d_face, config.d_id))
    for arr in (a_v, b, a_f):
        arr.setflags(write=False)
    return a_v, {"F": b[0], "M": b[1]}, a_f


def profile_from_latent(config: WorldConfig, speaker_id: int, z: np.ndarray) -> SpeakerProfile:
    a_v, offsets, a_f = _world_matrices(config)
    gender = gender_of(z)
    return SpeakerProfile(
        speaker_id=int(speaker_id),
        z=z,
        gender=gender,
        voice_signature=a_v @ z + offsets[gender],
        face_params=a_f @ z,
    )


def make_world(config: WorldConfig, n_speakers: int, first_id: int = 0) -> list[SpeakerProfile]:
    """Draw ``n_speakers`` profiles with ids ``first_id .. first_id + n - 1``.

    Each speaker's latent comes from its own RNG stream, so a profile does not
    depend on how many other speakers were requested.
    """
    config.validate()
    if n_speakers < 1:
        raise ConfigurationError(f"n_speakers must be >= 1, got {n_speakers}")
    profiles = []
    for sid in range(first_id, first_id + n_speakers):
        rng = np.random.default_rng([config.seed, _SPEAKER_STREAM, sid])
        z = rng.standard_normal(config.d_id)
        profiles.append(profile_from_latent(config, sid, z))
    return profiles


def make_noise_pool(config: WorldConfig, n: int = 64) -> np.ndarray:
    """Voice signatures of held-out "background" people, used for babble noise."""
    rng = np.random.default_rng([config.seed, _NOISE_POOL_STREAM])
    zs = rng.standard_normal((n, config.d_id))
    return np.stack([profile_from_latent(config, -1, z).voice_signature for z in zs])


def sample_rng(seed: int, index: int, stream: int = _SAMPLE_STREAM) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def _lognormal_mu(mean: float, sigma: float) -> float:
    return float(np.log(mean) - 0.5 * sigma**2)


def _draw_turns(config: WorldConfig, n_speakers: int, rng: np.random.Generator) -> np.ndarray:
    T = config.n_frames
    fr = config.frame_rate
    activity = np.zeros((n_speakers, T), dtype=np.uint8)
    mu = _lognormal_mu(config.turn_mean_s, config.turn_sigma)
    start = rng.exponential(config.pause_mean_s)
    speaker = int(rng.integers(n_speakers))
    while start < config.duration_s:
        length = rng.lognormal(mu, config.turn_sigma)
        end = start + length
        activity[speaker, int(round(start * fr)):min(T, int(round(end * fr)))] = 1
        if rng.random() < config.overlap_prob:
            next_start = end - min(rng.exponential(config.overlap_mean_s), length)
        else:
            next_start = end + rng.exponential(config.pause_mean_s)
        if n_speakers > 1:
            step = int(rng.integers(1, n_speakers))
            speaker = (speaker + step) % n_speakers
        start = next_start
    return activity


def simulate_turns(config: WorldConfig, speakers: Sequence, rng: np.random.Generator,
                   max_attempts: int = 100) -> np.ndarray:
    """Turn-taking activity matrix of shape (S, T), dtype uint8.

    Turn lengths are lognormal with mean ``turn_mean_s``; the next speaker is
    drawn uniformly among the others.  With probability ``overlap_prob`` the
    next turn starts an exponential amount of time before the current one
    ends (capped at the current turn length), otherwise after an exponential
    pause.
    """
    config.validate()
    if len(speakers) != config.num_speakers:
        raise ConfigurationError(
            f"expected {config.num_speakers} speakers, got {len(speakers)}")
    for _ in range(max_attempts):
        activity = _draw_turns(config, len(speakers), rng)
        if activity.any(axis=1).all():
            return activity
    raise SimulationError(
        f"could not give every speaker a turn in {max_attempts} attempts")


def render_speech_frames(activity: np.ndarray, speakers: Sequence[SpeakerProfile],
                         noise_std: float, rng: np.random.Generator) -> np.ndarray:
    activity = np.asarray(activity)
    if activity.ndim != 2 or activity.shape[0] != len(speakers):
        raise ConfigurationError(
            f"activity shape {activity.shape} does not match {len(speakers)} speakers")
    sigs = np.stack([s.voice_signature for s in speakers])
    clean = activity.T.astype(np.float64) @ sigs
    noise = rng.standard_normal(clean.shape) * noise_std if noise_std > 0 else 0.0
    return (clean + noise).astype(np.float32)


def render_enrollment(profile: SpeakerProfile, n_frames: int, noise_std: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Single-speaker frames of one profile, as cut from a clean solo region."""
    act = np.ones((1, n_frames), dtype=np.uint8)
    return render_speech_frames(act, [profile], noise_std, rng)


def render_face_observation(profile: SpeakerProfile, aug: bool, seed, face_noise: float = 0.05) -> np.ndarray:
    """A noisy view of a speaker's face parameters.

    ``aug`` adds the image-augmentation analogs: coordinate dropout (p=0.2)
    and a random-strength 3-tap blur.
    """
    rng = np.random.default_rng([_FACE_STREAM, profile.speaker_id & 0xFFFFFFFF,
                                 *np.atleast_1d(seed).tolist()])
    obs = profile.face_params + rng.standard_normal(profile.face_params.shape) * face_noise
    if aug:
        keep = rng.random(obs.shape) >= 0.2
        obs = obs * keep
        strength = rng.uniform(0.0, 0.5)
        blurred = np.convolve(np.pad(obs, 1, mode="edge"), np.ones(3) / 3.0, mode="valid")
        obs = (1.0 - strength) * obs + strength * blurred
    return obs


def simulate_conversation(config: WorldConfig, pool: Sequence[SpeakerProfile], index: int,
                          split: str = "train", speakers: Sequence[SpeakerProfile] | None = None,
                          ) -> ConversationSample:
    """Generate sample ``index`` from a speaker pool; reproducible in isolation."""
    rng = sample_rng(config.seed, index)
    if speakers is None:
        if len(pool) < config.num_speakers:
            raise ConfigurationError("speaker pool smaller than num_speakers")
        picks = rng.choice(len(pool), size=config.num_speakers, replace=False)
        speakers = [pool[int(i)] for i in sorted(picks)]
    activity = simulate_turns(config, speakers, rng)
    features = render_speech_frames(activity, speakers, config.noise_std, rng)
    return ConversationSample(
        sample_id=f"{split}_{index:06d}",
        features=features,
        activity=activity,
        speaker_ids=[s.speaker_id for s in speakers],
        config_ref=config.config_hash(),
        split=split,
    )


def overlap_ratio(activity: np.ndarray) -> tuple[int, int]:
    """(overlapped frames, speech frames) of an activity matrix."""
    counts = np.asarray(activity).sum(axis=0)
    return int((counts >= 2).sum()), int((counts >= 1).sum())


def empirical_overlap_ratio(config: WorldConfig, n_samples: int = 200, seed_offset: int = 0) -> float:
    ovl = speech = 0
    dummy = list(range(config.num_speakers))
    for i in range(n_samples):
        act = simulate_turns(config, dummy, sample_rng(config.seed, seed_offset + i))
        o, s = overlap_ratio(act)
        ovl += o
        speech += s
    return ovl / speech


def calibrate_overlap_prob(config: WorldConfig, target: float, n_samples: int = 200,
                           iters: int = 20) -> float:
    """Bisection on ``overlap_prob`` so the empirical overlap ratio hits ``target``."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        r = empirical_overlap_ratio(dataclasses.replace(config, overlap_prob=mid), n_samples)
        if r < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _profile_map(profiles) -> Mapping[int, SpeakerProfile]:
    if isinstance(profiles, Mapping):
        return profiles
    return {p.speaker_id: p for p in profiles}


def _row_of(sample: ConversationSample, speaker_id) -> np.ndarray:
    try:
        row = sample.speaker_ids.index(int(speaker_id))
    except (ValueError, TypeError):
        raise SpeakerLookupError(
            f"speaker {speaker_id!r} is not in sample {sample.sample_id}") from None
    return sample.activity[row].astype(np.uint8)


def derive_event_track(sample: ConversationSample, profiles, attribute: str, value=None) -> EventTrack:
    act = sample.activity.astype(np.int64)
    counts = act.sum(axis=0)
    if attribute == "gender":
        if value not in GENDERS:
            raise SpeakerLookupError(f"unknown gender value {value!r}")
        pmap = _profile_map(profiles)
        try:
            rows = [i for i, sid in enumerate(sample.speaker_ids) if pmap[sid].gender == value]
        except KeyError as exc:
            raise SpeakerLookupError(f"no profile for speaker {exc.args[0]}") from None
        labels = act[rows].any(axis=0) if rows else np.zeros(act.shape[1], dtype=bool)
    elif attribute == "counter":
        if value == "non_speech":
            labels = counts == 0
        elif value == "single":
            labels = counts == 1
        elif value == "overlap":
            labels = counts >= 2
        else:
            raise SpeakerLookupError(f"unknown counter value {value!r}")
    elif attribute == "keynote":
        totals = act.sum(axis=1)
        best = max(range(len(totals)), key=lambda i: (totals[i], -sample.speaker_ids[i]))
        labels = act[best] > 0
        value = sample.speaker_ids[best]
    elif attribute in ("speaker_id", "face_id", "included_id"):
        labels = _row_of(sample, value) > 0
    elif attribute == "excluded_id":
        labels = _row_of(sample, value) == 0
    else:
        raise SpeakerLookupError(f"unknown attribute {attribute!r}")
    return EventTrack(attribute, value, np.asarray(labels, dtype=np.uint8))


def augment_frames(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Additive noise at a random SNR and a random 3-tap causal channel filter."""
    x = np.asarray(features, dtype=np.float64)
    out = x
    if cfg.p_noise > 0 and rng.random() < cfg.p_noise:
        if cfg.noise_pool is not None and len(cfg.noise_pool) > 0:
            pool = cfg.noise_pool - cfg.noise_pool.mean(axis=0)
            idx = rng.integers(len(pool), size=(x.shape[0], 3))
            noise = pool[idx].sum(axis=1)
        else:
            noise = rng.standard_normal(x.shape)
        snr = rng.uniform(*cfg.snr_db)
        sig_power = float(np.mean(x**2))
        noise_power = float(np.mean(noise**2))
        if sig_power > 0 and noise_power > 0:
            out = out + noise * np.sqrt(sig_power * 10 ** (-snr / 10) / noise_power)
    if cfg.p_rir > 0 and rng.random() < cfg.p_rir:
        a = rng.uniform(*cfg.rir_decay)
        out = apply_channel_filter(out, np.array([1.0, a, a * a]))
    return out.astype(np.asarray(features).dtype, copy=False)


def apply_channel_filter(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal per-channel convolution along time with an L1-normalised kernel."""
    k = np.asarray(kernel, dtype=np.float64)
    k = k / np.abs(k).sum()
    out = k[0] * x
    for lag in range(1, len(k)):
        if k[lag] != 0:
            out[lag:] += k[lag] * x[:-lag]
    return out
