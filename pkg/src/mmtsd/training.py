"""Training stages: stand-in encoder pretraining, the aligner stage, and the multi-task prompt-driven stage."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DatasetError
from .promptenc.corpus import EVENT_KEYS, TextPromptCorpus
from .promptenc.face import AlignerHyper, FaceEncoder, VoiceFaceAligner, train_aligner
from .promptenc.speaker import MIN_ENROLL_FRAMES, SpeakerEmbedder, stats_pool
from .promptenc.text import TextConfig, TextPromptEncoder, event_classifier_head
from .prompts import EnrollmentSpec, flatten, prompt_labels, training_prompts
from .system import MMTSDSystem
from .tsdmodel import bce_loss, bce_with_logits
from .worldsim import (AugmentConfig, WorldConfig, augment_frames, render_enrollment,
                       render_face_observation)

STAGES = ("pretrain_text", "pretrain_speaker", "aligner", "mmtsd")
MIN_PRETRAIN_SPEAKERS = 50


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.95
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    stage: str = "mmtsd"
    # 0 means one pass over the data per epoch
    steps_per_epoch: int = 0
    grad_clip: float = 0.0

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ConfigurationError("epochs, batch_size and steps_per_epoch must be non-negative")
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        return self


STAGE_DEFAULTS = {
    "pretrain_speaker": TrainConfig(lr0=1e-3, decay=0.9, epochs=15, batch_size=128,
                                    stage="pretrain_speaker", steps_per_epoch=60),
    "pretrain_text": TrainConfig(lr0=1e-3, decay=0.97, epochs=60, batch_size=32, stage="pretrain_text"),
    "aligner": TrainConfig(lr0=1e-3, decay=0.95, epochs=40, batch_size=128, stage="aligner"),
    "mmtsd": TrainConfig(),
}


@dataclass(frozen=True)
class MMTSDOptions:
    use_lora: bool = True
    face_route: str = "aligner"
    enroll_min_frames: int = 50
    enroll_max_frames: int = 150

    @property
    def enrollment(self) -> EnrollmentSpec:
        return EnrollmentSpec(self.enroll_min_frames, self.enroll_max_frames)


@dataclass
class LogRow:
    epoch: int
    stage: str
    split: str
    loss: float
    lr: float


def lr_schedule(lr0: float, decay: float, epoch: int) -> float:
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return lr0 * decay**epoch


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def _adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


# --------------------------------------------------------------------------- speaker embedder

def _solo_segments(sigs: np.ndarray, idx: np.ndarray, n_frames: int, noise_std: float,
                   rng: np.random.Generator, augment: AugmentConfig | None) -> torch.Tensor:
    x = sigs[idx][:, None, :] + rng.standard_normal((len(idx), n_frames, sigs.shape[1])) * noise_std
    if augment is not None:
        x = np.stack([augment_frames(seg, augment, rng) for seg in x])
    return torch.as_tensor(x, dtype=torch.float32)


def speaker_accuracy(embedder: SpeakerEmbedder, classifier: nn.Module, profiles, world: WorldConfig,
                     seed: int, per_speaker: int = 4, n_frames: int = 50) -> float:
    """Identity classification accuracy on freshly drawn solo segments."""
    rng = np.random.default_rng([seed, 12])
    sigs = np.stack([p.voice_signature for p in profiles])
    labels = np.repeat(np.arange(len(profiles)), per_speaker)
    x = _solo_segments(sigs, labels, n_frames, world.noise_std, rng, None)
    with torch.no_grad():
        pred = classifier(embedder(stats_pool(x))).argmax(dim=1).numpy()
    return float(np.mean(pred == labels))


def pretrain_speaker_embedder(profiles, world: WorldConfig, cfg: TrainConfig = STAGE_DEFAULTS["pretrain_speaker"],
                              out_dim: int = 192, augment: AugmentConfig | None = None,
                              log: list | None = None):
    """Identity classification over single-speaker segments; returns ``(embedder, accuracy)``.

    The classification layer is discarded and the embedder comes back frozen.
    """
    cfg.validate()
    n = len(profiles)
    if n < MIN_PRETRAIN_SPEAKERS:
        raise ConfigurationError(
            f"speaker pretraining needs at least {MIN_PRETRAIN_SPEAKERS} speakers, got {n}")
    torch.manual_seed(cfg.seed)
    embedder = SpeakerEmbedder(world.d_a, out_dim=out_dim)
    classifier = nn.Linear(out_dim, n)
    opt = _adam(list(embedder.parameters()) + list(classifier.parameters()), cfg.lr0)
    rng = np.random.default_rng([cfg.seed, 11])
    sigs = np.stack([p.voice_signature for p in profiles])
    steps = cfg.steps_per_epoch or math.ceil(4 * n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr0, cfg.decay, epoch)
        _set_lr(opt, lr)
        total = 0.0
        for _ in range(steps):
            idx = rng.integers(n, size=cfg.batch_size)
            L = int(rng.integers(MIN_ENROLL_FRAMES, 151))
            x = _solo_segments(sigs, idx, L, world.noise_std, rng, augment)
            loss = F.cross_entropy(classifier(embedder(stats_pool(x))), torch.as_tensor(idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        if log is not None:
            log.append(LogRow(epoch, cfg.stage, "train", total / steps, lr))
    embedder.eval()
    accuracy = speaker_accuracy(embedder, classifier, profiles, world, cfg.seed)
    embedder.requires_grad_(False)
    return embedder, accuracy


# --------------------------------------------------------------------------- text base

def text_accuracy(encoder: TextPromptEncoder, classifier: nn.Module, corpus: TextPromptCorpus,
                  split: str) -> float:
    texts, labels = _labelled_texts(corpus, split)
    was = encoder.training
    encoder.eval()
    with torch.no_grad():
        pred = classifier(encoder(texts)).argmax(dim=1)
    encoder.train(was)
    return float((pred == labels).float().mean())


def _labelled_texts(corpus: TextPromptCorpus, split: str):
    texts, labels = [], []
    for k, event in enumerate(EVENT_KEYS):
        for t in corpus.texts(event, split):
            texts.append(t)
            labels.append(k)
    return texts, torch.tensor(labels)


def pretrain_text_base(corpus: TextPromptCorpus, text_cfg: TextConfig = TextConfig(),
                       cfg: TrainConfig = STAGE_DEFAULTS["pretrain_text"], log: list | None = None):
    """Event classification of train-split commands; returns ``(encoder, val accuracy)``.

    The encoder's training-mode token noise pushes the classifier towards the
    event words instead of the sentence frames the events share.  The base
    is frozen on return; the projection head stays trainable for the
    multi-task stage.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    encoder = TextPromptEncoder(corpus.vocabulary, text_cfg)
    classifier = event_classifier_head(text_cfg)
    texts, labels = _labelled_texts(corpus, "train")
    opt = _adam(list(encoder.parameters()) + list(classifier.parameters()), cfg.lr0)
    gen = torch.Generator().manual_seed(cfg.seed)
    encoder.train()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr0, cfg.decay, epoch)
        _set_lr(opt, lr)
        order = torch.randperm(len(texts), generator=gen)
        total = 0.0
        for start in range(0, len(texts), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = classifier(encoder([texts[i] for i in idx], gen))
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log.append(LogRow(epoch, cfg.stage, "train", total / len(texts), lr))
    accuracy = text_accuracy(encoder, classifier, corpus, "val")
    encoder.freeze_base()
    return encoder, accuracy


# --------------------------------------------------------------------------- aligner

def voice_face_pairs(profiles, world: WorldConfig, embedder: SpeakerEmbedder, face: FaceEncoder,
                     per_speaker: int, seed: int, aug: bool = True,
                     enroll: EnrollmentSpec = EnrollmentSpec()):
    """(voice embeddings, raw face embeddings) for ``per_speaker`` views of each profile."""
    rng = np.random.default_rng([seed, 13])
    segs, obs = [], []
    for p in profiles:
        for _ in range(per_speaker):
            n = int(rng.integers(enroll.min_frames, enroll.max_frames + 1))
            segs.append(render_enrollment(p, n, world.noise_std, rng))
            obs.append(render_face_observation(p, aug=aug, seed=rng.integers(2**31),
                                               face_noise=world.face_noise))
    with torch.no_grad():
        voice = torch.cat([embedder.embed(segs[i:i + 512]) for i in range(0, len(segs), 512)])
        raw = face(np.stack(obs))
    return voice.float(), raw.float()


def train_aligner_stage(profiles, world: WorldConfig, embedder: SpeakerEmbedder, face: FaceEncoder,
                        cfg: TrainConfig = STAGE_DEFAULTS["aligner"], per_speaker: int = 8,
                        log: list | None = None):
    """Fit the voice-face aligner on the pretraining pool; returns the frozen aligner."""
    cfg.validate()
    pairs = voice_face_pairs(profiles, world, embedder, face, per_speaker, cfg.seed)
    hyper = AlignerHyper(epochs=cfg.epochs, lr=cfg.lr0, batch_size=cfg.batch_size, seed=cfg.seed,
                         d_out=pairs[0].shape[1])
    aligner, history = train_aligner(pairs, hyper)
    if log is not None:
        for epoch, (tr, va) in enumerate(zip(history.train_loss, history.val_loss)):
            log.append(LogRow(epoch, cfg.stage, "train", tr, cfg.lr0))
            log.append(LogRow(epoch, cfg.stage, "val", va, cfg.lr0))
    aligner.requires_grad_(False)
    return aligner, history


# --------------------------------------------------------------------------- multi-task stage

@dataclass
class PreparedBatch:
    features: np.ndarray  # (B, T, d_a)
    prompts: list  # B lists of PromptSpec
    groups: list[int]
    scored: list[int]
    labels: torch.Tensor  # (B, n_scored, T)


def prepare_batch(samples, groups_per_sample, profiles, features=None) -> PreparedBatch:
    flat = [flatten(g) for g in groups_per_sample]
    layout = flat[0][1]
    if any(sizes != layout for _, sizes in flat):
        raise DatasetError("utterances in a batch must share one prompt layout")
    if len({s.n_frames for s in samples}) != 1:
        raise DatasetError("utterances in a batch must have equal length")
    scored, labels = None, []
    for s, (prompts, _) in zip(samples, flat):
        idx, lab = prompt_labels(s, profiles, prompts)
        scored = idx
        labels.append(lab)
    feats = np.stack([s.features for s in samples]) if features is None else np.stack(features)
    return PreparedBatch(feats, [p for p, _ in flat], layout, scored,
                         torch.as_tensor(np.stack(labels), dtype=torch.float32))


def batch_logits(system: MMTSDSystem, batch: PreparedBatch):
    pred = system.predict(batch.features, batch.prompts, batch.groups)
    return pred.logits[:, batch.scored], pred.probs[:, batch.scored]


def train_step(system: MMTSDSystem, opt: torch.optim.Optimizer, batch: PreparedBatch,
               grad_clip: float = 0.0) -> float:
    logits, _ = batch_logits(system, batch)
    loss = bce_with_logits(logits, batch.labels.to(logits.dtype))
    opt.zero_grad()
    loss.backward()
    if grad_clip > 0:
        nn.utils.clip_grad_norm_(system.trainable_parameters(), grad_clip)
    opt.step()
    return loss.item()


def batch_loss(system: MMTSDSystem, batch: PreparedBatch) -> float:
    """Clamped-probability BCE of a batch, without gradients."""
    with torch.no_grad():
        _, probs = batch_logits(system, batch)
        return bce_loss(probs, batch.labels.to(probs.dtype)).item()


def _check_dataset(samples, profiles):
    for s in samples:
        if s.activity.ndim != 2 or s.activity.shape != (len(s.speaker_ids), s.n_frames):
            raise DatasetError(f"{s.sample_id}: activity tracks missing or misshapen")
        missing = [sid for sid in s.speaker_ids if sid not in profiles]
        if missing:
            raise DatasetError(f"{s.sample_id}: no profile for speakers {missing}")


@dataclass
class TrainResult:
    system: MMTSDSystem
    log: list[LogRow] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def _trainable_state(system: MMTSDSystem) -> dict:
    names = {n for n, p in system.named_parameters() if p.requires_grad}
    return {k: v.detach().clone() for k, v in system.state_dict().items() if k in names}


def train_mm_tsd(system: MMTSDSystem, train_samples, val_samples, profiles,
                 corpus: TextPromptCorpus, world: WorldConfig, cfg: TrainConfig = TrainConfig(),
                 options: MMTSDOptions = MMTSDOptions(), augment: AugmentConfig | None = None,
                 progress=None) -> TrainResult:
    """Multi-task training with every event prompted in every utterance.

    Only the TSD network, the text head, the LoRA adapters and (for the
    no-aligner route) the face projection are updated.  The learning rate
    follows ``lr_schedule`` per epoch and the parameters with the lowest
    validation loss are kept.
    """
    cfg.validate()
    _check_dataset(train_samples, profiles)
    _check_dataset(val_samples, profiles)
    enroll = options.enrollment
    system.freeze()
    opt = _adam(system.trainable_parameters(), cfg.lr0)
    result = TrainResult(system)

    val_batches = []
    for start in range(0, len(val_samples), cfg.batch_size):
        chunk = val_samples[start:start + cfg.batch_size]
        groups = [training_prompts(s, profiles, corpus, world, np.random.default_rng([cfg.seed, 99, start + i]),
                                   enroll, split="val")
                  for i, s in enumerate(chunk)]
        val_batches.append(prepare_batch(chunk, groups, profiles))

    best_state = _trainable_state(system)
    n = len(train_samples)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr0, cfg.decay, epoch)
        _set_lr(opt, lr)
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        order = rng.permutation(n)
        steps = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
        system.train()
        total = 0.0
        for step in range(steps):
            idx = [order[(step * cfg.batch_size + j) % n] for j in range(min(cfg.batch_size, n))]
            chunk = [train_samples[i] for i in idx]
            groups = [training_prompts(s, profiles, corpus, world, rng, enroll, augment) for s in chunk]
            feats = [s.features if augment is None else augment_frames(s.features, augment, rng)
                     for s in chunk]
            total += train_step(system, opt, prepare_batch(chunk, groups, profiles, feats), cfg.grad_clip)
        result.log.append(LogRow(epoch, cfg.stage, "train", total / max(steps, 1), lr))
        system.eval()
        if val_batches:
            weights = [len(b.prompts) for b in val_batches]
            val = float(np.average([batch_loss(system, b) for b in val_batches], weights=weights))
        else:
            val = result.log[-1].loss
        result.log.append(LogRow(epoch, cfg.stage, "val", val, lr))
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best_state = _trainable_state(system)
        if progress is not None:
            progress(epoch, result.log[-2].loss, val)
    system.load_state_dict(best_state, strict=False)
    system.eval()
    return result


def format_log(rows) -> str:
    lines = ["epoch,stage,split,loss,lr"]
    lines += [f"{r.epoch},{r.stage},{r.split},{r.loss:.6f},{r.lr:.6g}" for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    coordinates: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def _finite_difference(loss_fn, params: dict, h: float, floor: float) -> GradCheckReport:
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errors, count = {}, 0
    with torch.no_grad():
        for name, p in params.items():
            analytic = p.grad.detach().numpy().ravel().copy()
            numeric = np.empty_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            errors[name] = _relative_error(analytic, numeric, floor)
            count += flat.numel()
    return GradCheckReport(errors, count)


def _probe_inputs(T: int, P: int, d_a: int, D: int, seed: int):
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(T, d_a, generator=g, dtype=torch.float64)
    e = torch.randn(P, D, generator=g, dtype=torch.float64)
    y = (torch.rand(P, T, generator=g, dtype=torch.float64) < 0.5).double()
    return x, e, y


def grad_check(probe: str = "full", seed: int = 0, T: int = 6, P: int = 3, D: int = 8,
               h: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Central finite differences against autograd at double precision.

    ``probe="full"`` differentiates ``bce_loss`` through prediction, decoding
    and encoding of a small TSD network (with LoRA adapters on the decoder
    self-attention).  ``probe="linear"`` uses an attention-free bilinear model
    whose loss is quadratic in every single coordinate, so central
    differences are exact up to rounding.  Errors are per parameter tensor:
    max |analytic - numeric| over max(|analytic|, |numeric|, floor).
    """
    from .tsdmodel import ModelConfig, TSDModel, build_decoder_mask, predict_tracks

    torch.manual_seed(seed)
    d_a = 4
    x, e, y = _probe_inputs(T, P, d_a, D, seed)
    if probe == "linear":
        front = nn.Linear(d_a, D).double()
        proj = nn.Linear(D, D).double()
        modules = {"front_end": front, "prompt_proj": proj}

        def loss_fn():
            logits = proj(e) @ front(x).T
            return ((logits - y) ** 2).mean()
    elif probe == "full":
        cfg = ModelConfig(d_a=d_a, d_model=D, n_heads=2, d_ff=2 * D, dropout=0.0, max_frames=64)
        model = TSDModel(cfg).double().eval()
        for layer in model.decoder:
            for proj in (layer.self_attn.q_proj, layer.self_attn.v_proj):
                adapter = proj.attach(2, 4.0)
                nn.init.normal_(adapter.B, std=0.1)
        mask = build_decoder_mask([1, 2] if P == 3 else [1] * P)
        modules = {"tsd": model}

        def loss_fn():
            mem = model.encode_speech(x)
            return bce_loss(predict_tracks(model.decode_prompts(e, mem, mask), mem).probs, y)
    else:
        raise ConfigurationError(f"unknown probe {probe!r}")
    params = {f"{m}.{n}": p for m, mod in modules.items() for n, p in mod.named_parameters()}
    return _finite_difference(loss_fn, params, h, floor)


def zero_perturbation_difference(seed: int = 0) -> float:
    """Loss change when every parameter is 'perturbed' by exactly zero."""
    from .tsdmodel import ModelConfig, TSDModel, build_decoder_mask, predict_tracks

    torch.manual_seed(seed)
    x, e, y = _probe_inputs(6, 3, 4, 8, seed)
    model = TSDModel(ModelConfig(d_a=4, d_model=8, n_heads=2, d_ff=16, dropout=0.0)).double().eval()
    mask = build_decoder_mask([1, 2])

    def loss():
        mem = model.encode_speech(x)
        return bce_loss(predict_tracks(model.decode_prompts(e, mem, mask), mem).probs, y).item()

    before = loss()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.zeros_like(p))
    return loss() - before
