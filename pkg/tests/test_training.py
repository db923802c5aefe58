import dataclasses

import numpy as np
import pytest
import torch

from mmtsd.errors import ConfigurationError, DatasetError
from mmtsd.pipeline import build_system, text_corpus
from mmtsd.promptenc.corpus import build_text_corpus, load_templates
from mmtsd.promptenc.face import FaceEncoder, VoiceFaceAligner
from mmtsd.promptenc.speaker import SpeakerEmbedder
from mmtsd.promptenc.text import TextConfig, TextPromptEncoder
from mmtsd.prompts import training_prompts
from mmtsd.system import MMTSDSystem, module_checksum
from mmtsd.training import (STAGE_DEFAULTS, LogRow, MMTSDOptions, TrainConfig, batch_loss, format_log,
                            grad_check, lr_schedule, prepare_batch, pretrain_speaker_embedder,
                            pretrain_text_base, train_mm_tsd, train_step, zero_perturbation_difference)
from mmtsd.tsdmodel import ModelConfig, TSDModel
from mmtsd.worldsim import WorldConfig, make_world, simulate_conversation

WORLD = WorldConfig(duration_s=4.0)
TINY = ModelConfig(d_a=32, d_model=32, n_heads=4, d_ff=64, enc_layers=2, dec_layers=2, dropout=0.0)


def _tiny_system(seed=0, face_route="aligner"):
    torch.manual_seed(seed)
    corpus = build_text_corpus(load_templates(), seed=0)
    text = TextPromptEncoder(corpus.vocabulary, TextConfig(out_dim=TINY.d_model)).freeze_base()
    text.attach_lora()
    system = MMTSDSystem(TSDModel(TINY), text, SpeakerEmbedder(32, out_dim=TINY.d_model),
                         FaceEncoder(64), VoiceFaceAligner(128, TINY.d_model), face_route)
    return system.freeze(), corpus


@pytest.fixture(scope="module")
def world_data():
    pool = make_world(WORLD, 8)
    profiles = {p.speaker_id: p for p in pool}
    train = [simulate_conversation(WORLD, pool, i) for i in range(6)]
    val = [simulate_conversation(WORLD, pool, 100 + i, "val") for i in range(2)]
    return profiles, train, val


def test_lr_schedule_examples():
    assert lr_schedule(1e-4, 0.95, 0) == 1e-4
    assert lr_schedule(1e-4, 0.95, 1) == pytest.approx(9.5e-5, rel=1e-12)
    assert lr_schedule(1e-4, 0.95, 10) == pytest.approx(5.987369392383788e-05, rel=1e-12)
    with pytest.raises(ConfigurationError):
        lr_schedule(1e-4, 0.95, -1)


def test_config_validation():
    assert TrainConfig().lr0 == 1e-4 and TrainConfig().decay == 0.95
    with pytest.raises(ConfigurationError):
        TrainConfig(lr0=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(decay=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(stage="finetune").validate()


def test_speaker_pretraining_contracts():
    profiles = make_world(WORLD, 60)
    cfg = dataclasses.replace(STAGE_DEFAULTS["pretrain_speaker"], epochs=0)
    torch.manual_seed(cfg.seed)
    init = SpeakerEmbedder(32, out_dim=192)
    emb, _ = pretrain_speaker_embedder(profiles, WORLD, cfg)
    assert module_checksum(emb) == module_checksum(init)
    assert emb.embed([np.zeros((20, 32))]).shape == (1, 192)
    assert not any(p.requires_grad for p in emb.parameters())
    with pytest.raises(ConfigurationError):
        pretrain_speaker_embedder(profiles[:49], WORLD, cfg)


def test_text_pretraining_zero_epochs():
    corpus = build_text_corpus(load_templates(), seed=0)
    cfg = dataclasses.replace(STAGE_DEFAULTS["pretrain_text"], epochs=0)
    torch.manual_seed(cfg.seed)
    init = TextPromptEncoder(corpus.vocabulary, TextConfig())
    enc, _ = pretrain_text_base(corpus, TextConfig(), cfg)
    assert module_checksum(enc) == module_checksum(init)
    assert enc.base_frozen


def test_linear_probe_gradients():
    assert grad_check("linear").max_error < 1e-7


def test_zero_perturbation():
    assert zero_perturbation_difference() == 0.0


def test_unknown_probe():
    with pytest.raises(ConfigurationError):
        grad_check("conv")


def test_training_respects_freeze_and_schedule(world_data):
    profiles, train, val = world_data
    system, corpus = _tiny_system()
    frozen = {k: module_checksum(m) for k, m in system.frozen_modules().items()}
    tsd_before = module_checksum(system.tsd)
    cfg = TrainConfig(lr0=1e-3, decay=0.5, epochs=3, batch_size=3)
    result = train_mm_tsd(system, train, val, profiles, corpus, WORLD, cfg)
    assert {k: module_checksum(m) for k, m in system.frozen_modules().items()} == frozen
    assert module_checksum(system.tsd) != tsd_before
    lrs = [r.lr for r in result.log if r.split == "train"]
    assert lrs == [lr_schedule(1e-3, 0.5, k) for k in range(3)]
    assert [r.epoch for r in result.log] == [0, 0, 1, 1, 2, 2]
    best = min(r.loss for r in result.log if r.split == "val")
    assert result.best_val == best


def test_zero_epochs_leaves_system_unchanged(world_data):
    profiles, train, val = world_data
    system, corpus = _tiny_system()
    before = module_checksum(system, skip_adapters=False)
    train_mm_tsd(system, train, val, profiles, corpus, WORLD, TrainConfig(epochs=0))
    assert module_checksum(system, skip_adapters=False) == before


def test_one_step_descends(world_data):
    profiles, train, _ = world_data
    system, corpus = _tiny_system(seed=1)
    rng = np.random.default_rng(0)
    chunk = train[:2]
    batch = prepare_batch(chunk, [training_prompts(s, profiles, corpus, WORLD, rng) for s in chunk], profiles)
    opt = torch.optim.Adam(system.trainable_parameters(), lr=1e-5)
    system.eval()  # no dropout in TINY; eval keeps the comparison exact
    before = batch_loss(system, batch)
    train_step(system, opt, batch)
    assert batch_loss(system, batch) < before


def test_missing_tracks_rejected(world_data):
    profiles, train, val = world_data
    system, corpus = _tiny_system()
    broken = dataclasses.replace(train[0], activity=train[0].activity[:1])
    with pytest.raises(DatasetError):
        train_mm_tsd(system, [broken], val, profiles, corpus, WORLD, TrainConfig(epochs=1))
    stranger = dataclasses.replace(train[0], speaker_ids=[999, 998])
    with pytest.raises(DatasetError):
        train_mm_tsd(system, [stranger], val, profiles, corpus, WORLD, TrainConfig(epochs=1))


def test_linear_face_route_trains_projection(world_data):
    profiles, train, val = world_data
    system, corpus = _tiny_system(face_route="linear")
    w = system.face_proj.weight.detach().clone()
    train_mm_tsd(system, train[:2], val[:1], profiles, corpus, WORLD, TrainConfig(lr0=1e-3, epochs=1, batch_size=2))
    assert not torch.equal(w, system.face_proj.weight)


def test_log_format():
    text = format_log([LogRow(0, "mmtsd", "train", 0.5, 1e-4)])
    assert text == "epoch,stage,split,loss,lr\n0,mmtsd,train,0.500000,0.0001\n"


@pytest.mark.slow
def test_overfits_single_sample(desk):
    """A pretrained prompt front end plus a small TSD network memorises one utterance."""
    run = dataclasses.replace(desk.run, model=dataclasses.replace(
        desk.run.model, d_model=192, enc_layers=2, dec_layers=2, dropout=0.0))
    system = build_system(run, desk.aligned, text_corpus(run), trained=False)
    pool = make_world(run.world, run.data.n_train_speakers)
    profiles = {p.speaker_id: p for p in pool}
    one = [simulate_conversation(dataclasses.replace(run.world, duration_s=4.0), pool, 0)]
    cfg = TrainConfig(lr0=1e-3, decay=1.0, epochs=200, batch_size=1)
    result = train_mm_tsd(system, one, one, profiles, text_corpus(run), run.world, cfg,
                          MMTSDOptions())
    train_losses = [r.loss for r in result.log if r.split == "train"]
    assert min(train_losses) < 0.05
