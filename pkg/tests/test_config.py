import dataclasses

import pytest

from mmtsd.config import (SECTIONS, RunConfig, format_run_config, load_run_config, parse_run_config,
                          with_overrides)
from mmtsd.errors import ConfigurationError


def test_defaults_round_trip():
    cfg = load_run_config()
    assert parse_run_config(format_run_config(cfg)) == cfg


def test_every_section_written():
    text = format_run_config(load_run_config())
    for section in SECTIONS:
        assert f"[{section}]" in text


def test_partial_file_keeps_defaults():
    cfg = parse_run_config("[world]\nseed = 7\nduration_s = 12.5\n[train]\nepochs = 3\n")
    assert cfg.world.seed == 7 and cfg.world.duration_s == 12.5 and cfg.train.epochs == 3
    assert cfg.train.lr0 == 1e-4 and cfg.train.decay == 0.95
    assert cfg.model.d_a == cfg.world.d_a and cfg.text.out_dim == cfg.model.d_model


def test_stage_defaults():
    cfg = RunConfig()
    assert cfg.train.stage == "mmtsd" and cfg.aligner.stage == "aligner"
    assert cfg.pretrain_speaker.stage == "pretrain_speaker"


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[world]\nunknown_key = 1\n",
    "[world]\nseed = seven\n",
    "[train]\ndecay = 1.5\n",
    "[train]\nlr0 = 0\n",
    "[world]\noverlap_prob = -0.1\n",
    "[mmtsd]\nuse_lora = maybe\n",
    "[train]\nstage = aligner\n",
    "not an ini file",
])
def test_rejections(text):
    with pytest.raises(ConfigurationError):
        parse_run_config(text)


def test_bool_parsing():
    assert parse_run_config("[mmtsd]\nuse_lora = false\n").mmtsd.use_lora is False
    assert parse_run_config("[mmtsd]\nuse_lora = Yes\n").mmtsd.use_lora is True


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "absent.cfg")


def test_overrides_revalidate():
    cfg = with_overrides(load_run_config(), world={"d_a": 8})
    assert cfg.model.d_a == 8
    with pytest.raises(ConfigurationError):
        with_overrides(cfg, data={"n_train_speakers": 5000})


def test_world_data_sections_only(tmp_path):
    cfg = with_overrides(load_run_config(), world={"seed": 3})
    text = format_run_config(cfg, ("world", "data"))
    back = parse_run_config(text)
    assert back.world == cfg.world and back.data == cfg.data
    assert dataclasses.asdict(back.train) == dataclasses.asdict(RunConfig().train)
