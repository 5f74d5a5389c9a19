"""
test_run_config.py

Layering of defaults, config files and --set overrides.
"""
import os

import pytest

from errors import ConfigError
from losses import LossKind
from run_config import (
    GAMMA_GRID,
    THRESHOLD_GRID,
    ExperimentConfig,
    RunConfig,
    load_config,
    parse_key_value_lines,
    write_resolved_config,
)
from synthdata import SynthKind

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


def test_defaults():
    cfg = load_config()
    assert cfg.net.depth == 2 and cfg.train.lr0 == 0.1
    assert cfg.train.max_epochs == 40
    assert cfg.run.gammas == GAMMA_GRID
    assert len(THRESHOLD_GRID) == 19 and THRESHOLD_GRID[0] == 0.05 and THRESHOLD_GRID[-1] == 0.95


def test_shipped_yaml_matches_defaults(monkeypatch):
    monkeypatch.delenv("CALSEG_WORKERS", raising=False)
    assert load_config(os.path.join(REPO_ROOT, "config.yaml")) == ExperimentConfig(run=RunConfig(workers=1))


def test_shipped_yaml_keeps_each_kinds_loss_defaults():
    shipped = os.path.join(REPO_ROOT, "config.yaml")
    assert load_config(shipped, ["loss.kind=DSC++"]).loss.gamma == 2.0
    focal = load_config(shipped, ["loss.kind=FocalTversky"]).loss
    assert (focal.alpha, focal.beta) == (0.3, 0.7)
    assert focal.gamma == pytest.approx(4.0 / 3.0)
    assert load_config(shipped, ["loss.kind=UnifiedFocal", "loss.gamma=0.2"]).loss.gamma == 0.2
    tversky = load_config(shipped, ["loss.kind=Tversky++"]).loss
    assert tversky.plusplus and (tversky.alpha, tversky.beta) == (0.3, 0.7)


def test_key_value_file_and_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# desk run\nnet.depth = 1\ntrain.max_epochs = 5   # short\nsynth.size = 32x32\n")
    cfg = load_config(str(path), ["train.max_epochs=7", "synth.kind=blobs", "run.gammas=1, 2"])
    assert cfg.net.depth == 1
    assert cfg.train.max_epochs == 7
    assert cfg.synth.size == (32, 32)
    assert cfg.synth.kind == SynthKind.BLOBS
    assert cfg.run.gammas == (1.0, 2.0)


def test_loss_kind_brings_its_defaults():
    cfg = load_config(overrides=["loss.kind=Tversky", "loss.plusplus=true"])
    assert cfg.loss.kind == LossKind.TVERSKY
    assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.plusplus) == (0.3, 0.7, True)
    assert load_config(overrides=["loss.kind=Tversky", "loss.alpha=0.4"]).loss.alpha == 0.4


def test_loss_kind_accepts_list_names():
    assert load_config(overrides=["loss.kind=DSC++"]).loss.kind == LossKind.DSCPP
    tversky = load_config(overrides=["loss.kind=Tversky++"]).loss
    assert tversky.kind == LossKind.TVERSKY and tversky.plusplus
    assert not load_config(overrides=["loss.kind=Tversky++", "loss.plusplus=false"]).loss.plusplus


@pytest.mark.parametrize(
    "override",
    ["bogus.key=1", "net.width=3", "net.depth=two", "train.augment=maybe", "loss.kind=Nope", "run.thresholds=0.5, 1.5"],
)
def test_bad_settings_raise_config_error(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_malformed_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_key_value_lines(["net.depth = 1", "just words"], "exp.cfg")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/calseg.cfg")


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(overrides=["loss.kind=FocalTversky", "synth.size=32x16", "run.losses=DSC, DSC++", "run.data=/tmp/d"])
    path = write_resolved_config(cfg, str(tmp_path))
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines == sorted(lines)
    assert load_config(path) == cfg


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("CALSEG_WORKERS", "3")
    assert load_config().run.workers == 3
    assert load_config(overrides=["run.workers=2"]).run.workers == 2
