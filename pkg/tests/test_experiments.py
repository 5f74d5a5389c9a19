"""
test_experiments.py

Image rendering, the command drivers on a tiny configuration, CLI exit
codes, and (with CALSEG_SLOW_TESTS=1) the desk-scale calibration checks.
"""
import json
import os
import time

import numpy as np
import pandas as pd
import pytest

from conftest import slow
from calseg import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from experiments import (
    HEATMAP_COLORMAP,
    TrainPoint,
    compare_losses,
    heatmap_rgb,
    load_splits,
    overlay_rgb,
    render_heatmap,
    run_points,
    sweep_gamma,
    sweep_threshold,
)
from losses import LossConfig, LossKind
from metrics import PredictionMap
from run_config import load_config
from synthdata import read_ppm, write_pfm

TINY = [
    "synth.size=16x16",
    "synth.count=15",
    "net.depth=1",
    "net.base_channels=2",
    "train.max_epochs=2",
    "train.augment=false",
    "run.bootstrap_resamples=50",
]


#=========================================== IMAGES ===========================================

def test_colormap_table():
    assert HEATMAP_COLORMAP.shape == (256, 3)
    assert tuple(HEATMAP_COLORMAP[0]) == (0, 0, 255)
    assert tuple(HEATMAP_COLORMAP[255]) == (255, 0, 0)


def test_heatmap_endpoints_and_middle():
    rgb = heatmap_rgb(np.array([[0.0, 0.5, 1.0]]))
    assert tuple(rgb[0, 0]) == tuple(HEATMAP_COLORMAP[0])
    assert tuple(rgb[0, 1]) == tuple(HEATMAP_COLORMAP[128])
    assert tuple(rgb[0, 2]) == tuple(HEATMAP_COLORMAP[255])


def test_heatmap_rejects_out_of_range():
    with pytest.raises(ValueError):
        heatmap_rgb(np.array([[1.5]]))


def test_render_heatmap_is_byte_identical(tmp_path):
    pfm = str(tmp_path / "map.pfm")
    write_pfm(pfm, np.random.default_rng(0).random((4, 6)))
    first = render_heatmap(pfm, str(tmp_path / "a.ppm"))
    second = render_heatmap(pfm, str(tmp_path / "b.ppm"))
    assert open(first, "rb").read() == open(second, "rb").read()
    assert read_ppm(first).shape == (4, 6, 3)


def test_overlay_colours():
    pred_map = PredictionMap(np.array([[0.9, 0.9, 0.1, 0.1]]), np.array([[1.0, 0.0, 1.0, 0.0]]))
    rgb = overlay_rgb(pred_map, 0.5)
    assert [tuple(c) for c in rgb[0]] == [(255, 255, 255), (255, 0, 255), (0, 255, 0), (0, 0, 0)]


#=========================================== DRIVERS ===========================================

def test_gamma_one_matches_plain_dice():
    cfg = load_config(overrides=TINY)
    train_set, val_set, _ = load_splits(cfg)
    points = [
        TrainPoint("dscpp", LossConfig(kind=LossKind.DSCPP, gamma=1.0), cfg, train_set, val_set),
        TrainPoint("dsc", LossConfig(kind=LossKind.DSC), cfg, train_set, val_set),
    ]
    dscpp, dsc = run_points(points)
    assert dscpp.params == dsc.params


def test_sweep_gamma_outputs(tmp_path):
    cfg = load_config(overrides=TINY + ["run.gammas=1, 2"])
    result = sweep_gamma(cfg, str(tmp_path))
    assert result["success"]
    sweep = pd.read_csv(tmp_path / "sweep.csv")
    assert list(sweep["gamma"]) == [1.0, 2.0]
    assert list(sweep.columns[1:7]) == ["nll", "brier", "dice", "jaccard", "recall", "precision"]
    assert (tmp_path / "checkpoints" / "gamma_1p00.sgnt").exists()
    assert (tmp_path / "heatmaps" / "gamma_2p00.ppm").exists()
    hist = pd.read_csv(tmp_path / "histograms.csv")
    assert len(hist) == 2 * cfg.run.hist_bins


def test_sweep_threshold_recall_is_monotone(tmp_path):
    assert main(["train", "--out", str(tmp_path / "train")] + sum((["--set", s] for s in TINY), [])) == EXIT_OK
    checkpoint = str(tmp_path / "train" / "checkpoints" / "model.sgnt")
    cfg = load_config(overrides=TINY + [f"run.checkpoint={checkpoint}"])
    sweep_threshold(cfg, str(tmp_path / "sweep"))
    sweep = pd.read_csv(tmp_path / "sweep" / "sweep.csv")
    assert len(sweep) == 19
    recalls = sweep["recall"].to_numpy()
    assert np.all(np.diff(recalls) <= 1e-12)
    assert len(os.listdir(tmp_path / "sweep" / "overlays")) == 19


def test_compare_losses_outputs(tmp_path):
    cfg = load_config(overrides=TINY + ["run.losses=DSC, DSC++, Tversky++"])
    compare_losses(cfg, str(tmp_path))
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics["loss"]) == ["DSC", "DSC++", "Tversky++"]
    significance = pd.read_csv(tmp_path / "significance.csv")
    assert set(significance["metric"]) == {"nll", "dice"}
    assert len(significance) == 6


#=========================================== CLI ===========================================

def test_cli_pipeline(tmp_path):
    sets = sum((["--set", s] for s in TINY), [])
    out = tmp_path / "run"
    assert main(["gen-data", "--out", str(out / "gen")] + sets) == EXIT_OK
    data = str(out / "gen" / "data")
    assert main(["train", "--out", str(out / "train"), "--set", f"run.data={data}"] + sets) == EXIT_OK
    checkpoint = str(out / "train" / "checkpoints" / "model.sgnt")
    code = main(
        ["eval", "--out", str(out / "eval"), "--set", f"run.data={data}", "--set", f"run.checkpoint={checkpoint}"] + sets
    )
    assert code == EXIT_OK
    metrics = pd.read_csv(out / "eval" / "metrics.csv")
    assert {"dataset", "loss", "threshold", "nll", "dice_lo", "dice_hi"} <= set(metrics.columns)
    predictions = sorted(os.listdir(out / "eval" / "predictions"))
    assert predictions[0] == "0000.pfm"
    pfm = str(out / "eval" / "predictions" / predictions[0])
    assert main(["render-heatmap", "--out", str(out / "heat"), "--set", f"run.prediction={pfm}"]) == EXIT_OK
    assert (out / "heat" / "heatmaps" / "0000.ppm").exists()
    resolved = (out / "eval" / "resolved_config.txt").read_text()
    assert f"run.checkpoint = {checkpoint}" in resolved
    audit = json.loads((out / "eval" / "audit_log.json").read_text())
    assert audit["entries"][-1]["success"] is True


def test_cli_config_error_exit_code(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "bogus.key=1"]) == EXIT_CONFIG
    audit = json.loads((tmp_path / "audit_log.json").read_text())
    assert audit["entries"][-1]["success"] is False


def test_cli_runtime_error_exit_code(tmp_path):
    code = main(["eval", "--out", str(tmp_path), "--set", "run.checkpoint=/nonexistent/model.sgnt"] + sum(
        (["--set", s] for s in TINY), []
    ))
    assert code == EXIT_RUNTIME


#=========================================== DESK-SCALE CHECKS ===========================================

DESK = ["train.max_epochs=40", "run.bootstrap_resamples=200"]


@slow
def test_default_pipeline_fits_desk_budget(tmp_path):
    started = time.perf_counter()
    assert main(["gen-data", "--out", str(tmp_path / "gen")]) == EXIT_OK
    data = f"run.data={tmp_path / 'gen' / 'data'}"
    assert main(["train", "--out", str(tmp_path / "train"), "--set", data]) == EXIT_OK
    checkpoint = f"run.checkpoint={tmp_path / 'train' / 'checkpoints' / 'model.sgnt'}"
    assert main(["eval", "--out", str(tmp_path / "eval"), "--set", data, "--set", checkpoint]) == EXIT_OK
    assert time.perf_counter() - started < 600.0


@pytest.fixture(scope="module")
def paired_models(tmp_path_factory):
    from audit import audit_log

    audit_log.use_file(str(tmp_path_factory.mktemp("audit") / "audit_log.json"))
    cfg = load_config(overrides=DESK)
    train_set, val_set, test_set = load_splits(cfg)
    losses = {
        "DSC": LossConfig(kind=LossKind.DSC),
        "DSC++": LossConfig(kind=LossKind.DSCPP, gamma=2.0),
    }
    points = [TrainPoint(name, loss, cfg, train_set, val_set) for name, loss in losses.items()]
    results = run_points(points, cfg.run.workers)
    return cfg, test_set, {r.label: r.params for r in results}


@slow
def test_dscpp_is_better_calibrated_than_dsc(paired_models):
    from experiments import evaluate_maps, prediction_maps

    cfg, test_set, params = paired_models
    reports = {name: evaluate_maps(cfg, prediction_maps(cfg, p, test_set)) for name, p in params.items()}
    assert reports["DSC++"].nll < reports["DSC"].nll
    assert abs(reports["DSC++"].dice - reports["DSC"].dice) < 0.05


@slow
def test_dscpp_is_less_overconfident(paired_models):
    from experiments import histogram_rows, prediction_maps

    cfg, test_set, params = paired_models
    unsure = {
        name: histogram_rows(prediction_maps(cfg, p, test_set), cfg.run.hist_bins)[0]["uncertain_fraction"]
        for name, p in params.items()
    }
    assert unsure["DSC++"] > unsure["DSC"]


@slow
def test_dscpp_recall_varies_more_over_thresholds(paired_models):
    from experiments import evaluate_maps, prediction_maps

    cfg, test_set, params = paired_models
    spread = {}
    for name, p in params.items():
        maps = prediction_maps(cfg, p, test_set)
        recalls = [evaluate_maps(cfg, maps, t).recall for t in cfg.run.thresholds]
        assert np.all(np.diff(recalls) <= 1e-12)
        spread[name] = np.std(recalls)
    assert spread["DSC++"] > spread["DSC"]


@slow
@pytest.mark.parametrize("kind", [LossKind.TVERSKY, LossKind.FOCAL_TVERSKY, LossKind.COMBO, LossKind.UNIFIED_FOCAL])
def test_plusplus_substitution_improves_calibration(kind):
    from experiments import evaluate_maps, prediction_maps

    cfg = load_config(overrides=DESK)
    train_set, val_set, test_set = load_splits(cfg)
    points = [
        TrainPoint("plain", LossConfig.defaults(kind), cfg, train_set, val_set),
        TrainPoint("pp", LossConfig.defaults(kind, plusplus=True), cfg, train_set, val_set),
    ]
    plain, pp = run_points(points, cfg.run.workers)
    nll = {r.label: evaluate_maps(cfg, prediction_maps(cfg, r.params, test_set)).nll for r in (plain, pp)}
    assert nll["pp"] < nll["plain"]


def test_size_not_divisible_by_depth_is_a_config_error(tmp_path):
    from errors import ConfigError

    with pytest.raises(ConfigError, match="net.depth"):
        load_config(overrides=["synth.size=18x18", "net.depth=2"])
    code = main(["train", "--out", str(tmp_path), "--set", "synth.size=18x18", "--set", "net.depth=2"])
    assert code == EXIT_CONFIG
    audit = json.loads((tmp_path / "audit_log.json").read_text())
    assert "net.depth" in audit["entries"][-1]["error"]


def test_dataset_on_disk_that_does_not_fit_the_net(tmp_path):
    from errors import ConfigError

    assert main(["gen-data", "--out", str(tmp_path / "gen"), "--set", "synth.size=18x18", "--set", "synth.count=15", "--set", "net.depth=1"]) == EXIT_OK
    cfg = load_config(overrides=[f"run.data={tmp_path / 'gen' / 'data'}", "net.depth=2"])
    with pytest.raises(ConfigError):
        load_splits(cfg)
