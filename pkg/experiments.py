"""
Experiment drivers behind the calseg commands.

Each driver takes a resolved ExperimentConfig and an output directory,
writes its tables and images there, and returns a result dict in the
{"success": ..., "data": ..., "notes": [...]} shape the audit log stores.

Swept conditions share the network seed, the training seed and the data
split, so any difference between rows comes from the loss alone.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from audit import audit_log
from losses import LossConfig, LossKind, parse_loss_name
from metrics import (
    METRIC_NAMES,
    MetricsReport,
    PredictionMap,
    evaluate,
    significance_matrix,
    softmax_histogram,
    uncertain_fraction,
    write_rows_csv,
)
from run_config import ExperimentConfig
from segnet import ParameterSet, load_checkpoint, predict, save_checkpoint
from synthdata import Sample, generate, read_dataset, read_pfm, split, write_dataset, write_pfm, write_ppm
from trainer import TrainLog, normalize_image, train

logger = logging.getLogger(__name__)

# Entry i is (i, 0, 255 - i): blue at s = 0, red at s = 1.
HEATMAP_COLORMAP = np.array([(i, 0, 255 - i) for i in range(256)], dtype=np.uint8)

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 255),
    "fn": (0, 255, 0),
}
SIGNIFICANCE_METRICS = ("nll", "dice")


#=========================================== DATA ===========================================

Splits = Tuple[List[Sample], List[Sample], List[Sample]]


def load_splits(cfg: ExperimentConfig) -> Splits:
    """train/val/test from run.data when set, otherwise generated from synth.*."""
    if cfg.run.data:
        loaded = read_dataset(cfg.run.data)
        parts = (loaded["train"], loaded["val"], loaded["test"])
        if not all(parts):
            raise ValueError(f"dataset {cfg.run.data} has an empty split")
    else:
        parts = split(generate(cfg.synth), seed=cfg.run.split_seed)
    height, width = parts[0][0].mask.shape
    cfg.net.check_image(height, width)
    return parts


def _prepare(cfg: ExperimentConfig, sample: Sample):
    return normalize_image(sample.image) if cfg.train.normalize else sample.image


def prediction_maps(cfg: ExperimentConfig, params: ParameterSet, samples: Sequence[Sample]) -> List[PredictionMap]:
    return [PredictionMap(predict(params, _prepare(cfg, s)), s.mask) for s in samples]


def evaluate_maps(cfg: ExperimentConfig, maps: Sequence[PredictionMap], threshold: Optional[float] = None) -> MetricsReport:
    return evaluate(
        maps,
        threshold=cfg.run.threshold if threshold is None else threshold,
        n_resamples=cfg.run.bootstrap_resamples,
        seed=cfg.run.bootstrap_seed,
        level=cfg.run.ci_level,
    )


#=========================================== IMAGES ===========================================

def heatmap_rgb(fg_prob) -> np.ndarray:
    """Maps probabilities through HEATMAP_COLORMAP; entry = min(floor(256 s), 255)."""
    s = np.asarray(fg_prob, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"heatmap expects an [H,W] map, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("heatmap values must lie in [0, 1]")
    index = np.minimum(np.floor(s * 256.0), 255).astype(np.int64)
    return HEATMAP_COLORMAP[index]


def render_heatmap(prediction_path: str, out_path: str) -> str:
    """PFM prediction map -> PPM heatmap; identical input gives identical bytes."""
    write_ppm(out_path, heatmap_rgb(read_pfm(prediction_path)))
    return out_path


def overlay_rgb(pred_map: PredictionMap, threshold: float) -> np.ndarray:
    """TP white, TN black, FP magenta, FN green."""
    predicted = pred_map.fg_prob >= threshold
    truth = pred_map.truth == 1.0
    rgb = np.zeros(truth.shape + (3,), dtype=np.uint8)
    rgb[predicted & truth] = OVERLAY_COLORS["tp"]
    rgb[predicted & ~truth] = OVERLAY_COLORS["fp"]
    rgb[~predicted & truth] = OVERLAY_COLORS["fn"]
    rgb[~predicted & ~truth] = OVERLAY_COLORS["tn"]
    return rgb


def histogram_rows(pred_maps: Sequence[PredictionMap], n_bins: int, **labels) -> List[Dict[str, object]]:
    """Softmax histogram pooled over all maps, one row per bin."""
    pooled = PredictionMap(
        np.concatenate([m.fg_prob.ravel() for m in pred_maps])[None, :],
        np.concatenate([m.truth.ravel() for m in pred_maps])[None, :],
    )
    unsure = uncertain_fraction(pooled)
    rows = []
    for index, count in softmax_histogram(pooled, n_bins):
        rows.append({
            **labels,
            "bin": index,
            "lo": index / n_bins,
            "hi": (index + 1) / n_bins,
            "count": count,
            "uncertain_fraction": unsure,
        })
    return rows


#=========================================== TRAINING POINTS ===========================================

@dataclass
class TrainPoint:
    """One independent training run of a sweep."""
    label: str
    loss: LossConfig
    cfg: ExperimentConfig
    train_set: List[Sample]
    val_set: List[Sample]


@dataclass
class PointResult:
    label: str
    loss: LossConfig
    params: ParameterSet
    log: TrainLog


def _run_point(point: TrainPoint) -> PointResult:
    params, log = train(point.cfg.net, point.cfg.train, point.loss, (point.train_set, point.val_set))
    return PointResult(point.label, point.loss, params, log)


def run_points(points: Sequence[TrainPoint], workers: int = 1) -> List[PointResult]:
    """Trains every point, in a process pool when workers > 1; results keep input order."""
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(points))) as pool:
            results = list(pool.map(_run_point, points))
    else:
        results = [_run_point(p) for p in points]
    for result in results:
        best = result.log.best_epoch()
        audit_log.save(
            "train-run",
            {
                "success": True,
                "data": {
                    "label": result.label,
                    "loss": result.loss.as_dict(),
                    "epochs": len(result.log),
                    "stop_reason": result.log.stop_reason.value,
                    "best_val_loss": best.val_loss if best else None,
                },
            },
            run_id=result.label,
        )
        logger.info(f"{result.label}: {len(result.log)} epochs, stop reason {result.log.stop_reason.value}")
    return results


def _save_point(out_dir: str, result: PointResult, name: str) -> str:
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    path = os.path.join(out_dir, "checkpoints", f"{name}.sgnt")
    save_checkpoint(path, result.params)
    result.log.write_csv(os.path.join(out_dir, "logs", f"{name}.csv"))
    return path


def _file_tag(value: float) -> str:
    return f"{value:.2f}".replace(".", "p")


#=========================================== COMMANDS ===========================================

def gen_data(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """Generates the synthetic dataset and writes it under <out>/data."""
    samples = generate(cfg.synth)
    train_set, val_set, test_set = split(samples, seed=cfg.run.split_seed)
    root = os.path.join(out_dir, "data")
    manifest = write_dataset(root, {"train": train_set, "val": val_set, "test": test_set})
    fractions = [s.fg_fraction for s in samples]
    return {
        "success": True,
        "data": {
            "root": root,
            "manifest": manifest,
            "counts": [len(train_set), len(val_set), len(test_set)],
            "fg_fraction_mean": float(np.mean(fractions)),
        },
    }


def train_model(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """Trains cfg.loss and writes checkpoints/model.sgnt plus train_log.csv."""
    train_set, val_set, _ = load_splits(cfg)
    (result,) = run_points([TrainPoint(cfg.loss.name, cfg.loss, cfg, train_set, val_set)])
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    checkpoint = os.path.join(out_dir, "checkpoints", "model.sgnt")
    save_checkpoint(checkpoint, result.params)
    result.log.write_csv(os.path.join(out_dir, "train_log.csv"))
    return {
        "success": True,
        "data": {
            "checkpoint": checkpoint,
            "epochs": len(result.log),
            "stop_reason": result.log.stop_reason.value,
        },
    }


def _require_checkpoint(cfg: ExperimentConfig) -> ParameterSet:
    if not cfg.run.checkpoint:
        raise FileNotFoundError("run.checkpoint is not set")
    if not os.path.exists(cfg.run.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {cfg.run.checkpoint}")
    return load_checkpoint(cfg.run.checkpoint)


def eval_model(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """
    Evaluates run.checkpoint on the test split at run.threshold.

    Writes metrics.csv, histogram.csv and predictions/NNNN.pfm.
    """
    params = _require_checkpoint(cfg)
    _, _, test_set = load_splits(cfg)
    maps = prediction_maps(cfg, params, test_set)
    report = evaluate_maps(cfg, maps)

    os.makedirs(os.path.join(out_dir, "predictions"), exist_ok=True)
    for index, pred_map in enumerate(maps):
        write_pfm(os.path.join(out_dir, "predictions", f"{index:04d}.pfm"), pred_map.fg_prob)
    row = report.to_row(dataset=cfg.run.dataset_name, loss=cfg.loss.name, threshold=cfg.run.threshold)
    write_rows_csv([row], os.path.join(out_dir, "metrics.csv"))
    write_rows_csv(histogram_rows(maps, cfg.run.hist_bins), os.path.join(out_dir, "histogram.csv"))
    return {"success": True, "data": {name: getattr(report, name) for name in METRIC_NAMES}}


def sweep_gamma(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """
    Trains DSC++ once per gamma with shared seeds and evaluates each on the test split.

    Writes sweep.csv (one row per gamma), histograms.csv, a checkpoint per
    gamma and a heatmap of the first test image per gamma.
    """
    train_set, val_set, test_set = load_splits(cfg)
    points = [
        TrainPoint(
            f"gamma={gamma:g}",
            LossConfig(kind=LossKind.DSCPP, gamma=gamma, smooth=cfg.loss.smooth),
            cfg,
            train_set,
            val_set,
        )
        for gamma in cfg.run.gammas
    ]
    results = run_points(points, cfg.run.workers)

    os.makedirs(os.path.join(out_dir, "heatmaps"), exist_ok=True)
    rows, hist = [], []
    for gamma, result in zip(cfg.run.gammas, results):
        tag = f"gamma_{_file_tag(gamma)}"
        _save_point(out_dir, result, tag)
        maps = prediction_maps(cfg, result.params, test_set)
        report = evaluate_maps(cfg, maps)
        rows.append(report.to_row(gamma=gamma))
        hist += histogram_rows(maps, cfg.run.hist_bins, gamma=gamma)
        write_ppm(os.path.join(out_dir, "heatmaps", f"{tag}.ppm"), heatmap_rgb(maps[0].fg_prob))
        logger.info(f"gamma {gamma:g}: nll {report.nll:.4f} dice {report.dice:.4f}")

    write_rows_csv(rows, os.path.join(out_dir, "sweep.csv"))
    write_rows_csv(hist, os.path.join(out_dir, "histograms.csv"))
    return {"success": True, "data": {"points": len(rows), "nll": [r["nll"] for r in rows]}}


def sweep_threshold(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """
    Evaluates run.checkpoint at every threshold in run.thresholds.

    Writes sweep.csv (one row per threshold) and, per threshold, an overlay of
    the first test image under overlays/.
    """
    params = _require_checkpoint(cfg)
    _, _, test_set = load_splits(cfg)
    maps = prediction_maps(cfg, params, test_set)

    os.makedirs(os.path.join(out_dir, "overlays"), exist_ok=True)
    rows = []
    for threshold in cfg.run.thresholds:
        report = evaluate_maps(cfg, maps, threshold)
        rows.append(report.to_row(threshold=threshold))
        overlay = overlay_rgb(maps[0], threshold)
        write_ppm(os.path.join(out_dir, "overlays", f"T_{_file_tag(threshold)}.ppm"), overlay)

    write_rows_csv(rows, os.path.join(out_dir, "sweep.csv"))
    recalls = [r["recall"] for r in rows]
    return {
        "success": True,
        "data": {"points": len(rows), "recall_std": float(np.std(recalls))},
    }


def compare_losses(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """
    Trains every loss in run.losses with shared seeds and compares them.

    Writes metrics.csv (means with bootstrap CIs per loss) and
    significance.csv (pairwise rank-sum tests over per-image NLL and Dice).
    """
    train_set, val_set, test_set = load_splits(cfg)
    losses = [parse_loss_name(name, smooth=cfg.loss.smooth) for name in cfg.run.losses]
    points = [TrainPoint(loss.name, loss, cfg, train_set, val_set) for loss in losses]
    results = run_points(points, cfg.run.workers)

    rows = []
    per_image: Dict[str, Dict[str, np.ndarray]] = {name: {} for name in SIGNIFICANCE_METRICS}
    for result in results:
        _save_point(out_dir, result, result.label.replace("+", "p"))
        maps = prediction_maps(cfg, result.params, test_set)
        report = evaluate_maps(cfg, maps)
        rows.append(report.to_row(dataset=cfg.run.dataset_name, loss=result.label))
        for name in SIGNIFICANCE_METRICS:
            per_image[name][result.label] = report.per_image[name]
        logger.info(f"{result.label}: nll {report.nll:.4f} dice {report.dice:.4f}")

    write_rows_csv(rows, os.path.join(out_dir, "metrics.csv"))
    notes = []
    frames = []
    if len(results) >= 2 and len(test_set) >= 3:
        frames = [significance_matrix(per_image[name], name) for name in SIGNIFICANCE_METRICS]
    else:
        notes.append("significance skipped: needs two losses and three test images")
        logger.warning(notes[-1])
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["metric", "loss_a", "loss_b", "statistic", "p_value", "significant"]
    )
    table.to_csv(os.path.join(out_dir, "significance.csv"), index=False, float_format="%.6g")
    return {"success": True, "data": {"losses": [r.label for r in results]}, "notes": notes}


def render_heatmap_command(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """Renders run.prediction to heatmaps/<name>.ppm."""
    if not cfg.run.prediction:
        raise FileNotFoundError("run.prediction is not set")
    os.makedirs(os.path.join(out_dir, "heatmaps"), exist_ok=True)
    name = os.path.splitext(os.path.basename(cfg.run.prediction))[0]
    path = render_heatmap(cfg.run.prediction, os.path.join(out_dir, "heatmaps", f"{name}.ppm"))
    return {"success": True, "data": {"heatmap": path}}


COMMAND_HANDLERS = {
    "gen-data": gen_data,
    "train": train_model,
    "eval": eval_model,
    "sweep-gamma": sweep_gamma,
    "sweep-threshold": sweep_threshold,
    "compare-losses": compare_losses,
    "render-heatmap": render_heatmap_command,
}
