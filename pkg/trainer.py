"""
Training loop: plain SGD, learning-rate reduction on a validation plateau,
early stopping with best-checkpoint return, and light augmentation.

Everything random is drawn from one generator seeded by TrainConfig.seed,
so equal configs give equal parameter trajectories.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import GraphNode, Tensor, backward, tensor
from errors import ConfigError
from losses import LabelledBatch, LossConfig, make_loss
from segnet import NetConfig, ParameterSet, ParamsLike, forward, init_params
from synthdata import Sample

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-8
TRAIN_LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "wall_ms"]

Model = Callable[[ParamsLike, Tensor], GraphNode]


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    plateau_patience: int = 25
    plateau_factor: float = 0.1
    early_stop_patience: int = 50
    max_epochs: int = 40
    batch_size: int = 1
    augment: bool = True
    aug_prob: float = 0.15
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"train.lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"train.plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("train patiences must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.max_epochs must be >= 0 and train.batch_size >= 1")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError(f"train.aug_prob must lie in [0, 1], got {self.aug_prob}")

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


class StopReason(str, Enum):
    EARLY_STOP = "early_stop"
    MAX_EPOCHS = "max_epochs"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    stop_reason: StopReason = StopReason.MAX_EPOCHS

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=TRAIN_LOG_COLUMNS)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")

    def best_epoch(self) -> Optional[EpochRecord]:
        """Epoch with the lowest validation loss (earliest on ties)."""
        if not self.records:
            return None
        return min(self.records, key=lambda r: (r.val_loss, r.epoch))

    def lr_values(self) -> List[float]:
        return [r.lr for r in self.records]


#=========================================== OPTIMISATION ===========================================

def sgd_step(params: ParameterSet, grads: Mapping[str, Tensor], lr: float) -> ParameterSet:
    """w <- w - lr * g for every parameter; no momentum, no weight decay."""
    if set(params.names()) != set(grads):
        missing = sorted(set(params.names()) ^ set(grads))
        raise KeyError(f"gradients do not match parameters: {missing}")
    updated = ParameterSet()
    for name, value in params.items():
        updated[name] = value - lr * np.asarray(grads[name])
    return updated


class PlateauScheduler:
    """Multiplies the learning rate by factor after `patience` epochs without improvement."""

    def __init__(self, lr: float, patience: int, factor: float):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.wait = 0
        self.reductions = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - IMPROVEMENT_TOL:
            self.best = val_loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            self.lr *= self.factor
            self.wait = 0
            self.reductions += 1
            logger.info(f"validation loss plateaued; learning rate reduced to {self.lr:.3g}")
        return self.lr


class EarlyStopper:
    """Signals a stop once `patience` epochs pass without a new best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - IMPROVEMENT_TOL:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


#=========================================== AUGMENTATION ===========================================

def flip_horizontal(image: Tensor, mask: Tensor) -> Tuple[Tensor, Tensor]:
    return tensor(image[..., ::-1]), tensor(mask[..., ::-1])


def flip_vertical(image: Tensor, mask: Tensor) -> Tuple[Tensor, Tensor]:
    return tensor(image[..., ::-1, :]), tensor(mask[..., ::-1, :])


def adjust_brightness(image: Tensor, factor: float) -> Tensor:
    return tensor(np.clip(image * factor, 0.0, 1.0))


def augment(
    image: Tensor,
    mask: Tensor,
    rng: np.random.Generator,
    prob: float = 0.15,
) -> Tuple[Tensor, Tensor]:
    """
    Independently, each with probability prob: horizontal mirror, vertical
    mirror (both applied to image and mask), brightness x U[0.5, 2] (image only).
    """
    if rng.random() < prob:
        image, mask = flip_horizontal(image, mask)
    if rng.random() < prob:
        image, mask = flip_vertical(image, mask)
    if rng.random() < prob:
        image = adjust_brightness(image, rng.uniform(0.5, 2.0))
    return image, mask


def normalize_image(image) -> Tensor:
    """Per-image z-score, then min-max rescaled into [0, 1]; constant images become 0."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    z = (x - x.mean()) / std if std > 0 else np.zeros_like(x)
    span = z.max() - z.min()
    return tensor((z - z.min()) / span if span > 0 else np.zeros_like(z))


#=========================================== LOOP ===========================================

def _prepared(samples: Sequence[Sample], normalize: bool) -> List[Tuple[Tensor, Tensor]]:
    return [(normalize_image(s.image) if normalize else tensor(s.image), tensor(s.mask)) for s in samples]


def dataset_loss(
    params: ParamsLike,
    pairs: Sequence[Tuple[Tensor, Tensor]],
    loss_fn,
    model: Model = forward,
) -> float:
    """Mean loss over (image, mask) pairs; parameters enter as constants and are not touched."""
    values = [float(loss_fn(LabelledBatch.from_mask(model(params, image), mask)).value) for image, mask in pairs]
    return float(np.mean(values))


def train(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    split: Tuple[Sequence[Sample], Sequence[Sample]],
    *,
    model: Model = forward,
    params: Optional[ParameterSet] = None,
) -> Tuple[ParameterSet, TrainLog]:
    """
    Trains from scratch (or from `params`) and returns the best-validation parameters.

    Parameters:
        net_cfg (NetConfig): Architecture and init seed; ignored when params is given.
        train_cfg (TrainConfig): Optimisation protocol.
        loss_cfg (LossConfig): Training loss.
        split: (train samples, validation samples), both non-empty.
        model: (params, image) -> probs GraphNode; the U-Net by default.
        params: Starting parameters; init_params(net_cfg) when None.

    Returns:
        tuple: (ParameterSet, TrainLog)
    """
    train_samples, val_samples = split
    if not train_samples or not val_samples:
        raise ValueError("train needs non-empty training and validation sets")
    params = init_params(net_cfg) if params is None else params.copy()
    log = TrainLog()
    if train_cfg.max_epochs == 0:
        return params, log

    loss_fn = make_loss(loss_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    train_pairs = _prepared(train_samples, train_cfg.normalize)
    val_pairs = _prepared(val_samples, train_cfg.normalize)
    scheduler = PlateauScheduler(train_cfg.lr0, train_cfg.plateau_patience, train_cfg.plateau_factor)
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    best_params, best_val = params, math.inf
    lr = train_cfg.lr0
    logger.info(
        f"training {loss_cfg.name} on {len(train_pairs)} images ({len(val_pairs)} val), "
        f"up to {train_cfg.max_epochs} epochs"
    )

    for epoch in range(train_cfg.max_epochs):
        started = time.perf_counter()
        order = rng.permutation(len(train_pairs))
        batch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            leaves = params.leaves()
            total = None
            members = order[start:start + train_cfg.batch_size]
            for i in members:
                image, mask = train_pairs[i]
                if train_cfg.augment:
                    image, mask = augment(image, mask, rng, train_cfg.aug_prob)
                term = loss_fn(LabelledBatch.from_mask(model(leaves, image), mask))
                total = term if total is None else total + term
            batch_loss = total / float(len(members))
            backward(batch_loss)
            params = sgd_step(params, {name: leaf.grad for name, leaf in leaves.items()}, lr)
            batch_losses.append(float(batch_loss.value))

        train_loss = float(np.mean(batch_losses))
        val_loss = dataset_loss(params, val_pairs, loss_fn, model)
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise FloatingPointError(f"loss became non-finite at epoch {epoch}")
        wall_ms = (time.perf_counter() - started) * 1000.0
        log.records.append(EpochRecord(epoch, train_loss, val_loss, lr, wall_ms))
        logger.debug(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} lr {lr:.3g}")

        if val_loss < best_val - IMPROVEMENT_TOL:
            best_params, best_val = params, val_loss
        lr = scheduler.step(val_loss)
        if stopper.step(val_loss):
            log.stop_reason = StopReason.EARLY_STOP
            logger.info(f"early stop after epoch {epoch}; best val loss {best_val:.5f}")
            break

    return best_params, log
