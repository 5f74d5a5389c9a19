"""
Segmentation losses on soft predictions: CE, DSC, DSC++, mCE, Combo,
Tversky, Focal Tversky and Unified Focal, plus the "++" variants that raise
every per-pixel false-positive and false-negative term to an exponent.

All losses take a LabelledBatch whose channel 0 is the foreground and
channel 1 the background, and return a scalar GraphNode.

Usage:
    from losses import LossConfig, LabelledBatch, make_loss
    loss_fn = make_loss(LossConfig.defaults("Tversky", plusplus=True))
    value = loss_fn(LabelledBatch.from_mask(probs, mask))
"""
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, Tuple

import numpy as np

from autodiff import GraphNode, ShapeError, Tensor, as_node, log, power, reduce_sum, take_channel, tensor
from errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_SMOOTH = 1e-6


class LossKind(str, Enum):
    CE = "CE"
    MCE = "mCE"
    DSC = "DSC"
    MEAN_DSC = "MeanDSC"
    DSCPP = "DSCpp"
    COMBO = "Combo"
    TVERSKY = "Tversky"
    FOCAL_TVERSKY = "FocalTversky"
    UNIFIED_FOCAL = "UnifiedFocal"


# Hyper-parameters per loss; anything not listed keeps the dataclass default.
KIND_DEFAULTS: Dict[LossKind, Dict[str, float]] = {
    LossKind.DSCPP: {"gamma": 2.0},
    LossKind.TVERSKY: {"alpha": 0.3, "beta": 0.7},
    LossKind.FOCAL_TVERSKY: {"alpha": 0.3, "beta": 0.7, "gamma": 4.0 / 3.0},
    LossKind.COMBO: {"alpha": 0.5, "beta": 0.5},
    LossKind.MCE: {"beta": 0.5},
    LossKind.UNIFIED_FOCAL: {"gamma": 0.1, "delta": 0.6, "lam": 0.5},
}

# Losses without a region term have nothing to substitute.
NO_REGION_TERM = (LossKind.CE, LossKind.MCE)


@dataclass(frozen=True)
class LossConfig:
    """
    Selects a loss and holds its hyper-parameters.

    gamma is the loss's own focal parameter (the FP/FN exponent for DSCpp);
    pp_gamma is the exponent used when plusplus substitutes DSC++ terms.
    """
    kind: LossKind = LossKind.DSC
    plusplus: bool = False
    gamma: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    delta: float = 0.6
    lam: float = 0.5
    smooth: float = DEFAULT_SMOOTH
    pp_gamma: float = 2.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", LossKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown loss kind '{self.kind}'")
        for field in ("alpha", "beta", "delta", "lam"):
            value = getattr(self, field)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"loss.{field} must lie in [0, 1], got {value}")
        if self.kind == LossKind.UNIFIED_FOCAL:
            if self.gamma < 0:
                raise ConfigError(f"loss.gamma must be >= 0 for UnifiedFocal, got {self.gamma}")
        elif self.gamma <= 0:
            raise ConfigError(f"loss.gamma must be > 0, got {self.gamma}")
        if self.pp_gamma <= 0:
            raise ConfigError(f"loss.pp_gamma must be > 0, got {self.pp_gamma}")
        if self.smooth < 0:
            raise ConfigError(f"loss.smooth must be >= 0, got {self.smooth}")
        if self.plusplus and self.kind in NO_REGION_TERM:
            raise ConfigError(f"{self.kind.value} has no region term to substitute")

    @classmethod
    def defaults(cls, kind, **overrides) -> "LossConfig":
        """Config for kind with its published hyper-parameters, then overrides applied."""
        try:
            kind = LossKind(kind)
        except ValueError:
            raise ConfigError(f"unknown loss kind '{kind}'")
        values = dict(KIND_DEFAULTS.get(kind, {}))
        values.update(overrides)
        return cls(kind=kind, **values)

    @property
    def name(self) -> str:
        if self.kind == LossKind.DSCPP:
            return "DSC++"
        return self.kind.value + ("++" if self.plusplus else "")

    def as_dict(self) -> Dict[str, object]:
        values = asdict(self)
        values["kind"] = self.kind.value
        return values


def parse_loss_name(name: str, **overrides) -> LossConfig:
    """
    Turns a loss-list entry such as "Tversky++" or "DSC++" into a config.

    Parameters:
        name (str): Loss kind, optionally suffixed with "++".
        overrides: Extra LossConfig fields.

    Returns:
        LossConfig: The configured loss.
    """
    label = name.replace(" ", "")
    if label in ("DSC++", "DSCpp"):
        return LossConfig.defaults(LossKind.DSCPP, **overrides)
    plusplus = label.endswith("++")
    return LossConfig.defaults(label[:-2] if plusplus else label, plusplus=plusplus, **overrides)


#=========================================== BATCH ===========================================

@dataclass
class LabelledBatch:
    """Soft prediction probs [2, ...] (channel 0 foreground) with its one-hot truth."""
    probs: GraphNode
    onehot: Tensor

    def __post_init__(self):
        self.probs = as_node(self.probs)
        self.onehot = tensor(self.onehot)
        if self.probs.shape[0] != 2:
            raise ShapeError(f"binary losses expect 2 channels, got shape {self.probs.shape}")
        if self.onehot.shape != self.probs.shape:
            raise ShapeError(f"onehot shape {self.onehot.shape} does not match probs {self.probs.shape}")

    @classmethod
    def from_mask(cls, probs, mask) -> "LabelledBatch":
        """Builds the one-hot [fg, bg] stack from a binary mask."""
        mask = np.asarray(mask, dtype=np.float64)
        return cls(probs, np.stack([mask, 1.0 - mask]))

    @property
    def n_pixels(self) -> int:
        return int(self.onehot[0].size)

    def channels(self) -> Tuple[GraphNode, GraphNode, Tensor, Tensor]:
        return take_channel(self.probs, 0), take_channel(self.probs, 1), self.onehot[0], self.onehot[1]


LossFn = Callable[[LabelledBatch], GraphNode]


def _focal(x: GraphNode, exponent: float) -> GraphNode:
    return x if exponent == 1.0 else power(x, exponent)


def _overlap_terms(p_pos, p_neg, y_pos, y_neg, exponent: float):
    """Soft TP plus per-pixel-exponentiated FP and FN sums for the positive class."""
    tp = reduce_sum(p_pos * y_pos)
    fp = reduce_sum(_focal(p_pos * y_neg, exponent))
    fn = reduce_sum(_focal(p_neg * y_pos, exponent))
    return tp, fp, fn


def _dice_score(batch: LabelledBatch, exponent: float, smooth: float) -> GraphNode:
    p0, p1, y0, y1 = batch.channels()
    tp, fp, fn = _overlap_terms(p0, p1, y0, y1, exponent)
    return (2.0 * tp + smooth) / (2.0 * tp + fp + fn + smooth)


def _tversky(tp, fp, fn, w_fp, w_fn, smooth) -> GraphNode:
    return (tp + smooth) / (tp + w_fp * fp + w_fn * fn + smooth)


#=========================================== DISTRIBUTION LOSSES ===========================================

def ce_loss(batch: LabelledBatch) -> GraphNode:
    """-(1/N) sum_i sum_c y_ic log p_ic over the N pixels of one image."""
    return -reduce_sum(batch.onehot * log(batch.probs)) / batch.n_pixels


def mce_loss(batch: LabelledBatch, beta: float) -> GraphNode:
    """
    Modified binary CE on the foreground probability; beta weights the
    foreground term and 1 - beta the background term.
    """
    p0, _, y0, _ = batch.channels()
    positive = reduce_sum(y0 * log(p0))
    negative = reduce_sum((1.0 - y0) * log(1.0 - p0))
    return -(beta * positive + (1.0 - beta) * negative) / batch.n_pixels


#=========================================== REGION LOSSES ===========================================

def dsc_loss(batch: LabelledBatch, smooth: float = DEFAULT_SMOOTH) -> GraphNode:
    """1 - (2TP + eps) / (2TP + FP + FN + eps) with soft counts."""
    return 1.0 - _dice_score(batch, 1.0, smooth)


def dscpp_loss(batch: LabelledBatch, gamma: float, smooth: float = DEFAULT_SMOOTH) -> GraphNode:
    """
    DSC loss with every per-pixel FP and FN product raised to gamma before
    summation. gamma = 1 builds exactly the dsc_loss graph.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    return 1.0 - _dice_score(batch, gamma, smooth)


def mean_class_dsc_loss(batch: LabelledBatch, smooth: float = DEFAULT_SMOOTH, exponent: float = 1.0) -> GraphNode:
    """1 minus the Dice score averaged over foreground and background."""
    p0, p1, y0, y1 = batch.channels()
    scores = []
    for p_pos, p_neg, y_pos, y_neg in ((p0, p1, y0, y1), (p1, p0, y1, y0)):
        tp, fp, fn = _overlap_terms(p_pos, p_neg, y_pos, y_neg, exponent)
        scores.append((2.0 * tp + smooth) / (2.0 * tp + fp + fn + smooth))
    return 1.0 - (scores[0] + scores[1]) / 2.0


def tversky_index(
    batch: LabelledBatch,
    w_fp: float,
    w_fn: float,
    exponent: float = 1.0,
    smooth: float = DEFAULT_SMOOTH,
) -> GraphNode:
    """
    (TP + eps) / (TP + w_fp * sum (p0 y1)^e + w_fn * sum (p1 y0)^e + eps).

    exponent = 1 is the plain index; exponent > 1 is the ++ substitution.
    """
    if w_fp < 0 or w_fn < 0:
        raise ConfigError(f"Tversky weights must be >= 0, got {w_fp}, {w_fn}")
    p0, p1, y0, y1 = batch.channels()
    tp, fp, fn = _overlap_terms(p0, p1, y0, y1, exponent)
    return _tversky(tp, fp, fn, w_fp, w_fn, smooth)


def _substitution_exponent(cfg: LossConfig) -> float:
    return cfg.pp_gamma if cfg.plusplus else 1.0


def tversky_loss(batch: LabelledBatch, cfg: LossConfig) -> GraphNode:
    return 1.0 - tversky_index(batch, cfg.alpha, cfg.beta, _substitution_exponent(cfg), cfg.smooth)


def focal_tversky_loss(batch: LabelledBatch, cfg: LossConfig) -> GraphNode:
    """(1 - TI)^(1/gamma) for the foreground class."""
    ti = tversky_index(batch, cfg.alpha, cfg.beta, _substitution_exponent(cfg), cfg.smooth)
    return _focal(1.0 - ti, 1.0 / cfg.gamma)


def combo_loss(batch: LabelledBatch, cfg: LossConfig) -> GraphNode:
    """alpha * mCE - (1 - alpha) * DSC score. Negative values are expected."""
    score = _dice_score(batch, _substitution_exponent(cfg), cfg.smooth)
    return cfg.alpha * mce_loss(batch, cfg.beta) - (1.0 - cfg.alpha) * score


def unified_focal_loss(batch: LabelledBatch, cfg: LossConfig) -> GraphNode:
    """
    lambda * asymmetric focal + (1 - lambda) * asymmetric focal Tversky.

    The focal term keeps plain log-loss on foreground pixels and suppresses
    easy background pixels by (1 - p_bg)^gamma. The Tversky term enhances the
    foreground index by the exponent 1 - gamma and leaves the background
    index linear.
    """
    p0, p1, y0, y1 = batch.channels()
    n = batch.n_pixels
    delta, gamma = cfg.delta, cfg.gamma
    rare = reduce_sum(y0 * log(p0))
    common = reduce_sum(y1 * _focal(1.0 - p1, gamma) * log(p1))
    focal = -(delta / n) * rare - ((1.0 - delta) / n) * common

    exponent = _substitution_exponent(cfg)
    ti_fg = _tversky(*_overlap_terms(p0, p1, y0, y1, exponent), delta, 1.0 - delta, cfg.smooth)
    ti_bg = _tversky(*_overlap_terms(p1, p0, y1, y0, exponent), delta, 1.0 - delta, cfg.smooth)
    focal_tversky = _focal(1.0 - ti_fg, 1.0 - gamma) + (1.0 - ti_bg)

    return cfg.lam * focal + (1.0 - cfg.lam) * focal_tversky


#=========================================== FACTORY ===========================================

def make_loss(cfg: LossConfig) -> LossFn:
    """
    Returns the differentiable loss selected by cfg.

    Parameters:
        cfg (LossConfig): Kind, hyper-parameters and the plusplus flag.

    Returns:
        Callable: LabelledBatch -> scalar GraphNode.
    """
    exponent = _substitution_exponent(cfg)
    builders: Dict[LossKind, LossFn] = {
        LossKind.CE: ce_loss,
        LossKind.MCE: lambda batch: mce_loss(batch, cfg.beta),
        LossKind.DSC: lambda batch: dscpp_loss(batch, exponent, cfg.smooth),
        LossKind.MEAN_DSC: lambda batch: mean_class_dsc_loss(batch, cfg.smooth, exponent),
        LossKind.DSCPP: lambda batch: dscpp_loss(batch, cfg.gamma, cfg.smooth),
        LossKind.TVERSKY: lambda batch: tversky_loss(batch, cfg),
        LossKind.FOCAL_TVERSKY: lambda batch: focal_tversky_loss(batch, cfg),
        LossKind.COMBO: lambda batch: combo_loss(batch, cfg),
        LossKind.UNIFIED_FOCAL: lambda batch: unified_focal_loss(batch, cfg),
    }
    if cfg.kind not in builders:
        raise ConfigError(f"no loss registered for kind '{cfg.kind}'")
    logger.debug(f"make_loss: {cfg.name} {cfg.as_dict()}")
    return builders[cfg.kind]
