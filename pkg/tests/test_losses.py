"""
test_losses.py

Closed-form values on the standard two-pixel case, identity reductions,
configuration validation and gradient checks for every loss kind.
"""
import numpy as np
import pytest

from autodiff import constant, softmax_channels
from errors import ConfigError
from losses import (
    KIND_DEFAULTS,
    LabelledBatch,
    LossConfig,
    LossKind,
    ce_loss,
    combo_loss,
    dsc_loss,
    dscpp_loss,
    focal_tversky_loss,
    make_loss,
    mce_loss,
    mean_class_dsc_loss,
    parse_loss_name,
    tversky_index,
    tversky_loss,
    unified_focal_loss,
)
from autodiff import grad_check


def value(node) -> float:
    return float(node.value)


def batch_of(fg, truth) -> LabelledBatch:
    fg = np.asarray(fg, dtype=np.float64)
    return LabelledBatch.from_mask(np.stack([fg, 1.0 - fg]), truth)


def random_batch(rng, n=16) -> LabelledBatch:
    fg = rng.uniform(0.02, 0.98, size=n)
    truth = (rng.random(n) < 0.3).astype(float)
    truth[0] = 1.0
    return batch_of(fg, truth)


#=========================================== CLOSED FORM ===========================================

def test_ce_two_pixel(two_pixel_batch):
    assert value(ce_loss(two_pixel_batch)) == pytest.approx(0.28991, abs=1e-5)
    assert value(ce_loss(two_pixel_batch)) == pytest.approx(-0.5 * (np.log(0.8) + np.log(0.7)), abs=1e-12)


def test_ce_uniform_is_ln2():
    assert value(ce_loss(batch_of([0.5, 0.5, 0.5], [1.0, 0.0, 1.0]))) == pytest.approx(np.log(2.0))


def test_dsc_two_pixel(two_pixel_batch):
    assert value(dsc_loss(two_pixel_batch)) == pytest.approx(1 - 1.6 / 2.1, abs=1e-6)
    assert value(dsc_loss(two_pixel_batch)) == pytest.approx(0.238095, abs=1e-6)


def test_dscpp_two_pixel(two_pixel_batch):
    assert value(dscpp_loss(two_pixel_batch, 2.0)) == pytest.approx(0.075145, abs=1e-6)
    assert value(dscpp_loss(two_pixel_batch, 3.0)) == pytest.approx(0.021407, abs=1e-6)


def test_tversky_two_pixel(two_pixel_batch):
    cfg = LossConfig.defaults(LossKind.TVERSKY)
    assert value(tversky_index(two_pixel_batch, 0.3, 0.7)) == pytest.approx(0.8 / 1.03, abs=1e-6)
    assert value(tversky_loss(two_pixel_batch, cfg)) == pytest.approx(0.223301, abs=1e-6)


def test_focal_tversky_two_pixel(two_pixel_batch):
    cfg = LossConfig.defaults(LossKind.FOCAL_TVERSKY)
    assert cfg.gamma == pytest.approx(4.0 / 3.0)
    tversky = 1 - 0.8 / (0.8 + 0.3 * 0.3 + 0.7 * 0.2)
    expected = tversky ** (1 / cfg.gamma)
    assert value(focal_tversky_loss(two_pixel_batch, cfg)) == pytest.approx(expected, abs=1e-6)
    assert value(focal_tversky_loss(two_pixel_batch, cfg)) == pytest.approx(0.324839, abs=1e-6)


def test_combo_two_pixel_follows_formula(two_pixel_batch):
    cfg = LossConfig.defaults(LossKind.COMBO)
    ce = -0.5 * (np.log(0.8) + np.log(0.7))
    expected = 0.5 * (0.5 * ce) - 0.5 * (1.6 / 2.1)
    assert value(combo_loss(two_pixel_batch, cfg)) == pytest.approx(expected, abs=1e-6)
    assert value(combo_loss(two_pixel_batch, cfg)) == pytest.approx(-0.308475, abs=1e-6)


def test_combo_alpha_one_is_mce(two_pixel_batch):
    cfg = LossConfig(kind=LossKind.COMBO, alpha=1.0, beta=0.5)
    assert value(combo_loss(two_pixel_batch, cfg)) == pytest.approx(value(mce_loss(two_pixel_batch, 0.5)), abs=1e-15)


def test_combo_alpha_zero_perfect_is_minus_one():
    batch = batch_of([1.0, 0.0], [1.0, 0.0])
    cfg = LossConfig(kind=LossKind.COMBO, alpha=0.0)
    assert value(combo_loss(batch, cfg)) == pytest.approx(-1.0, abs=1e-9)


def test_unified_focal_matches_straight_line_transcription(two_pixel_batch):
    cfg = LossConfig.defaults(LossKind.UNIFIED_FOCAL)
    g, d, lam, eps = cfg.gamma, cfg.delta, cfg.lam, cfg.smooth
    p = np.array([0.8, 0.3])
    y = np.array([1.0, 0.0])
    n = 2
    focal = -(d / n) * np.sum(y * np.log(p)) - ((1 - d) / n) * np.sum((1 - y) * p ** g * np.log(1 - p))
    tp = np.sum(p * y)
    fp = np.sum(p * (1 - y))
    fn = np.sum((1 - p) * y)
    ti_fg = (tp + eps) / (tp + d * fp + (1 - d) * fn + eps)
    tp_b = np.sum((1 - p) * (1 - y))
    fp_b = np.sum((1 - p) * y)
    fn_b = np.sum(p * (1 - y))
    ti_bg = (tp_b + eps) / (tp_b + d * fp_b + (1 - d) * fn_b + eps)
    expected = lam * focal + (1 - lam) * ((1 - ti_fg) ** (1 - g) + (1 - ti_bg))
    assert value(unified_focal_loss(two_pixel_batch, cfg)) == pytest.approx(expected, abs=1e-12)


def test_unified_focal_collapses_to_foreground_ce():
    batch = batch_of([0.7, 0.9, 0.6], [1.0, 1.0, 1.0])
    cfg = LossConfig(kind=LossKind.UNIFIED_FOCAL, lam=1.0, delta=1.0, gamma=0.1)
    assert value(unified_focal_loss(batch, cfg)) == pytest.approx(value(ce_loss(batch)), abs=1e-12)


def test_unified_focal_gamma_zero_is_two_tversky_complements(two_pixel_batch):
    cfg = LossConfig(kind=LossKind.UNIFIED_FOCAL, lam=0.0, gamma=0.0, delta=0.6)
    swapped = LabelledBatch(constant(two_pixel_batch.probs.value[::-1]), two_pixel_batch.onehot[::-1])
    expected = (1 - value(tversky_index(two_pixel_batch, 0.6, 0.4))) + (1 - value(tversky_index(swapped, 0.6, 0.4)))
    assert value(unified_focal_loss(two_pixel_batch, cfg)) == pytest.approx(expected, abs=1e-12)


def test_perfect_prediction_losses_are_zero():
    batch = batch_of([1.0, 0.0, 1.0], [1.0, 0.0, 1.0])
    assert value(dsc_loss(batch)) == pytest.approx(0.0, abs=1e-12)
    assert value(make_loss(LossConfig.defaults(LossKind.TVERSKY, plusplus=True))(batch)) == pytest.approx(0.0, abs=1e-12)
    assert value(ce_loss(batch)) < 1e-6


def test_empty_truth_and_prediction_dsc_is_zero():
    assert value(dsc_loss(batch_of([0.0, 0.0], [0.0, 0.0]))) == pytest.approx(0.0, abs=1e-12)


#=========================================== IDENTITIES ===========================================

def test_dscpp_gamma_one_equals_dsc():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        batch = random_batch(rng, 8)
        assert abs(value(dscpp_loss(batch, 1.0)) - value(dsc_loss(batch))) <= 1e-12


def test_focal_tversky_gamma_one_equals_tversky(two_pixel_batch):
    cfg = LossConfig(kind=LossKind.FOCAL_TVERSKY, alpha=0.3, beta=0.7, gamma=1.0)
    assert value(focal_tversky_loss(two_pixel_batch, cfg)) == value(tversky_loss(two_pixel_batch, cfg))


def test_tversky_weights_reduce_to_dice_and_jaccard():
    rng = np.random.default_rng(1)
    for _ in range(50):
        batch = random_batch(rng)
        dsc = 1.0 - value(dsc_loss(batch, smooth=0.0))
        half = value(tversky_index(batch, 0.5, 0.5, smooth=0.0))
        unit = value(tversky_index(batch, 1.0, 1.0, smooth=0.0))
        assert half == pytest.approx(dsc, rel=1e-9)
        assert unit == pytest.approx(dsc / (2.0 - dsc), rel=1e-9)


def test_dsc_on_hard_predictions_matches_counts():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pred = (rng.random(32) < 0.4).astype(float)
        truth = (rng.random(32) < 0.4).astype(float)
        truth[0] = 1.0
        tp = np.sum(pred * truth)
        fp = np.sum(pred * (1 - truth))
        fn = np.sum((1 - pred) * truth)
        expected = 1 - 2 * tp / (2 * tp + fp + fn)
        assert value(dsc_loss(batch_of(pred, truth), smooth=0.0)) == pytest.approx(expected, abs=1e-12)


def test_plusplus_dsc_is_dscpp_gamma_two(two_pixel_batch):
    pp = make_loss(LossConfig(kind=LossKind.DSC, plusplus=True))
    direct = make_loss(LossConfig(kind=LossKind.DSCPP, gamma=2.0))
    assert value(pp(two_pixel_batch)) == value(direct(two_pixel_batch))


def test_mean_class_dsc_averages_both_classes(two_pixel_batch):
    fg_loss = value(dsc_loss(two_pixel_batch))
    swapped = LabelledBatch(constant(two_pixel_batch.probs.value[::-1]), two_pixel_batch.onehot[::-1])
    bg_loss = value(dsc_loss(swapped))
    assert value(mean_class_dsc_loss(two_pixel_batch)) == pytest.approx((fg_loss + bg_loss) / 2.0, abs=1e-12)


#=========================================== CONFIG ===========================================

def test_defaults_table():
    assert KIND_DEFAULTS[LossKind.TVERSKY] == {"alpha": 0.3, "beta": 0.7}
    uf = LossConfig.defaults(LossKind.UNIFIED_FOCAL)
    assert (uf.gamma, uf.delta, uf.lam) == (0.1, 0.6, 0.5)
    combo = LossConfig.defaults("Combo")
    assert (combo.alpha, combo.beta) == (0.5, 0.5)


@pytest.mark.parametrize(
    "overrides",
    [
        {"kind": LossKind.TVERSKY, "alpha": 1.5},
        {"kind": LossKind.DSCPP, "gamma": 0.0},
        {"kind": LossKind.CE, "plusplus": True},
        {"kind": LossKind.DSC, "smooth": -1.0},
        {"kind": "NotALoss"},
    ],
)
def test_invalid_configs_raise(overrides):
    with pytest.raises(ConfigError):
        LossConfig(**overrides)


def test_unified_focal_allows_gamma_zero():
    assert LossConfig(kind=LossKind.UNIFIED_FOCAL, gamma=0.0).gamma == 0.0


def test_parse_loss_names():
    assert parse_loss_name("DSC++").kind == LossKind.DSCPP
    assert parse_loss_name("DSC++").gamma == 2.0
    tv = parse_loss_name("Tversky++")
    assert tv.kind == LossKind.TVERSKY and tv.plusplus and tv.alpha == 0.3
    assert tv.name == "Tversky++"
    assert parse_loss_name("FocalTversky").name == "FocalTversky"
    with pytest.raises(ConfigError):
        parse_loss_name("CE++")


def test_batch_shape_checks():
    with pytest.raises(ValueError):
        LabelledBatch(np.ones((3, 4)) / 3.0, np.ones((3, 4)))
    with pytest.raises(ValueError):
        LabelledBatch(np.ones((2, 4)) / 2.0, np.ones((2, 5)))


#=========================================== GRADIENTS ===========================================

GRADIENT_CONFIGS = [
    LossConfig(kind=LossKind.CE),
    LossConfig(kind=LossKind.DSC),
    LossConfig(kind=LossKind.DSCPP, gamma=1.0),
    LossConfig(kind=LossKind.DSCPP, gamma=2.0),
    LossConfig(kind=LossKind.DSCPP, gamma=3.0),
    LossConfig.defaults(LossKind.MCE),
    LossConfig.defaults(LossKind.MEAN_DSC),
    LossConfig.defaults(LossKind.COMBO),
    LossConfig.defaults(LossKind.COMBO, plusplus=True),
    LossConfig.defaults(LossKind.TVERSKY),
    LossConfig.defaults(LossKind.TVERSKY, plusplus=True),
    LossConfig.defaults(LossKind.FOCAL_TVERSKY),
    LossConfig.defaults(LossKind.FOCAL_TVERSKY, plusplus=True),
    LossConfig.defaults(LossKind.UNIFIED_FOCAL),
    LossConfig.defaults(LossKind.UNIFIED_FOCAL, plusplus=True),
]


@pytest.mark.parametrize("cfg", GRADIENT_CONFIGS, ids=lambda c: f"{c.name}-g{c.gamma:g}")
def test_loss_gradients_match_finite_differences(cfg):
    rng = np.random.default_rng(7)
    loss_fn = make_loss(cfg)
    worst = 0.0
    for _ in range(50):
        logits = rng.normal(size=(2, 16))
        mask = (rng.random(16) < 0.3).astype(float)
        mask[0] = 1.0

        def builder(x, mask=mask):
            return loss_fn(LabelledBatch.from_mask(softmax_channels(x), mask))

        worst = max(worst, grad_check(builder, logits, step=1e-5))
    assert worst < 1e-4
