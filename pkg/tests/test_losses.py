import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossmod.losses import (
    SegLossConfig,
    dam_loss,
    dcm_loss,
    inverse_frequency_weights,
    seg_loss,
    soft_dice,
    soft_dice_terms,
    wasserstein_1d,
    weighted_ce,
)
from crossmod.tensor_nn import grad_check, softmax_channel

from oracles import brute_w1


def probs_from(rows):
    """(pixels, C) rows -> (1, C, 1, pixels) tensor."""
    return torch.tensor(rows, dtype=torch.float64).T.reshape(1, len(rows[0]), 1, len(rows))


def test_ce_perfect_prediction_is_zero():
    labels = torch.tensor([[[0, 1, 2]]])
    probs = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert weighted_ce(probs, labels, (1.0, 1.0, 1.0)).item() == 0.0


def test_ce_uniform_prediction():
    n = 12
    probs = torch.full((1, 5, 3, 4), 0.2, dtype=torch.float64)
    labels = torch.randint(0, 5, (1, 3, 4))
    assert weighted_ce(probs, labels, (1.0,) * 5).item() == pytest.approx(n * math.log(5))
    assert weighted_ce(probs, labels, (1.0,) * 5, reduction="mean").item() == pytest.approx(math.log(5))


def test_ce_two_pixel_hand_value():
    probs = probs_from([[0.7, 0.3], [0.2, 0.8]])
    labels = torch.tensor([[[0, 1]]])
    expected = -(math.log(0.7) + 2 * math.log(0.8))
    assert weighted_ce(probs, labels, (1.0, 2.0)).item() == pytest.approx(expected, rel=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError, match="labels"):
        weighted_ce(torch.full((1, 2, 1, 1), 0.5), torch.tensor([[[2]]]), (1.0, 1.0))


def test_dice_perfect_is_minus_c():
    labels = torch.tensor([[[0, 1, 2, 3, 4, 4]]])
    probs = torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).double()
    assert soft_dice(probs, labels).item() == pytest.approx(-5.0, abs=1e-5)


def test_dice_absent_class_term_is_zero():
    labels = torch.tensor([[[0, 0, 1]]])
    probs = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    terms = soft_dice_terms(probs, labels)
    assert terms[2].item() == 0.0
    assert torch.isfinite(terms).all()


def test_dice_four_pixel_hand_value():
    fg = [1.0, 1.0, 0.0, 0.0]
    probs = probs_from([[1 - p, p] for p in fg])
    labels = torch.tensor([[[1, 0, 0, 0]]])
    terms = soft_dice_terms(probs, labels)
    assert terms[1].item() == pytest.approx(2 / 3, abs=1e-6)
    assert terms[0].item() == pytest.approx(2 * 2 / (3 + 2), abs=1e-6)


def test_seg_loss_reductions():
    fg = [0.9, 0.6, 0.2, 0.1]
    probs = probs_from([[1 - p, p] for p in fg])
    labels = torch.tensor([[[1, 0, 0, 0]]])
    ce_hand = -(math.log(0.9) + math.log(0.4) + math.log(0.8) + math.log(0.9))
    dice_fg = 2 * 0.9 / (1 + sum(p * p for p in fg))
    bg = [1 - p for p in fg]
    dice_bg = 2 * (0.4 + 0.8 + 0.9) / (3 + sum(p * p for p in bg))
    cfg0 = SegLossConfig((1.0, 1.0), lam=0.0, reduction="sum")
    cfg1 = SegLossConfig((1.0, 1.0), lam=1.0, reduction="sum")
    assert seg_loss(probs, labels, cfg0).item() == weighted_ce(probs, labels, (1.0, 1.0)).item()
    assert seg_loss(probs, labels, cfg0).item() == pytest.approx(ce_hand, rel=1e-12)
    # eps=1e-6 in each Dice denominator
    assert seg_loss(probs, labels, cfg1).item() == pytest.approx(ce_hand - dice_fg - dice_bg, abs=1e-5)


def test_seg_loss_perfect_prediction():
    labels = torch.tensor([[[0, 1, 2, 3, 4]]])
    probs = torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).double()
    cfg = SegLossConfig((1.0,) * 5, lam=0.5)
    assert seg_loss(probs, labels, cfg).item() == pytest.approx(-0.5 * 5, abs=1e-5)


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_seg_loss_gradient(double, reduction):
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 3, 4, 4, generator=g)
    labels = torch.randint(0, 3, (2, 4, 4), generator=g)
    cfg = SegLossConfig((0.5, 1.0, 2.0), lam=1.0, reduction=reduction)
    rep = grad_check(lambda z: seg_loss(softmax_channel(z), labels, cfg), [logits])
    assert rep.passed, rep


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_ce_scales_with_weights(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    probs = softmax_channel(torch.randn(1, 3, 2, 3, generator=g, dtype=torch.float64))
    labels = torch.randint(0, 3, (1, 2, 3), generator=g)
    w = (0.3, 1.0, 2.5)
    base = weighted_ce(probs, labels, w).item()
    scaled = weighted_ce(probs, labels, tuple(alpha * v for v in w)).item()
    assert scaled == pytest.approx(alpha * base, rel=1e-9)


def test_dice_term_range():
    g = torch.Generator().manual_seed(5)
    probs = softmax_channel(torch.randn(2, 4, 5, 5, generator=g))
    labels = torch.randint(0, 4, (2, 5, 5), generator=g)
    terms = -soft_dice_terms(probs, labels)
    assert ((terms > -1) & (terms <= 0)).all()


def test_inverse_frequency_weights():
    lm = np.array([0] * 6 + [1] * 3 + [2] * 1)
    w = inverse_frequency_weights([lm], 3)
    inv = np.array([10 / 6, 10 / 3, 10 / 1])
    assert w == pytest.approx(tuple(inv / inv.mean()))
    assert np.mean(w) == pytest.approx(1.0)


class ConstCritic:
    def __init__(self, k):
        self.k = k

    def __call__(self, feats):
        return torch.full((next(iter(feats.values())).shape[0], 1), self.k) + 0 * next(iter(feats.values())).sum()


class TableCritic:
    """Returns stored per-sample outputs."""

    def __call__(self, feats):
        return feats[0].view(-1, 1)


def test_dam_loss_examples():
    x = torch.randn(3, 2, 4, 4, requires_grad=True)
    loss = dam_loss(ConstCritic(1.7), {0: x})
    assert loss.item() == pytest.approx(-1.7)
    loss.backward()
    assert torch.equal(x.grad, torch.zeros_like(x))
    assert dam_loss(TableCritic(), {0: torch.tensor([2.5])}).item() == -2.5
    assert dam_loss(TableCritic(), {0: torch.tensor([1.0, -1.0])}).item() == 0.0


def test_dcm_loss_examples():
    crit = TableCritic()
    assert dcm_loss(crit, {0: torch.tensor([1.0, 3.0])}, {0: torch.tensor([0.0, 0.0])}).item() == 2.0
    same = {0: torch.tensor([0.3, -1.2])}
    assert dcm_loss(crit, same, same).item() == 0.0


def test_dcm_loss_linear_critic_sign_flip():
    torch.manual_seed(0)
    lin = torch.nn.Linear(6, 1)

    def critic(f):
        return lin(f[0].flatten(1))

    g, s = {0: torch.randn(4, 6)}, {0: torch.randn(4, 6) + 1}
    before = dcm_loss(critic, g, s).item()
    with torch.no_grad():
        lin.weight.neg_()
        lin.bias.neg_()
    assert dcm_loss(critic, g, s).item() == pytest.approx(-before, rel=1e-6)
    # antisymmetric under swapping the batches
    assert dcm_loss(critic, s, g).item() == pytest.approx(before, rel=1e-6)


def test_wasserstein_examples():
    assert wasserstein_1d([1.0, 2.0], [2.0, 1.0]) == 0.0
    assert wasserstein_1d([0, 0], [1, 1]) == 1.0
    assert wasserstein_1d([0, 1, 2], [1, 2, 4]) == pytest.approx(4 / 3)
    assert brute_w1([0, 1, 2], [1, 2, 4]) == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        wasserstein_1d([1, 2], [1])


small = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=5)


@settings(max_examples=100, deadline=None)
@given(small, st.data())
def test_wasserstein_matches_assignment_enumeration(a, data):
    b = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=len(a), max_size=len(a)))
    assert wasserstein_1d(a, b) == pytest.approx(brute_w1(a, b), rel=1e-9, abs=1e-9)
