import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cswin_detect.losses import (AWL_EPS, AutomaticWeightedLoss, awl_combine, contrastive_loss,
                                 dice_focal_loss, focal_loss, generalized_dice_loss, one_hot_mask,
                                 restoration_loss, rotation_loss, soft_dice)
from cswin_detect.numeric import ShapeError, numpy_rng


def _t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


# -- contrastive -------------------------------------------------------------

def test_contrastive_symmetric_case_is_ln3():
    z = torch.ones(4, 8, dtype=torch.float64)
    assert abs(float(contrastive_loss(z, 0.5)) - math.log(3)) < 1e-6


def test_contrastive_identical_positives_orthogonal_negatives():
    z = _t([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]])
    expected = -math.log(math.e / (math.e + 2))
    assert abs(float(contrastive_loss(z, 1.0)) - expected) < 1e-12


def test_contrastive_single_pair_is_zero():
    z = _t([[1.0, 2.0], [-3.0, 0.5]])
    assert float(contrastive_loss(z)) == 0.0


def _loop_nt_xent(z, t):
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    total = 0.0
    for i in range(n):
        j = i ^ 1
        num = math.exp(z[i] @ z[j] / t)
        den = sum(math.exp(z[i] @ z[k] / t) for k in range(n) if k != i)
        total += -math.log(num / den)
    return total / n


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(0.1, 2.0), st.integers(0, 2**31 - 1))
def test_contrastive_loop_oracle_nonnegative_and_rotation_invariant(pairs, dim, t, seed):
    g = numpy_rng(seed)
    z = g.normal(size=(2 * pairs, dim))
    loss = float(contrastive_loss(_t(z), t))
    assert loss >= 0
    assert abs(loss - _loop_nt_xent(z, t)) < 1e-9
    q, _ = np.linalg.qr(g.normal(size=(dim, dim)))
    assert abs(float(contrastive_loss(_t(z @ q), t)) - loss) < 1e-9


def test_contrastive_rejects_odd_batch():
    with pytest.raises(ShapeError):
        contrastive_loss(torch.ones(3, 4))


# -- restoration -------------------------------------------------------------

def test_restoration_values():
    x = _t(numpy_rng(1).normal(size=(2, 3, 4, 4, 2)))
    assert float(restoration_loss(x, x)) == 0.0
    assert abs(float(restoration_loss(x + 0.5, x)) - 0.5) < 1e-12
    with pytest.raises(ShapeError):
        restoration_loss(x, x[:1])


def test_restoration_loop_oracle():
    g = numpy_rng(2)
    a, b = g.normal(size=(2, 3, 3, 2, 2)), g.normal(size=(2, 3, 3, 2, 2))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(float(restoration_loss(_t(a), _t(b))) - ref) < 1e-6


# -- rotation -----------------------------------------------------------------

def test_rotation_uniform_logits_are_ln4():
    loss = rotation_loss(torch.zeros(5, 4, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 0]))
    assert abs(float(loss) - math.log(4)) < 1e-6


def test_rotation_loss_vanishes_with_margin():
    labels = torch.tensor([0, 3, 1])
    prev = math.inf
    for margin in (1.0, 5.0, 20.0, 60.0):
        logits = torch.nn.functional.one_hot(labels, 4).double() * margin
        cur = float(rotation_loss(logits, labels))
        assert cur < prev
        prev = cur
    assert prev < 1e-20


def test_rotation_loop_oracle_and_validation():
    g = numpy_rng(3)
    logits, labels = g.normal(size=(7, 4)), g.integers(0, 4, 7)
    ref = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    assert abs(float(rotation_loss(_t(logits), torch.from_numpy(labels))) - ref) < 1e-6
    with pytest.raises(ValueError):
        rotation_loss(_t(logits), torch.full((7,), 4))
    with pytest.raises(ShapeError):
        rotation_loss(_t(logits[:, :3]), torch.from_numpy(labels))


# -- automatic weighted loss -------------------------------------------------

def test_awl_at_unit_coefficients():
    a, b, d = 0.7, 2.3, 0.05
    got = awl_combine(*(torch.tensor(v, dtype=torch.float64) for v in (a, b, d)), c=torch.ones(3, dtype=torch.float64))
    assert abs(float(got) - (0.5 * (a + b + d) + math.log(8))) < 1e-6


def test_awl_module_init_and_equal_weight_offset():
    awl = AutomaticWeightedLoss(3).double()
    assert torch.allclose(awl.coefficients, torch.ones(3, dtype=torch.float64), atol=1e-6)
    losses = [torch.tensor(v, dtype=torch.float64) for v in (1.0, 0.4, 3.0)]
    # at c = 1 the weighted loss is half the equal-weight sum plus ln 8
    assert abs(float(awl(*losses).detach()) - (0.5 * sum(map(float, losses)) + math.log(8))) < 1e-6


@pytest.mark.parametrize("c1,l_cl", [(1.0, 0.8), (0.3, 2.0), (2.5, 0.1)])
def test_awl_gradient_closed_form_and_finite_difference(c1, l_cl):
    c = torch.tensor([c1, 1.3, 0.7], dtype=torch.float64, requires_grad=True)
    losses = [torch.tensor(v, dtype=torch.float64) for v in (l_cl, 0.5, 1.5)]
    awl_combine(*losses, c=c).backward()
    closed = -l_cl / c1 ** 3 + 2 * c1 / (1 + c1 ** 2)
    assert abs(float(c.grad[0]) - closed) < 1e-6
    h = 1e-6
    f = lambda x: float(awl_combine(*losses, c=torch.tensor([x, 1.3, 0.7], dtype=torch.float64)))
    assert abs((f(c1 + h) - f(c1 - h)) / (2 * h) - closed) < 1e-6


@pytest.mark.parametrize("c1", [0.2, 1.0, 3.0])
def test_awl_stationary_point(c1):
    l_cl = 2 * c1 ** 4 / (1 + c1 ** 2)
    c = torch.tensor([c1, 1.0, 1.0], dtype=torch.float64, requires_grad=True)
    awl_combine(torch.tensor(l_cl, dtype=torch.float64), torch.tensor(1.0), torch.tensor(1.0), c=c).backward()
    assert abs(float(c.grad[0])) < 1e-12


def test_awl_coefficients_stay_positive():
    awl = AutomaticWeightedLoss(3)
    with torch.no_grad():
        awl.raw.fill_(-200.0)
    assert torch.all(awl.coefficients >= AWL_EPS)
    with pytest.raises(ValueError):
        awl_combine(torch.tensor(1.0), c=torch.ones(3))


# -- segmentation losses -----------------------------------------------------

def _probs(seed, shape=(2, 2, 4, 3, 3)):
    g = numpy_rng(seed)
    return torch.softmax(_t(g.normal(size=shape)), 1), torch.from_numpy(g.random(shape[:1] + shape[2:]) < 0.3).long()


def test_perfect_prediction_has_near_zero_loss():
    _, target = _probs(0)
    probs = one_hot_mask(target).double()
    assert float(dice_focal_loss(probs, target)) < 1e-3
    assert float(soft_dice(probs[:, 1], target.double())) == pytest.approx(1.0)


def test_gamma0_lambda0_is_cross_entropy_via_rotation_machinery():
    probs, target = _probs(1, (1, 2, 3, 2, 2))
    got = dice_focal_loss(probs, target, lam=0.0, gamma=0.0)
    # the same 2-class problem as 4-way logits whose extra classes have zero mass
    p = probs.movedim(1, -1).reshape(-1, 2)
    logits = torch.cat([p.log(), torch.full((len(p), 2), -1e300, dtype=torch.float64)], 1)
    ref = rotation_loss(logits, target.reshape(-1))
    assert abs(float(got) - float(ref)) < 1e-6


def _loop_dice_focal(p, t, lam, gamma, eps=1e-5):
    b, k = p.shape[:2]
    vox = [idx for idx in np.ndindex(*p.shape[2:])]
    vol = [sum(t[i, c][v] for i in range(b) for v in vox) for c in range(k)]
    present = [v > 0 for v in vol]
    w = [1 / v ** 2 if v > 0 else 0.0 for v in vol]
    wmax = max(w)
    w = [wi if pr else wmax for wi, pr in zip(w, present)]
    num = sum(w[c] * sum(p[i, c][v] * t[i, c][v] for i in range(b) for v in vox) for c in range(k))
    den = sum(w[c] * sum(p[i, c][v] + t[i, c][v] for i in range(b) for v in vox) for c in range(k))
    gdl = 1 - (2 * num + eps) / (den + eps)
    focal = 0.0
    for i in range(b):
        for v in vox:
            pt = sum(p[i, c][v] * t[i, c][v] for c in range(k))
            focal += -((1 - pt) ** gamma) * math.log(pt)
    focal /= b * len(vox)
    return lam * gdl + (1 - lam) * focal


@pytest.mark.parametrize("lam,gamma", [(0.5, 2.0), (1.0, 2.0), (0.2, 0.0), (0.7, 1.5)])
def test_dice_focal_loop_oracle(lam, gamma):
    probs, target = _probs(2)
    ref = _loop_dice_focal(probs.numpy(), one_hot_mask(target).double().numpy(), lam, gamma)
    assert abs(float(dice_focal_loss(probs, target, lam, gamma)) - ref) < 1e-5


def test_empty_target_is_finite_and_rewards_background():
    probs, _ = _probs(3)
    empty = torch.zeros(2, 4, 3, 3, dtype=torch.long)
    loss = dice_focal_loss(probs, empty)
    assert torch.isfinite(loss)
    assert float(dice_focal_loss(one_hot_mask(empty).double(), empty)) < 1e-3
    assert float(generalized_dice_loss(probs, one_hot_mask(empty).double())) > 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0, 4), st.integers(0, 2**31 - 1))
def test_dice_focal_nonnegative(lam, gamma, seed):
    probs, target = _probs(seed)
    assert float(dice_focal_loss(probs, target, lam, gamma)) >= -1e-12


def test_dice_focal_validation():
    probs, target = _probs(4)
    with pytest.raises(ValueError):
        dice_focal_loss(probs, target, lam=1.5)
    with pytest.raises(ValueError):
        dice_focal_loss(probs, target, gamma=-1)
    with pytest.raises(ShapeError):
        dice_focal_loss(probs, target[:, :2])


def test_focal_gamma_downweights_confident_voxels():
    probs, target = _probs(5)
    oh = one_hot_mask(target).double()
    assert float(focal_loss(probs, oh, 2.0)) < float(focal_loss(probs, oh, 0.0))
