import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evidseg import losses
from evidseg.dirichlet_core import DirichletParams, belief
from evidseg.losses import (
    AnnealSchedule,
    LossWeights,
    dice_loss_class,
    kl_to_prior_pixel,
    kl_weight,
    loss_and_gradient,
    mse_loss_pixel,
    single_pixel_descent,
    total_loss,
    total_loss_gradient,
    wasserstein_loss_pixel,
)

from oracles import kl_monte_carlo

FULL_SCALE_SCHED = AnnealSchedule(40000, 48000, 0.15)


def _params(*alpha):
    return DirichletParams.from_alpha(alpha)


def _mse_exact(alpha, y):
    s = sum(alpha)
    p = [Fraction(a, s) for a in alpha]
    return sum((pi - (i == y)) ** 2 + pi * (1 - pi) / (s + 1) for i, pi in enumerate(p))


def test_mse_examples():
    assert mse_loss_pixel(belief(_params(1, 1, 1)), 3.0, (1, 0, 0)) == pytest.approx(5 / 6, abs=1e-15)
    got = mse_loss_pixel(belief(_params(5, 1, 1)), 7.0, (1, 0, 0))
    assert got == pytest.approx(float(_mse_exact((5, 1, 1), 0)), abs=1e-15)
    assert got == pytest.approx(6 / 49 + 22 / 392, abs=1e-15)
    # confident limit
    assert mse_loss_pixel(belief(_params(1e12, 1, 1)), 1e12 + 2, (1, 0, 0)) < 1e-11


@pytest.mark.parametrize("target", [(1, 1, 0), (0, 0, 0), (0.5, 0.5, 0), (1, 0)])
def test_mse_rejects_bad_target(target):
    with pytest.raises(ValueError):
        mse_loss_pixel(belief(_params(1, 1, 1)), 3.0, target)


def test_wasserstein_examples():
    b = belief(_params(5, 1, 1))
    assert wasserstein_loss_pixel(b, 0) == pytest.approx(2 / 7, abs=1e-15)
    u = belief(_params(1, 1, 1))
    for y in range(3):
        assert wasserstein_loss_pixel(u, y) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        wasserstein_loss_pixel(u, 3)
    with pytest.raises(ValueError):
        wasserstein_loss_pixel(u, -1)


def test_dice_examples():
    m = np.array([[1, 0], [1, 1]])
    assert dice_loss_class(m, m) == 0.0
    assert dice_loss_class(np.array([[1, 0], [0, 0]]), np.array([[0, 1], [0, 0]])) == 1.0
    assert dice_loss_class(np.full((2, 2), 0.5), np.array([[1, 0], [0, 0]])) == pytest.approx(2 / 3, abs=1e-15)
    assert dice_loss_class(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError):
        dice_loss_class(np.zeros((2, 2)), np.zeros((2, 3)))


def test_kl_examples():
    assert kl_to_prior_pixel(_params(1, 1, 1), 1.0) == pytest.approx(0.0, abs=1e-14)
    assert kl_to_prior_pixel(_params(1, 1, 1), 0.25) > 0
    with pytest.raises(ValueError):
        kl_to_prior_pixel(_params(1, 1, 1), 0.0)


def test_kl_matches_monte_carlo_example():
    rng = np.random.default_rng(11)
    mean, se = kl_monte_carlo((2.0, 1.0, 1.0), 1.0, 400_000, rng)
    closed = kl_to_prior_pixel(_params(2, 1, 1), 1.0)
    assert abs(closed - mean) < 3 * se
    assert closed == pytest.approx(0.26541, abs=5e-3)


def test_kl_weight_examples():
    assert kl_weight(40000, FULL_SCALE_SCHED) == 0.0
    assert kl_weight(44000, FULL_SCALE_SCHED) == 0.075
    assert kl_weight(80000, FULL_SCALE_SCHED) == 0.15
    assert kl_weight(0, FULL_SCALE_SCHED) == 0.0
    with pytest.raises(ValueError):
        AnnealSchedule(5, 5, 0.1)
    with pytest.raises(ValueError):
        AnnealSchedule(-1, 5, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 500), st.integers(0, 3000), st.floats(0, 2))
def test_kl_weight_monotone_and_continuous(start, span, t, plateau):
    s = AnnealSchedule(start, start + span, plateau)
    assert kl_weight(t, s) <= kl_weight(t + 1, s)
    assert 0.0 <= kl_weight(t, s) <= plateau
    assert kl_weight(start, s) == 0.0
    assert kl_weight(start + span, s) == plateau
    # one step into the ramp moves by exactly one slope unit
    assert kl_weight(start + 1, s) == pytest.approx(plateau / span)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0, 1)
    with pytest.raises(ValueError):
        LossWeights(float("inf"), 0, 0, 1)


def test_total_loss_examples():
    rng = np.random.default_rng(0)
    z = np.zeros((2, 3, 4, 5))
    y = rng.integers(0, 3, size=(2, 4, 5))
    b = total_loss(z, y, LossWeights(0, 0, 0, 1), FULL_SCALE_SCHED, 0)
    assert b.total == pytest.approx(5 / 6, abs=1e-14)
    b = total_loss(z, y, LossWeights(1, 0, 0, 0), FULL_SCALE_SCHED, 0)
    assert b.total == pytest.approx(2 / 3, abs=1e-14)
    logits = rng.normal(0, 2, size=(2, 3, 4, 5))
    b = total_loss(logits, y, LossWeights(1, 0.75, 0.15, 0.45), FULL_SCALE_SCHED, 0)
    assert b.kl_weight_used == 0.0 and b.kl > 0
    assert b.total == pytest.approx(b.wasserstein + 0.75 * b.dice + 0.45 * b.mse, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 60000))
def test_breakdown_invariant(seed, it):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 6))
    logits = rng.normal(0, 3, size=(2, c, 3, 3))
    y = rng.integers(0, c, size=(2, 3, 3))
    w = LossWeights(*rng.uniform(0.05, 1, size=4))
    b = total_loss(logits, y, w, FULL_SCALE_SCHED, it)
    expect = w.w_wasserstein * b.wasserstein + w.w_dice * b.dice + b.kl_weight_used * b.kl + w.w_mse * b.mse
    assert b.total == pytest.approx(expect, abs=1e-9)
    assert 0 <= b.wasserstein < 1


def test_rejects_bad_inputs():
    z = np.zeros((1, 3, 2, 2))
    with pytest.raises(ValueError):
        total_loss(z, np.full((1, 2, 2), 3), LossWeights(), FULL_SCALE_SCHED, 0)
    with pytest.raises(ValueError):
        total_loss(z, np.zeros((1, 2, 3), dtype=int), LossWeights(), FULL_SCALE_SCHED, 0)


def test_normalizers_against_pixel_functions():
    # batch means rebuilt from the per-pixel and per-class reference functions
    rng = np.random.default_rng(5)
    n, c, h, w = 2, 4, 3, 5
    logits = rng.normal(0, 2, size=(n, c, h, w))
    y = rng.integers(0, c, size=(n, h, w))
    b = total_loss(logits, y, LossWeights(1, 1, 1, 1), AnnealSchedule(0, 1, 1.0), 5)
    ws = ms = ks = 0.0
    prob = np.zeros((n, c, h, w))
    for i, r, q in itertools.product(range(n), range(h), range(w)):
        pr = _params(*(max(0.0, v) + 1 for v in logits[i, :, r, q]))
        bl = belief(pr)
        prob[i, :, r, q] = bl.probabilities
        ws += wasserstein_loss_pixel(bl, int(y[i, r, q]))
        ms += mse_loss_pixel(bl, pr.total, tuple(int(k == y[i, r, q]) for k in range(c)))
        ks += kl_to_prior_pixel(pr)
    ds = sum(dice_loss_class(prob[i, k], (y[i] == k).astype(int)) for i in range(n) for k in range(c))
    z = n * h * w
    assert b.wasserstein == pytest.approx(ws / z, abs=1e-13)
    assert b.mse == pytest.approx(ms / z, abs=1e-13)
    assert b.kl == pytest.approx(ks / z, abs=1e-12)
    assert b.dice == pytest.approx(ds / (n * c), abs=1e-13)


def test_gradient_example():
    logits = np.array([4.0, 0.0, 0.0]).reshape(1, 3, 1, 1) + np.array([0, 1e-300, 1e-300]).reshape(1, 3, 1, 1)
    # alpha = (5, 1, 1): dL_W/dalpha = (-2/49, 5/49, 5/49)
    g = total_loss_gradient(logits, np.zeros((1, 1, 1), int), LossWeights(1, 0, 0, 0), FULL_SCALE_SCHED, 0)
    assert g.ravel() == pytest.approx([-2 / 49, 5 / 49, 5 / 49], abs=1e-15)
    # the same point hit exactly at zero logits uses the zero subgradient
    g0 = total_loss_gradient(
        np.array([4.0, 0.0, 0.0]).reshape(1, 3, 1, 1), np.zeros((1, 1, 1), int), LossWeights(1, 0, 0, 0), FULL_SCALE_SCHED, 0
    )
    assert g0.ravel().tolist() == [-2 / 49, 0.0, 0.0]


def test_gradient_dead_zone_and_kl_minimum():
    rng = np.random.default_rng(1)
    neg = -rng.uniform(0.1, 3, size=(2, 4, 3, 3))
    y = rng.integers(0, 4, size=(2, 3, 3))
    g = total_loss_gradient(neg, y, LossWeights(1, 0.75, 0.15, 0.45), AnnealSchedule(0, 1, 0.15), 3)
    assert np.all(g == 0)
    tiny = np.full((1, 3, 1, 1), 1e-12)
    g = total_loss_gradient(tiny, np.zeros((1, 1, 1), int), LossWeights(0, 0, 1, 0), AnnealSchedule(0, 1, 1.0), 2)
    assert np.abs(g).max() < 1e-10


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("a0", [1.0, 0.25])
@pytest.mark.parametrize("weights", [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1), (1.0, 0.75, 0.15, 0.45)])
def test_gradient_finite_differences(weights, a0):
    rng = np.random.default_rng(hash((weights, a0)) % 2**32)
    logits = rng.normal(0.5, 2, size=(2, 3, 3, 2))
    logits[np.abs(logits) < 1e-3] = 0.5
    y = rng.integers(0, 3, size=(2, 3, 2))
    w = LossWeights(*weights)
    sched = AnnealSchedule(0, 1, w.w_kl)
    g = total_loss_gradient(logits, y, w, sched, 7, a0)
    num = _fd(lambda x: total_loss(x, y, w, sched, 7, a0).total, logits)
    assert g == pytest.approx(num, abs=2e-8, rel=1e-5)


def test_loss_and_gradient_consistent():
    rng = np.random.default_rng(2)
    logits = rng.normal(0, 2, size=(2, 4, 3, 3))
    y = rng.integers(0, 4, size=(2, 3, 3))
    b, g = loss_and_gradient(logits, y, LossWeights(), AnnealSchedule(0, 10, 0.15), 4)
    assert b == total_loss(logits, y, LossWeights(), AnnealSchedule(0, 10, 0.15), 4)
    assert np.array_equal(g, total_loss_gradient(logits, y, LossWeights(), AnnealSchedule(0, 10, 0.15), 4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 6))
    logits = rng.normal(0, 2, size=(2, c, 3, 4))
    y = rng.integers(0, c, size=(2, 3, 4))
    perm = rng.permutation(c)
    inv = np.argsort(perm)
    w = LossWeights(*rng.uniform(0.1, 1, size=4))
    s = AnnealSchedule(0, 2, w.w_kl)
    a = total_loss(logits, y, w, s, 5).total
    b = total_loss(logits[:, perm], inv[y], w, s, 5).total
    assert a == pytest.approx(b, abs=1e-9)


def test_wasserstein_range_for_vacuous_belief():
    for c in range(2, 7):
        z = np.zeros((1, c, 1, 1))
        b = total_loss(z, np.zeros((1, 1, 1), int), LossWeights(1, 0, 0, 0), FULL_SCALE_SCHED, 0)
        assert b.wasserstein == pytest.approx((c - 1) / c, abs=1e-15)


def test_simplex_geometry():
    mse = single_pixel_descent(LossWeights(0, 0, 0, 1))
    w_kl = single_pixel_descent(LossWeights(1, 0, 0.15, 0))
    assert mse.uncertainty < 0.05
    assert w_kl.uncertainty > mse.uncertainty
    # both runs still favour the target class
    assert np.argmax(mse.probabilities) == 0 and np.argmax(w_kl.probabilities) == 0


def test_grad_check_module_passes_small_run():
    from evidseg.gradcheck import run_grad_check

    res = run_grad_check(trials=12, seed=4)
    assert res.passed, res.failures
    assert set(res.max_rel_error) == {"wasserstein", "dice", "kl", "mse", "total"}


def test_grad_check_catches_sign_flip(monkeypatch):
    from evidseg.gradcheck import run_grad_check

    real = losses.total_loss_gradient
    monkeypatch.setattr(losses, "total_loss_gradient", lambda *a, **k: -real(*a, **k))
    res = run_grad_check(trials=3, seed=0)
    assert not res.passed
    assert any("term=" in f for f in res.failures)
