"""Randomized check of the analytic loss gradient against central differences."""

from __future__ import annotations

from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import losses
from .losses import AnnealSchedule, LossWeights

FD_STEP = 1e-5
REL_TOL = 1e-5
MIN_GRAD = 1e-8
KINK_MARGIN = 1e-4
TERMS = ("wasserstein", "dice", "kl", "mse")
# best row of the ablation grid: (W, Dice, KL, MSE)
BEST_ROW = (1.00, 0.75, 0.15, 0.45)
# float64 differences are re-done in high precision above this error
RECHECK_ABOVE = 1e-7
_MP_DPS = 40


@dataclass
class GradCheckResult:
    trials: int
    max_rel_error: dict[str, float]
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def reference_loss(logits, labels, weights, prior_concentration=1.0):
    """Total loss in mpmath arithmetic, written out pixel by pixel.

    Deliberately shares no code with ``losses``; used to re-evaluate finite
    differences where float64 cancellation swamps small gradient entries.
    """
    with mpmath.workdps(_MP_DPS):
        n, c, h, w = logits.shape
        a0 = mpmath.mpf(prior_concentration)
        kl_const = mpmath.loggamma(c * a0) - c * mpmath.loggamma(a0)
        tot_w = tot_k = tot_m = tot_d = mpmath.mpf(0)
        for i in range(n):
            inter = [mpmath.mpf(0)] * c
            psum = [mpmath.mpf(0)] * c
            ysum = [0] * c
            for r in range(h):
                for q in range(w):
                    alpha = [mpmath.mpf(max(0.0, float(logits[i, k, r, q]))) + 1 for k in range(c)]
                    s = mpmath.fsum(alpha)
                    p = [a / s for a in alpha]
                    y = int(labels[i, r, q])
                    tot_w += 1 - p[y]
                    tot_m += mpmath.fsum((p[k] - (k == y)) ** 2 + p[k] * (1 - p[k]) / (s + 1) for k in range(c))
                    psi_s = mpmath.digamma(s)
                    tot_k += (
                        mpmath.loggamma(s)
                        - mpmath.fsum(mpmath.loggamma(a) for a in alpha)
                        - kl_const
                        + mpmath.fsum((a - a0) * (mpmath.digamma(a) - psi_s) for a in alpha)
                    )
                    for k in range(c):
                        psum[k] += p[k]
                        if k == y:
                            inter[k] += p[k]
                            ysum[k] += 1
            for k in range(c):
                tot_d += 1 - 2 * inter[k] / (psum[k] + ysum[k])
        z = n * h * w
        w_w, w_d, w_kl, w_m = (mpmath.mpf(float(v)) for v in weights)
        return w_w * tot_w / z + w_d * tot_d / (n * c) + w_kl * tot_k / z + w_m * tot_m / z


def _reference_derivative(logits, labels, weights, a0, idx) -> float:
    xp = logits.copy()
    xm = logits.copy()
    xp[idx] += FD_STEP
    xm[idx] -= FD_STEP
    with mpmath.workdps(_MP_DPS):
        # the perturbed inputs are exact float64 values; only the loss is high precision
        diff = reference_loss(xp, labels, weights, a0) - reference_loss(xm, labels, weights, a0)
        return float(diff / (2 * mpmath.mpf(FD_STEP)))


def _max_rel_error(analytic, numeric, logits, labels, weights, a0) -> float:
    keep = (np.abs(analytic) > MIN_GRAD) & (np.abs(logits) >= KINK_MARGIN)
    worst = 0.0
    for idx in zip(*np.nonzero(keep)):
        a, n = analytic[idx], numeric[idx]
        err = abs(a - n) / max(abs(a), abs(n))
        if err > RECHECK_ABOVE:
            n = _reference_derivative(logits, labels, weights, a0, idx)
            err = abs(a - n) / max(abs(a), abs(n))
        worst = max(worst, err)
    return worst


def _random_case(rng: np.random.Generator, trial: int):
    c = int(rng.integers(2, 6))
    n = int(rng.integers(1, 3))
    h = int(rng.integers(1, 4))
    w = int(rng.integers(1, 4))
    logits = rng.normal(0.0, 2.0, size=(n, c, h, w))
    labels = rng.integers(0, c, size=(n, h, w))
    weights = BEST_ROW if trial % 4 == 0 else tuple(rng.uniform(0.0, 1.0, size=4))
    a0 = 1.0 if rng.random() < 0.5 else 0.25
    return logits, labels, weights, a0


def run_grad_check(trials: int = 200, seed: int = 0) -> GradCheckResult:
    """Compare ``losses.total_loss_gradient`` with finite differences.

    Each trial draws C in {2..5}, a small batch, labels, weights and a prior
    concentration; every term is checked on its own and in the weighted sum.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in TERMS + ("total",)}
    failures: list[str] = []
    for trial in range(trials):
        logits, labels, weights, a0 = _random_case(rng, trial)
        w_w, w_d, w_kl, w_m = weights
        # iteration past the ramp so the KL term carries its full weight
        schedule = AnnealSchedule(0, 1, w_kl)

        def term_values(x):
            return losses.loss_terms(x, labels, a0)

        numeric = {name: np.zeros_like(logits) for name in TERMS}
        for idx in np.ndindex(logits.shape):
            xp = logits.copy()
            xm = logits.copy()
            xp[idx] += FD_STEP
            xm[idx] -= FD_STEP
            fp, fm = term_values(xp), term_values(xm)
            for name in TERMS:
                numeric[name][idx] = (fp[name] - fm[name]) / (2.0 * FD_STEP)
        numeric["total"] = w_w * numeric["wasserstein"] + w_d * numeric["dice"] + w_kl * numeric["kl"] + w_m * numeric["mse"]

        one_hot = {name: tuple(1.0 if i == k else 0.0 for i in range(4)) for k, name in enumerate(TERMS)}
        cases = [(name, one_hot[name], AnnealSchedule(0, 1, one_hot[name][2])) for name in TERMS]
        cases.append(("total", weights, schedule))
        for name, wts, sched in cases:
            analytic = losses.total_loss_gradient(logits, labels, LossWeights(*wts), sched, 1, a0)
            e = _max_rel_error(analytic, numeric[name], logits, labels, wts, a0)
            worst[name] = max(worst[name], float(e))
            if e > REL_TOL:
                failures.append(
                    f"trial {trial}: term={name} rel_err={e:.3e} C={logits.shape[1]} "
                    f"shape={logits.shape} weights={tuple(round(float(v), 4) for v in wts)} a0={a0}"
                )
    return GradCheckResult(trials, worst, failures)
