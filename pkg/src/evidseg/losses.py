"""Evidential segmentation losses with analytic gradients.

Batch conventions: logits are ``(N, C, H, W)`` and labels ``(N, H, W)`` with
integer class indices in ``[0, C)``. All accumulation happens in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dirichlet_core import (
    DirichletParams,
    PixelBelief,
    alpha_map,
    digamma,
    log_gamma,
    trigamma,
)


@dataclass(frozen=True)
class LossWeights:
    w_wasserstein: float = 1.0
    w_dice: float = 0.75
    w_kl: float = 0.15
    w_mse: float = 0.45

    def __post_init__(self):
        ws = self.as_tuple()
        for name, w in zip(("w_wasserstein", "w_dice", "w_kl", "w_mse"), ws):
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {w!r}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w_wasserstein, self.w_dice, self.w_kl, self.w_mse)


@dataclass(frozen=True)
class AnnealSchedule:
    ramp_start: int = 40_000
    ramp_end: int = 48_000
    plateau: float = 0.15

    def __post_init__(self):
        if not (0 <= self.ramp_start < self.ramp_end):
            raise ValueError(
                f"need 0 <= ramp_start < ramp_end, got {self.ramp_start}, {self.ramp_end}"
            )
        if not (math.isfinite(self.plateau) and self.plateau >= 0):
            raise ValueError(f"plateau must be finite and >= 0, got {self.plateau!r}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    wasserstein: float
    dice: float
    kl: float
    mse: float
    kl_weight_used: float


# ---------------------------------------------------------------------------
# per-pixel reference forms


def _one_hot_index(target) -> int:
    vals = [float(v) for v in target]
    hot = [i for i, v in enumerate(vals) if v == 1.0]
    if len(hot) != 1 or any(v not in (0.0, 1.0) for v in vals):
        raise ValueError(f"target is not one-hot: {vals!r}")
    return hot[0]


def mse_loss_pixel(belief: PixelBelief, total: float, target) -> float:
    """Expected squared error under Dir(alpha) against a one-hot target."""
    _one_hot_index(target)
    p = belief.probabilities
    if len(target) != len(p):
        raise ValueError(f"target has {len(target)} classes, belief has {len(p)}")
    denom = total + 1.0
    return math.fsum((pi - yi) ** 2 + pi * (1.0 - pi) / denom for pi, yi in zip(p, target))


def wasserstein_loss_pixel(belief: PixelBelief, target_class: int) -> float:
    """1 - p_y: Wasserstein distance to the one-hot target under the 0/1 ground metric."""
    c = len(belief.probabilities)
    if not (0 <= target_class < c):
        raise ValueError(f"target_class {target_class} outside [0, {c})")
    return 1.0 - belief.probabilities[target_class]


def dice_loss_class(pred_map, gt_map) -> float:
    pred = np.asarray(pred_map, dtype=np.float64)
    gt = np.asarray(gt_map, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * (pred * gt).sum() / denom)


# values at alpha == 1, the zero-evidence case that dominates real batches
_EULER_GAMMA = 0.5772156649015329
_AT_ONE = {log_gamma: 0.0, digamma: -_EULER_GAMMA, trigamma: math.pi**2 / 6.0}


def _special_at(fn, alpha: np.ndarray) -> np.ndarray:
    """Evaluate ``fn`` elementwise, short-circuiting entries equal to 1."""
    out = np.full(alpha.shape, _AT_ONE[fn])
    live = alpha != 1.0
    if np.any(live):
        out[live] = fn(alpha[live])
    return out


def _kl_const(num_classes: int, a0: float) -> float:
    return log_gamma(num_classes * a0) - num_classes * log_gamma(a0)


def kl_to_prior_pixel(params: DirichletParams, prior_concentration: float = 1.0) -> float:
    """KL[Dir(alpha) || Dir(a0, ..., a0)] in closed form."""
    a0 = float(prior_concentration)
    if not (a0 > 0 and math.isfinite(a0)):
        raise ValueError(f"prior concentration must be > 0, got {a0!r}")
    alpha = np.asarray(params.alpha, dtype=np.float64)
    s = params.total
    psi_s = digamma(s)
    value = (
        log_gamma(s)
        - float(np.sum(log_gamma(alpha)))
        - _kl_const(alpha.size, a0)
        + float(np.sum((alpha - a0) * (digamma(alpha) - psi_s)))
    )
    return value


def kl_weight(iteration: int, schedule: AnnealSchedule) -> float:
    t = iteration
    if t <= schedule.ramp_start:
        return 0.0
    if t >= schedule.ramp_end:
        return schedule.plateau
    return schedule.plateau * (t - schedule.ramp_start) / (schedule.ramp_end - schedule.ramp_start)


# ---------------------------------------------------------------------------
# batched forms


def _validate(logit_maps, label_maps) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logit_maps)
    labels = np.asarray(label_maps)
    if logits.ndim != 4:
        raise ValueError(f"logits must be (N, C, H, W), got shape {logits.shape}")
    n, c, h, w = logits.shape
    if c < 2:
        raise ValueError(f"need at least 2 classes, got {c}")
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return logits, labels


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    # (N, H, W) -> (N, C, H, W)
    return (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(np.float64)


class _Terms:
    """Per-batch intermediate quantities shared by value and gradient."""

    def __init__(self, logits, labels, prior_concentration):
        self.alpha = alpha_map(logits)
        self.n, self.c, self.h, self.w = self.alpha.shape
        self.z = self.n * self.h * self.w
        self.y = _one_hot(labels, self.c)
        self.s = self.alpha.sum(axis=1, keepdims=True)
        self.p = self.alpha / self.s
        self.a0 = float(prior_concentration)
        if not (self.a0 > 0 and math.isfinite(self.a0)):
            raise ValueError(f"prior concentration must be > 0, got {self.a0!r}")

    def wasserstein(self) -> float:
        py = (self.p * self.y).sum(axis=1)
        return float((1.0 - py).sum() / self.z)

    def mse(self) -> float:
        p, s = self.p, self.s
        per = (p - self.y) ** 2 + p * (1.0 - p) / (s + 1.0)
        return float(per.sum() / self.z)

    def dice_parts(self):
        inter = (self.p * self.y).sum(axis=(2, 3))
        denom = self.p.sum(axis=(2, 3)) + self.y.sum(axis=(2, 3))
        return inter, denom

    def dice(self) -> float:
        inter, denom = self.dice_parts()
        safe = np.where(denom > 0, denom, 1.0)
        per = np.where(denom > 0, 1.0 - 2.0 * inter / safe, 0.0)
        return float(per.mean())

    def kl(self) -> float:
        a, s, a0 = self.alpha, self.s[:, 0], self.a0
        per = (
            log_gamma(s)
            - _special_at(log_gamma, a).sum(axis=1)
            - _kl_const(self.c, a0)
            + ((a - a0) * (_special_at(digamma, a) - digamma(s)[:, None])).sum(axis=1)
        )
        return float(per.sum() / self.z)

    # Gradient pieces. Terms that depend on alpha only through p return
    # dL/dp, pulled back once through p = alpha / S by ``alpha_grad``.

    def probs_grad_wasserstein(self) -> np.ndarray:
        return -self.y / self.z

    def probs_grad_mse(self) -> tuple[np.ndarray, np.ndarray]:
        """(dL/dp, explicit dL/dS) for the expected squared error."""
        p, s = self.p, self.s
        g_p = (2.0 * (p - self.y) + (1.0 - 2.0 * p) / (s + 1.0)) / self.z
        g_s = -(p * (1.0 - p)).sum(axis=1, keepdims=True) / ((s + 1.0) ** 2 * self.z)
        return g_p, g_s

    def probs_grad_dice(self) -> np.ndarray:
        inter, denom = self.dice_parts()
        live = (denom > 0)[:, :, None, None]
        safe = np.where(denom > 0, denom, 1.0)[:, :, None, None]
        g_p = (2.0 * inter[:, :, None, None] / safe - 2.0 * self.y) / safe
        return np.where(live, g_p, 0.0) / (self.n * self.c)

    def alpha_grad_kl(self) -> np.ndarray:
        a, s, a0 = self.alpha, self.s, self.a0
        g = (a - a0) * _special_at(trigamma, a) - (s - self.c * a0) * trigamma(s)
        return g / self.z

    def alpha_grad(self, w_w: float, w_d: float, w_kl: float, w_m: float) -> np.ndarray:
        g_p = np.zeros_like(self.alpha)
        g_s = 0.0
        if w_w:
            g_p += w_w * self.probs_grad_wasserstein()
        if w_d:
            g_p += w_d * self.probs_grad_dice()
        if w_m:
            gp_m, gs_m = self.probs_grad_mse()
            g_p += w_m * gp_m
            g_s = w_m * gs_m
        # d p_i / d alpha_j = (delta_ij - p_i) / S
        grad = (g_p - (g_p * self.p).sum(axis=1, keepdims=True)) / self.s + g_s
        if w_kl:
            grad += w_kl * self.alpha_grad_kl()
        return grad


def loss_terms(logit_maps, label_maps, prior_concentration: float = 1.0) -> dict[str, float]:
    """Unweighted batch means of the four loss terms."""
    logits, labels = _validate(logit_maps, label_maps)
    t = _Terms(logits, labels, prior_concentration)
    return {"wasserstein": t.wasserstein(), "dice": t.dice(), "kl": t.kl(), "mse": t.mse()}


def total_loss(
    logit_maps,
    label_maps,
    weights: LossWeights,
    schedule: AnnealSchedule,
    iteration: int,
    prior_concentration: float = 1.0,
) -> LossBreakdown:
    logits, labels = _validate(logit_maps, label_maps)
    t = _Terms(logits, labels, prior_concentration)
    kw = kl_weight(iteration, schedule)
    w_w, w_d, _, w_m = weights.as_tuple()
    # terms with zero weight are still reported
    vals = {"wasserstein": t.wasserstein(), "dice": t.dice(), "kl": t.kl(), "mse": t.mse()}
    total = w_w * vals["wasserstein"] + w_d * vals["dice"] + kw * vals["kl"] + w_m * vals["mse"]
    return LossBreakdown(total=total, kl_weight_used=kw, **vals)


def total_loss_gradient(
    logit_maps,
    label_maps,
    weights: LossWeights,
    schedule: AnnealSchedule,
    iteration: int,
    prior_concentration: float = 1.0,
) -> np.ndarray:
    """Gradient of ``total_loss(...).total`` with respect to the logits (float64)."""
    return loss_and_gradient(logit_maps, label_maps, weights, schedule, iteration, prior_concentration)[1]


def loss_and_gradient(
    logit_maps,
    label_maps,
    weights: LossWeights,
    schedule: AnnealSchedule,
    iteration: int,
    prior_concentration: float = 1.0,
) -> tuple[LossBreakdown, np.ndarray]:
    """Value and gradient sharing one pass over the intermediates (training path)."""
    logits, labels = _validate(logit_maps, label_maps)
    t = _Terms(logits, labels, prior_concentration)
    kw = kl_weight(iteration, schedule)
    w_w, w_d, _, w_m = weights.as_tuple()
    vals = {"wasserstein": t.wasserstein(), "dice": t.dice(), "kl": t.kl(), "mse": t.mse()}
    total = w_w * vals["wasserstein"] + w_d * vals["dice"] + kw * vals["kl"] + w_m * vals["mse"]
    grad = t.alpha_grad(w_w, w_d, kw, w_m)
    grad = np.where(np.asarray(logits) > 0, grad, 0.0)
    return LossBreakdown(total=total, kl_weight_used=kw, **vals), grad


def single_pixel_descent(
    weights: LossWeights,
    start_logits=(1.0, 1.0, 1.0),
    target: int = 0,
    iterations: int = 200,
    learning_rate: float = 10.0,
) -> PixelBelief:
    """Optimize the logits of one isolated pixel and return its final belief.

    Used to compare where each loss drives a single Dirichlet on the simplex.
    Steps use the trainer's ADAM rule, since the MSE pull decays like 1/S^3
    and plain descent would need many thousands of iterations. KL, when
    weighted, is applied at its full plateau value.
    """
    from .nn_engine import AdamState, adam_step

    x = np.asarray(start_logits, dtype=np.float64).reshape(1, -1, 1, 1).copy()
    y = np.full((1, 1, 1), target, dtype=np.int64)
    schedule = AnnealSchedule(0, 1, weights.w_kl)
    state = AdamState.zeros_like([x])
    for t in range(1, iterations + 1):
        _, g = loss_and_gradient(x, y, weights, schedule, 1)
        adam_step([x], [g], state, learning_rate, 0.0, t)
    alpha = alpha_map(x)[0, :, 0, 0]
    s = float(alpha.sum())
    return PixelBelief(tuple(float(a) / s for a in alpha), len(alpha) / s)
