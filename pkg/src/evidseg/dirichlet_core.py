"""Evidential head mathematics: evidence, Dirichlet parameters, beliefs.

Also hosts the special functions (log-gamma, digamma, trigamma) used by the
KL regularizer and its gradient. Every function accepts either a scalar or a
numpy array; scalar input returns a Python float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Lanczos approximation, g = 7, n = 9
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# above this the Stirling series is more accurate than Lanczos
_STIRLING_CUTOFF = 10.0
# recurrence shift target for digamma / trigamma asymptotic series
_PSI_SHIFT = 10.0


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


def _as_float_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    return arr, arr.ndim == 0


def _check_positive(arr: np.ndarray, name: str) -> None:
    bad = ~(arr > 0)
    if np.any(bad):
        value = arr[bad].flat[0] if arr.ndim else float(arr)
        raise DomainError(f"{name} requires x > 0, got {value!r}")


def _out(arr: np.ndarray, scalar: bool):
    return float(arr) if scalar else arr


def _lanczos(x: np.ndarray) -> np.ndarray:
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for k, c in enumerate(_LANCZOS_COEF[1:], start=1):
        acc = acc + c / (z + k)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def _stirling(x: np.ndarray) -> np.ndarray:
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (
        1.0 / 12.0
        + inv2 * (-1.0 / 360.0 + inv2 * (1.0 / 1260.0 + inv2 * (-1.0 / 1680.0 + inv2 * (1.0 / 1188.0))))
    )
    return (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series


def log_gamma(x):
    """Natural log of the Gamma function for x > 0."""
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "log_gamma")
    flat = arr.reshape(-1)
    value = np.empty_like(flat)
    large = flat >= _STIRLING_CUTOFF
    value[large] = _stirling(flat[large])
    rest = np.flatnonzero(~large)
    if rest.size:
        sub = flat[rest]
        small = sub < 0.5
        # lgamma(x) = lgamma(x + 1) - log(x) keeps the Lanczos argument >= 0.5
        res = _lanczos(np.where(small, sub + 1.0, sub))
        if np.any(small):
            res[small] -= np.log(sub[small])
        value[rest] = res
    return _out(value.reshape(arr.shape), scalar)


def _shift_up(arr: np.ndarray, power: int) -> tuple[np.ndarray, np.ndarray]:
    """Shift entries below _PSI_SHIFT upward by a common integer count.

    Returns the shifted arguments and sum_k (x + k) ** -power over the steps
    taken. Stepping past the cutoff is harmless: the recurrence holds for any
    number of steps.
    """
    z = arr.astype(np.float64, copy=True).reshape(-1)
    acc = np.zeros_like(z)
    low = np.flatnonzero(z < _PSI_SHIFT)
    if low.size:
        sub = z[low]
        steps = int(math.ceil(_PSI_SHIFT - sub.min()))
        sub_acc = np.zeros_like(sub)
        for _ in range(steps):
            sub_acc += 1.0 / sub if power == 1 else 1.0 / (sub * sub)
            sub += 1.0
        z[low] = sub
        acc[low] = sub_acc
    return z.reshape(arr.shape), acc.reshape(arr.shape)


def digamma(x):
    """Derivative of log_gamma, for x > 0."""
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "digamma")
    z, acc = _shift_up(arr, 1)
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0))))
    )
    value = np.log(z) - 0.5 * inv - series - acc
    return _out(value, scalar)


def trigamma(x):
    """Second derivative of log_gamma, for x > 0."""
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "trigamma")
    z, acc = _shift_up(arr, 2)
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv + inv2 * (
        0.5
        + inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))
    )
    return _out(acc + series, scalar)


@dataclass(frozen=True)
class EvidenceVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError(f"need at least 2 classes, got {len(self.values)}")
        for i, v in enumerate(self.values):
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"evidence[{i}] must be finite and >= 0, got {v!r}")

    @property
    def num_classes(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class DirichletParams:
    alpha: tuple[float, ...]
    total: float

    def __post_init__(self):
        if len(self.alpha) < 2:
            raise ValueError(f"need at least 2 classes, got {len(self.alpha)}")
        for i, a in enumerate(self.alpha):
            if not (a >= 1.0 and math.isfinite(a)):
                raise ValueError(f"alpha[{i}] must be finite and >= 1, got {a!r}")
        s = math.fsum(self.alpha)
        if abs(self.total - s) > 1e-9 * s:
            raise ValueError(f"total {self.total!r} inconsistent with sum(alpha) {s!r}")

    @classmethod
    def from_alpha(cls, alpha) -> "DirichletParams":
        alpha = tuple(float(a) for a in alpha)
        return cls(alpha, math.fsum(alpha))

    @property
    def num_classes(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class PixelBelief:
    probabilities: tuple[float, ...]
    uncertainty: float


def evidence_from_logits(logits) -> EvidenceVector:
    values = []
    for i, v in enumerate(logits):
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"logit at index {i} is not finite: {v!r}")
        values.append(max(0.0, v))
    return EvidenceVector(tuple(values))


def dirichlet_from_evidence(e: EvidenceVector) -> DirichletParams:
    return DirichletParams.from_alpha(v + 1.0 for v in e.values)


def belief(params: DirichletParams) -> PixelBelief:
    s = params.total
    probs = tuple(a / s for a in params.alpha)
    return PixelBelief(probs, params.num_classes / s)


def belief_from_logits(logits) -> PixelBelief:
    return belief(dirichlet_from_evidence(evidence_from_logits(logits)))


# Array forms used by the loss, network and metrics. The class axis is given
# explicitly; everything else is treated as independent pixels.


def alpha_map(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Dirichlet concentrations ReLU(logits) + 1, computed in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        idx = np.argwhere(~np.isfinite(logits))[0]
        raise ValueError(f"non-finite logit at index {tuple(int(i) for i in idx)}")
    return np.maximum(logits, 0.0) + 1.0


def belief_maps(logits: np.ndarray, axis: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Return (probabilities, uncertainty) for a logit array.

    The probabilities keep the input shape; the uncertainty map drops ``axis``.
    """
    alpha = alpha_map(logits, axis)
    total = alpha.sum(axis=axis, keepdims=True)
    probs = alpha / total
    unc = alpha.shape[axis] / np.squeeze(total, axis=axis)
    return probs, unc
