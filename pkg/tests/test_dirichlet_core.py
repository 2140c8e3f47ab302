import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evidseg.dirichlet_core import (
    DirichletParams,
    DomainError,
    EvidenceVector,
    alpha_map,
    belief,
    belief_from_logits,
    belief_maps,
    digamma,
    dirichlet_from_evidence,
    evidence_from_logits,
    log_gamma,
    trigamma,
)

# log-spaced grid over the range the loss can reach
GRID = np.concatenate([np.geomspace(1e-3, 1e6, 400), [0.5, 1.0, 1.5, 2.0, 9.999, 10.0, 10.001]])


def _mp(fn, xs):
    with mpmath.workdps(30):
        return np.array([float(fn(mpmath.mpf(float(x)))) for x in xs])


def test_log_gamma_against_mpmath():
    ref = _mp(mpmath.loggamma, GRID)
    got = log_gamma(GRID)
    err = np.abs(got - ref)
    # 1e-10 absolute, except where the float64 spacing of the result is coarser
    assert np.all(err <= np.maximum(1e-10, 2 * np.spacing(np.abs(ref))))
    assert err[GRID < 5e4].max() <= 1e-10


def test_digamma_against_mpmath():
    ref = _mp(mpmath.digamma, GRID)
    assert np.abs(digamma(GRID) - ref).max() < 1e-10


def test_trigamma_against_mpmath():
    ref = _mp(lambda x: mpmath.polygamma(1, x), GRID)
    got = trigamma(GRID)
    assert (np.abs(got - ref) / ref).max() < 1e-10


def test_special_function_known_values():
    assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-14)
    assert log_gamma(4.0) == pytest.approx(math.log(6.0), abs=1e-12)
    assert digamma(2.0) == pytest.approx(0.4227843350984671, abs=1e-12)
    assert digamma(0.5) == pytest.approx(-1.9635100260214235, abs=1e-12)
    assert log_gamma(2.0) == pytest.approx(0.0, abs=1e-14)
    assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-14)
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-12)
    assert trigamma(1.0) == pytest.approx(math.pi**2 / 6, rel=1e-13)


@pytest.mark.parametrize("fn", [log_gamma, digamma, trigamma])
@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_domain_errors(fn, bad):
    with pytest.raises(DomainError):
        fn(bad)
    with pytest.raises(DomainError):
        fn(np.array([1.0, bad]))


def test_scalar_in_scalar_out():
    assert isinstance(digamma(3), float)
    assert digamma(np.array([3.0])).shape == (1,)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-2, 1e4))
def test_recurrence_identities(x):
    assert log_gamma(x + 1) - log_gamma(x) == pytest.approx(math.log(x), abs=1e-9 * max(1.0, abs(log_gamma(x))))
    assert digamma(x + 1) - digamma(x) == pytest.approx(1.0 / x, rel=1e-9, abs=1e-12)
    assert trigamma(x) - trigamma(x + 1) == pytest.approx(1.0 / (x * x), rel=1e-8)


def test_reference_examples():
    assert evidence_from_logits((-1.0, 0.0, 2.5)).values == (0.0, 0.0, 2.5)
    assert evidence_from_logits((0, 0, 0)).values == (0.0, 0.0, 0.0)
    assert evidence_from_logits((3.2, -7.1, 0.4)).values == (3.2, 0.0, 0.4)
    p = dirichlet_from_evidence(EvidenceVector((1.0, 2.0, 3.0)))
    assert p.alpha == (2.0, 3.0, 4.0) and p.total == 9.0
    b = belief(p)
    assert b.probabilities == pytest.approx((2 / 9, 3 / 9, 4 / 9), abs=1e-15)
    assert b.uncertainty == pytest.approx(1 / 3, abs=1e-15)
    b = belief_from_logits([0.0, 0.0, 0.0])
    assert b.probabilities == (1 / 3, 1 / 3, 1 / 3)
    assert b.uncertainty == 1.0
    b = belief_from_logits([4.0, -2.0, 0.0])
    assert b.probabilities == pytest.approx((5 / 7, 1 / 7, 1 / 7), abs=1e-15)
    assert b.uncertainty == pytest.approx(3 / 7, abs=1e-15)
    p = dirichlet_from_evidence(EvidenceVector((9.0, 0.0)))
    assert p.alpha == (10.0, 1.0) and p.total == 11.0


def test_evidence_rejects_non_finite_with_index():
    with pytest.raises(ValueError, match="index 1"):
        evidence_from_logits([0.0, float("inf"), 1.0])


def test_type_invariants():
    with pytest.raises(ValueError):
        EvidenceVector((1.0,))
    with pytest.raises(ValueError):
        EvidenceVector((1.0, -0.5))
    with pytest.raises(ValueError):
        DirichletParams((0.5, 1.0), 1.5)
    with pytest.raises(ValueError):
        DirichletParams((1.0, 2.0), 4.0)


logit_vectors = st.lists(st.floats(-50, 1e4, allow_nan=False), min_size=2, max_size=8)


@settings(max_examples=300, deadline=None)
@given(logit_vectors)
def test_belief_properties(logits):
    b = belief_from_logits(logits)
    c = len(logits)
    assert math.fsum(b.probabilities) == pytest.approx(1.0, abs=1e-12)
    assert 0 < b.uncertainty <= 1.0
    assert all(p > 0 for p in b.probabilities)
    # argmax of p agrees with argmax of the concentrations whenever it is unique
    ev = [max(0.0, v) for v in logits]
    alpha = [e + 1.0 for e in ev]
    if alpha.count(max(alpha)) == 1:
        assert int(np.argmax(b.probabilities)) == int(np.argmax(alpha))
    assert b.uncertainty == pytest.approx(c / (sum(ev) + c), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(logit_vectors, st.integers(0, 7), st.floats(0.0, 100.0))
def test_uncertainty_monotone_in_evidence(logits, k, extra):
    k %= len(logits)
    more = list(logits)
    more[k] = max(0.0, more[k]) + extra
    assert belief_from_logits(more).uncertainty <= belief_from_logits(logits).uncertainty


def test_array_forms_match_scalar_path():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 3, size=(2, 4, 5, 6))
    probs, unc = belief_maps(logits)
    assert probs.shape == logits.shape and unc.shape == (2, 5, 6)
    for idx in [(0, 0, 0), (1, 4, 5), (0, 2, 3)]:
        n, h, w = idx
        b = belief_from_logits(logits[n, :, h, w])
        assert probs[n, :, h, w] == pytest.approx(b.probabilities, abs=1e-15)
        assert unc[idx] == pytest.approx(b.uncertainty, abs=1e-15)
    assert alpha_map(logits).min() >= 1.0
    with pytest.raises(ValueError, match="non-finite"):
        alpha_map(np.array([[1.0, np.nan]]))


def test_belief_of_params():
    b = belief(DirichletParams.from_alpha((5, 1, 1)))
    assert b.probabilities == pytest.approx((5 / 7, 1 / 7, 1 / 7))
    assert b.uncertainty == pytest.approx(3 / 7)
