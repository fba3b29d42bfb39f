import math

import numpy as np
import pytest

from diva.errors import DomainError
from diva.numerics import (
    digamma,
    kl_beta,
    kl_gamma,
    kmeanspp_centers,
    log_beta,
    log_gamma,
    log_sum_exp,
    normalize_log_weights,
)

EULER_GAMMA = 0.57721566490153286


# -----------------------------
#  digamma
# -----------------------------
def test_digamma_at_one_is_minus_euler_gamma():
    assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)


def test_digamma_unit_step():
    assert digamma(2.0) - digamma(1.0) == pytest.approx(1.0, abs=1e-12)


def test_digamma_matches_asymptotic_series_at_large_x():
    x = 100.5
    series = math.log(x) - 1.0 / (2 * x) - 1.0 / (12 * x ** 2) + 1.0 / (120 * x ** 4)
    assert digamma(x) == pytest.approx(series, abs=1e-10)


def test_digamma_half():
    assert digamma(0.5) == pytest.approx(-EULER_GAMMA - 2.0 * math.log(2.0), abs=1e-10)


def test_digamma_recurrence_on_grid():
    x = np.linspace(1e-3, 50.0, 2000)
    assert np.max(np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x)) <= 1e-9


def test_digamma_tiny_argument():
    # psi(x) ~ -1/x - gamma for small x
    x = 1e-6
    assert digamma(x) == pytest.approx(-1.0 / x - EULER_GAMMA, abs=1e-5)


@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_digamma_rejects_non_positive(bad):
    with pytest.raises(DomainError):
        digamma(bad)


def test_digamma_array_matches_scalar():
    xs = np.array([0.3, 1.0, 7.5, 42.0])
    out = digamma(xs)
    assert isinstance(out, np.ndarray)
    assert out == pytest.approx([digamma(float(v)) for v in xs], abs=1e-14)


# -----------------------------
#  log_gamma
# -----------------------------
def test_log_gamma_known_values():
    assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-12)
    assert log_gamma(5.0) == pytest.approx(math.log(24.0), abs=1e-10)
    assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-10)


def test_log_gamma_matches_math_lgamma():
    for x in [1e-6, 1e-3, 0.1, 0.7, 2.5, 6.0, 13.3, 170.0, 1e4]:
        assert log_gamma(x) == pytest.approx(math.lgamma(x), abs=1e-10 * max(1.0, abs(math.lgamma(x))))


def test_log_gamma_recurrence():
    x = np.linspace(1e-3, 50.0, 2000)
    assert np.max(np.abs(log_gamma(x + 1.0) - log_gamma(x) - np.log(x))) <= 1e-9


def test_log_gamma_rejects_zero():
    with pytest.raises(DomainError):
        log_gamma(0.0)


def test_log_beta_symmetry():
    assert log_beta(2.0, 3.0) == pytest.approx(log_beta(3.0, 2.0), abs=1e-14)
    assert log_beta(1.0, 1.0) == pytest.approx(0.0, abs=1e-12)


# -----------------------------
#  log_sum_exp
# -----------------------------
def test_log_sum_exp_basic():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + math.log(2.0), abs=1e-12)
    assert log_sum_exp([700.0, 700.0]) == pytest.approx(700.0 + math.log(2.0), abs=1e-12)


def test_log_sum_exp_matches_direct_sum():
    v = [0.3, 1.7, -2.0]
    direct = math.log(math.fsum(math.exp(t) for t in v))
    assert log_sum_exp(v) == pytest.approx(direct, abs=1e-14)


@pytest.mark.parametrize("c", [-500.0, -3.3, 0.0, 12.0, 500.0])
def test_log_sum_exp_shift_invariance(c):
    v = np.array([0.3, 1.7, -2.0, 4.1])
    assert log_sum_exp(v + c) == pytest.approx(log_sum_exp(v) + c, abs=1e-12)


def test_log_sum_exp_all_negative_infinity():
    assert log_sum_exp([-np.inf, -np.inf]) == -np.inf


def test_log_sum_exp_empty_is_domain_error():
    with pytest.raises(DomainError):
        log_sum_exp([])


def test_log_sum_exp_rows():
    m = np.array([[0.0, 0.0], [1.0, -np.inf]])
    assert log_sum_exp(m, axis=1) == pytest.approx([math.log(2.0), 1.0])


def test_normalize_log_weights_rows_sum_to_one(rng):
    w = normalize_log_weights(rng.normal(scale=300.0, size=(50, 7)))
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12


# -----------------------------
#  Divergences
# -----------------------------
def test_kl_beta_zero_for_equal_parameters():
    assert kl_beta(2.5, 4.0, 2.5, 4.0) == pytest.approx(0.0, abs=1e-12)


def test_kl_beta_against_uniform_closed_form():
    # KL(Beta(a, 1) || Beta(1, 1)) = log a - 1 + 1/a
    a = 3.0
    assert kl_beta(a, 1.0, 1.0, 1.0) == pytest.approx(math.log(a) - 1.0 + 1.0 / a, abs=1e-10)


def test_kl_gamma_zero_for_equal_parameters():
    assert kl_gamma(3.0, 0.7, 3.0, 0.7) == pytest.approx(0.0, abs=1e-12)


def test_kl_gamma_exponential_closed_form():
    # Shape 1: KL(Exp(b1) || Exp(b0)) = log(b1/b0) + b0/b1 - 1
    b1, b0 = 2.0, 0.5
    assert kl_gamma(1.0, b1, 1.0, b0) == pytest.approx(math.log(b1 / b0) + b0 / b1 - 1.0, abs=1e-10)


def test_kl_gamma_is_positive(rng):
    a1, b1, a0, b0 = rng.uniform(0.5, 5.0, size=(4, 100))
    assert np.all(kl_gamma(a1, b1, a0, b0) >= -1e-12)


# -----------------------------
#  Seeding
# -----------------------------
def test_kmeanspp_picks_one_row_per_separated_group():
    x = np.repeat(np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]]), 20, axis=0)
    centers = kmeanspp_centers(x, 3, np.random.default_rng(0))
    assert sorted(map(tuple, centers)) == [(0.0, 0.0), (0.0, 100.0), (100.0, 0.0)]


def test_kmeanspp_with_identical_rows():
    centers = kmeanspp_centers(np.ones((5, 2)), 3, np.random.default_rng(0))
    assert centers.shape == (3, 2) and (centers == 1.0).all()
