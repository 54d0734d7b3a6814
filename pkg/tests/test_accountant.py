import itertools
import math

import mpmath
import numpy as np
import pytest

from dptab.accountant import (DEFAULT_ORDERS, PrivacyLedger, RdpCurve, calibrate_sigma, compose,
                              compute_epsilon, rdp_curve, rdp_gaussian, rdp_subsampled_gaussian,
                              rdp_to_dp)
from dptab.errors import ContractViolation, InfeasibleBudget

GRID_EPS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
Q_REF = 64 / 195_665
STEPS_REF = 5 * (195_665 // 64)

QS = (1e-4, Q_REF, 0.01, 0.1, 0.5)
SIGMAS = (0.7, 1.0, 1.5, 3.0, 10.0)
ORDERS = (2, 5, 16, 32, 64)


def oracle(q, sigma, alpha, dps=50):
    """Direct binomial sum at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        q, s = mpmath.mpf(q), mpmath.mpf(sigma)
        total = mpmath.fsum(
            mpmath.binomial(alpha, k) * (1 - q) ** (alpha - k) * q ** k
            * mpmath.exp(mpmath.mpf(k * (k - 1)) / (2 * s * s))
            for k in range(alpha + 1)
        )
        return float(mpmath.log(total) / (alpha - 1))


@pytest.mark.parametrize("sigma,alpha,expected", [(1.0, 2, 1.0), (2.0, 8, 1.0)])
def test_gaussian_closed_form(sigma, alpha, expected):
    assert rdp_gaussian(sigma, alpha) == expected


def test_gaussian_infinite_sigma():
    assert rdp_gaussian(math.inf, 4) == 0.0


@pytest.mark.parametrize("sigma,alpha", [(0.5, 2), (1.3, 7), (4.0, 64)])
def test_full_batch_equals_plain_gaussian(sigma, alpha):
    assert abs(rdp_subsampled_gaussian(1.0, sigma, alpha) - alpha / (2 * sigma ** 2)) < 1e-9


def test_zero_sampling_rate():
    assert rdp_subsampled_gaussian(0.0, 1.0, 8) == 0.0


def test_reference_point_against_oracle():
    assert rdp_subsampled_gaussian(0.01, 1.5, 16) == pytest.approx(oracle(0.01, 1.5, 16), rel=1e-9)


@pytest.mark.parametrize("q,sigma,alpha", list(itertools.product(QS, SIGMAS, ORDERS)))
def test_matches_high_precision_oracle(q, sigma, alpha):
    got = rdp_subsampled_gaussian(q, sigma, alpha)
    want = oracle(q, sigma, alpha)
    assert np.isfinite(got)
    assert abs(got - want) <= 1e-9 * abs(want), (got, want)


@pytest.mark.parametrize("q,sigma,alpha", list(itertools.product(QS, SIGMAS, ORDERS))[::7])
def test_subsampling_never_hurts(q, sigma, alpha):
    assert rdp_subsampled_gaussian(q, sigma, alpha) <= rdp_gaussian(sigma, alpha) + 1e-12


@pytest.mark.parametrize("bad", [dict(q=1.5, sigma=1, alpha=2), dict(q=0.1, sigma=0, alpha=2),
                                 dict(q=0.1, sigma=1, alpha=1), dict(q=0.1, sigma=1, alpha=2.5)])
def test_invalid_inputs(bad):
    with pytest.raises(ContractViolation):
        rdp_subsampled_gaussian(**bad)


def test_fractional_orders_only_without_subsampling():
    assert 1.5 in rdp_curve(1.0, 1.0).orders
    assert 1.5 not in rdp_curve(0.01, 1.0).orders


def test_compose_identity_zero_and_additivity():
    c = rdp_curve(0.01, 1.2)
    assert compose(c, 1) == c
    assert all(v == 0 for v in compose(c, 0).values)
    lhs = compose(c, 7)
    rhs = compose(c, 3) + compose(c, 4)
    np.testing.assert_allclose(lhs.values, rhs.values, rtol=1e-14)


def test_curve_rejects_unordered_orders():
    with pytest.raises(ContractViolation):
        RdpCurve((3.0, 2.0), (0.1, 0.1))


def test_single_order_conversion():
    eps, order = rdp_to_dp(RdpCurve((2.0,), (1.0,)), 1e-5)
    assert eps == pytest.approx(1 + math.log(1e5), abs=1e-12)
    assert eps == pytest.approx(12.5129, abs=1e-4)
    assert order == 2.0


def test_conversion_matches_exhaustive_scan():
    curve = compose(rdp_curve(0.004, 1.1), 900)
    scan = [(v + math.log(1e5) / (a - 1), a) for a, v in zip(curve.orders, curve.values)]
    assert rdp_to_dp(curve, 1e-5) == min(scan)


def test_more_orders_never_increase_epsilon():
    full = compose(rdp_curve(0.01, 1.0), 500)
    for keep in (slice(0, 10), slice(5, None, 3), slice(20, 40)):
        sub = RdpCurve(full.orders[keep], full.values[keep])
        assert rdp_to_dp(full, 1e-5)[0] <= rdp_to_dp(sub, 1e-5)[0]


@pytest.mark.parametrize("target", GRID_EPS)
def test_calibration_round_trip(target):
    sigma = calibrate_sigma(target, 1e-5, Q_REF, STEPS_REF)
    eps, _ = compute_epsilon(Q_REF, sigma, STEPS_REF, 1e-5)
    assert target * (1 - 1e-2) <= eps <= target


def test_calibration_monotone_in_target_and_steps():
    s_low = calibrate_sigma(0.5, 1e-5, 0.01, 1000)
    s_high = calibrate_sigma(8.0, 1e-5, 0.01, 1000)
    assert s_high < s_low
    prev = 0.0
    for steps in (100, 200, 400, 800, 1600):
        s = calibrate_sigma(2.0, 1e-5, 0.01, steps)
        assert s >= prev
        prev = s


def test_infeasible_budget_raises():
    with pytest.raises(InfeasibleBudget):
        calibrate_sigma(1e-4, 1e-5, 0.5, 10_000)


def test_epsilon_monotone_on_grid():
    qs = (0.001, 0.003, 0.01, 0.03, 0.1)
    sigmas = (0.6, 0.9, 1.3, 2.0, 4.0)
    steps = (10, 100, 500, 1000, 5000)
    eps = np.array([[[compute_epsilon(q, s, t, 1e-5)[0] for t in steps] for s in sigmas] for q in qs])
    assert np.all(np.isfinite(eps))
    assert np.all(np.diff(eps, axis=0) >= -1e-12)  # nondecreasing in q
    assert np.all(np.diff(eps, axis=1) <= 1e-12)  # nonincreasing in sigma
    assert np.all(np.diff(eps, axis=2) >= -1e-12)  # nondecreasing in steps


def test_ledger_keeps_phases_separate():
    led = PrivacyLedger()
    led.open_phase("pretrain", 0.01, 1.0)
    led.open_phase("finetune", 0.05, 2.0)
    led.consume("pretrain", 300)
    led.consume("finetune", 100)
    d = led.to_dict(1e-5)
    assert d["pretrain"]["epsilon"] == pytest.approx(compute_epsilon(0.01, 1.0, 300, 1e-5)[0])
    assert d["finetune"]["epsilon"] == pytest.approx(compute_epsilon(0.05, 2.0, 100, 1e-5)[0])


def test_default_grid_shape():
    ints = [a for a in DEFAULT_ORDERS if float(a).is_integer()]
    assert ints[:3] == [2, 3, 4] and ints[-3:] == [128, 256, 512]
