"""Renyi-DP accounting for the subsampled Gaussian mechanism."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractViolation, InfeasibleBudget, NumericFault

# Fractional orders only have a closed form without subsampling; they are
# dropped from curves with q < 1.
FRACTIONAL_ORDERS = (1.25, 1.5, 1.75)
INTEGER_ORDERS = tuple(range(2, 65)) + (128, 256, 512)
DEFAULT_ORDERS = FRACTIONAL_ORDERS + INTEGER_ORDERS

SIGMA_MIN = 0.3
SIGMA_MAX = 200.0


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ContractViolation("orders and values differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ContractViolation("RDP orders must be strictly increasing")
        if any(a <= 1 for a in self.orders):
            raise ContractViolation("RDP orders must exceed 1")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ContractViolation("cannot add RDP curves over different orders")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.values, other.values)))


def rdp_gaussian(sigma: float, alpha: float) -> float:
    if not sigma > 0 or not alpha > 1:
        raise ContractViolation("need sigma > 0 and alpha > 1")
    if math.isinf(sigma):
        return 0.0
    return alpha / (2.0 * sigma * sigma)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """RDP of the Poisson-subsampled Gaussian at integer order ``alpha``.

    ``log(sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 sigma^2))) / (a-1)``.
    The binomial terms sum to one, so the argument is ``1 + S`` with
    ``S = sum_{k>=2} C(a,k) (1-q)^(a-k) q^k expm1(k(k-1) / (2 sigma^2))``;
    every term of ``S`` is nonnegative and it is summed in log space, which
    keeps full relative precision when ``S`` is tiny.
    """
    if not 0 <= q <= 1:
        raise ContractViolation("sampling rate must lie in [0, 1]")
    if not sigma > 0:
        raise ContractViolation("sigma must be positive")
    if int(alpha) != alpha or alpha < 2:
        raise ContractViolation("subsampled bound needs an integer order >= 2")
    alpha = int(alpha)
    if q == 0 or math.isinf(sigma):
        return 0.0
    if q == 1:
        return rdp_gaussian(sigma, alpha)
    k = np.arange(2, alpha + 1, dtype=np.float64)
    x = k * (k - 1) / (2.0 * sigma * sigma)
    # log(expm1(x)), stable for both small and large x
    log_expm1 = np.where(x < 30.0, np.log(np.expm1(np.minimum(x, 30.0))), x + np.log1p(-np.exp(-x)))
    log_terms = (
        special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
        + k * math.log(q) + (alpha - k) * math.log1p(-q) + log_expm1
    )
    log_a = float(np.logaddexp(0.0, special.logsumexp(log_terms)))
    rdp = log_a / (alpha - 1)
    if not math.isfinite(rdp):
        raise NumericFault("rdp_subsampled_gaussian",
                           f"RDP overflow at q={q}, sigma={sigma}, alpha={alpha}; use a larger sigma")
    # the sum is >= 1 analytically; clamp rounding noise
    return max(rdp, 0.0)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Single-step RDP at every usable order."""
    used, vals = [], []
    for a in orders:
        if float(a).is_integer():
            used.append(a)
            vals.append(rdp_subsampled_gaussian(q, sigma, int(a)))
        elif q == 1:
            used.append(a)
            vals.append(rdp_gaussian(sigma, a))
    return RdpCurve(tuple(used), tuple(vals))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    if steps < 0:
        raise ContractViolation("steps must be non-negative")
    return RdpCurve(curve.orders, tuple(v * steps for v in curve.values))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Return ``(epsilon, best_order)`` for the given ``delta``."""
    if not 0 < delta < 1:
        raise ContractViolation("delta must lie in (0, 1)")
    if not curve.orders:
        raise ContractViolation("empty RDP curve")
    log_inv_delta = math.log(1.0 / delta)
    best_eps, best_order = math.inf, curve.orders[0]
    for a, v in zip(curve.orders, curve.values):
        eps = v + log_inv_delta / (a - 1)
        if eps < best_eps:
            best_eps, best_order = eps, a
    return best_eps, best_order


def compute_epsilon(q: float, sigma: float, steps: int, delta: float,
                    orders=DEFAULT_ORDERS) -> tuple[float, float]:
    return rdp_to_dp(compose(rdp_curve(q, sigma, orders), steps), delta)


def calibrate_sigma(target_eps: float, delta: float, q: float, steps: int,
                    lo: float = SIGMA_MIN, hi: float = SIGMA_MAX, iterations: int = 60) -> float:
    """Smallest noise multiplier whose accounted epsilon stays within ``target_eps``.

    Bisection over ``[lo, hi]``; raises :class:`InfeasibleBudget` when even
    ``hi`` overspends. If ``lo`` already satisfies the target, ``lo`` is
    returned and the budget is under-spent.
    """
    if not target_eps > 0:
        raise ContractViolation("target epsilon must be positive")
    if steps < 1:
        raise ContractViolation("calibration needs at least one step")

    def eps(s):
        return compute_epsilon(q, s, steps, delta)[0]

    if eps(hi) > target_eps:
        raise InfeasibleBudget(
            f"epsilon={target_eps} unreachable with sigma <= {hi} for q={q:.3g}, steps={steps}"
        )
    if eps(lo) <= target_eps:
        return lo
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class PhaseRecord:
    sampling_rate: float
    noise_multiplier: float
    steps: int = 0

    def curve(self) -> RdpCurve:
        if self.noise_multiplier == 0:
            raise ContractViolation("non-private phase has no RDP guarantee")
        return compose(rdp_curve(self.sampling_rate, self.noise_multiplier), self.steps)


@dataclass
class PrivacyLedger:
    """Per-phase privacy spend; phases cover disjoint datasets and never compose."""

    phases: dict[str, PhaseRecord] = field(default_factory=dict)

    def open_phase(self, name: str, sampling_rate: float, noise_multiplier: float):
        self.phases[name] = PhaseRecord(sampling_rate, noise_multiplier)

    def consume(self, name: str, steps: int = 1):
        self.phases[name].steps += steps

    def epsilon(self, name: str, delta: float) -> tuple[float, float]:
        rec = self.phases[name]
        if rec.noise_multiplier == 0:
            return math.inf, float("nan")
        if rec.steps == 0:
            return 0.0, float("nan")
        return rdp_to_dp(rec.curve(), delta)

    def to_dict(self, delta: float) -> dict:
        out = {}
        for name, rec in self.phases.items():
            eps, order = self.epsilon(name, delta)
            out[name] = {
                "sampling_rate": rec.sampling_rate,
                "noise_multiplier": rec.noise_multiplier,
                "steps": rec.steps,
                "delta": delta,
                "epsilon": eps,
                "best_order": order,
            }
        return out
