"""Moments accountant for the subsampled Gaussian mechanism.

The log-moment of order ``lam`` for one step with sampling rate ``q`` and noise
multiplier ``sigma`` is

    log E_{z ~ N(0, sigma^2)} [ ((1 - q) + q * exp((2z - 1) / (2 sigma^2)))^(lam + 1) ]

which expands binomially into

    log sum_k C(lam+1, k) (1-q)^(lam+1-k) q^k exp((k^2 - k) / (2 sigma^2)).

All terms are positive, so the sum is evaluated with log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS = tuple(range(1, 65))


def single_step_log_moment(q: float, sigma: float, lambda_order: int) -> float:
    """Log moment of the privacy loss for one subsampled Gaussian step."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if lambda_order < 1 or int(lambda_order) != lambda_order:
        raise ValueError("moment order must be a positive integer")
    if q == 0.0:
        return 0.0
    if sigma <= 0.0:
        return math.inf
    n = int(lambda_order) + 1
    if q == 1.0:
        # only the k = n term survives
        return float(n * (n - 1) / (2.0 * sigma * sigma))
    k = np.arange(n + 1, dtype=np.float64)
    log_binom = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    terms = log_binom + k * math.log(q) + (n - k) * math.log1p(-q) + (k * k - k) / (2.0 * sigma * sigma)
    return float(logsumexp(terms))


@dataclass(frozen=True)
class PrivacyLedger:
    """Accumulated privacy state. ``log_moments[i]`` belongs to ``orders[i]``."""

    sampling_rate: float
    noise_scale: float
    steps: int = 0
    orders: tuple[int, ...] = DEFAULT_ORDERS
    per_step: tuple[float, ...] = ()
    sampling: str = "fixed"

    def __post_init__(self):
        if not self.per_step:
            object.__setattr__(self, "per_step", tuple(
                single_step_log_moment(self.sampling_rate, self.noise_scale, lam)
                for lam in self.orders
            ))

    @property
    def log_moments(self) -> np.ndarray:
        per = np.asarray(self.per_step, dtype=np.float64)
        if self.steps == 0:
            return np.zeros_like(per)
        return self.steps * per

    def to_dict(self) -> dict:
        return {
            "sampling_rate": self.sampling_rate,
            "noise_scale": self.noise_scale,
            "steps": self.steps,
            "orders": list(self.orders),
            "sampling": self.sampling,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyLedger":
        return cls(d["sampling_rate"], d["noise_scale"], d["steps"], tuple(d["orders"]),
                   sampling=d.get("sampling", "fixed"))


def make_ledger(q: float, sigma: float, orders=DEFAULT_ORDERS, sampling: str = "fixed") -> PrivacyLedger:
    return PrivacyLedger(float(q), float(sigma), 0, tuple(int(o) for o in orders), sampling=sampling)


def advance(ledger: PrivacyLedger, num_steps: int = 1) -> PrivacyLedger:
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    return replace(ledger, steps=ledger.steps + int(num_steps))


def _is_trivial(ledger: PrivacyLedger) -> bool:
    return ledger.steps == 0 or ledger.sampling_rate == 0.0


def epsilon_with_order(ledger: PrivacyLedger, delta: float) -> tuple[float, int | None]:
    """Smallest ε over the tracked orders together with the minimising order."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if _is_trivial(ledger):
        return 0.0, None
    lm = ledger.log_moments
    if not np.all(np.isfinite(lm)):
        return math.inf, None
    orders = np.asarray(ledger.orders, dtype=np.float64)
    eps = (lm + math.log(1.0 / delta)) / orders
    i = int(np.argmin(eps))
    return float(eps[i]), int(ledger.orders[i])


def epsilon_for_delta(ledger: PrivacyLedger, delta: float) -> float:
    return epsilon_with_order(ledger, delta)[0]


def delta_with_order(ledger: PrivacyLedger, epsilon: float) -> tuple[float, int | None]:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if _is_trivial(ledger):
        return 0.0, None
    lm = ledger.log_moments
    if not np.all(np.isfinite(lm)):
        return 1.0, None
    orders = np.asarray(ledger.orders, dtype=np.float64)
    log_delta = lm - orders * epsilon
    i = int(np.argmin(log_delta))
    return float(min(1.0, math.exp(min(log_delta[i], 0.0)))), int(ledger.orders[i])


def delta_for_epsilon(ledger: PrivacyLedger, epsilon: float) -> float:
    return delta_with_order(ledger, epsilon)[0]


def budget_exceeded(ledger: PrivacyLedger, target_delta: float, target_epsilon: float,
                    convention: str = "epsilon") -> bool:
    """True when the ledger has spent more than (target_epsilon, target_delta).

    ``convention="epsilon"`` compares ε at ``target_delta`` against ``target_epsilon``;
    ``"delta"`` compares δ at ``target_epsilon`` against ``target_delta``.
    """
    if math.isinf(target_epsilon):
        return False
    if convention == "epsilon":
        return epsilon_for_delta(ledger, target_delta) > target_epsilon
    if convention == "delta":
        return delta_for_epsilon(ledger, target_epsilon) > target_delta
    raise ValueError(f"unknown budget convention {convention!r}")
