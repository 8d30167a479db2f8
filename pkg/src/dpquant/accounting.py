"""Renyi-DP accounting for sampled Gaussian mechanisms.

A mechanism event is (sampling rate q, noise scale sigma, step count).  The
per-step Renyi divergence at order a > 1 is log(A_a) / (a - 1) with

    A_a = E_{z ~ N(0, sigma^2)} [ (mu(z) / mu0(z))^a ],
    mu(z) = (1 - q) N(0, sigma^2)(z) + q N(1, sigma^2)(z),  mu0 = N(0, sigma^2).

Integer orders use the exact binomial expansion of A_a evaluated in log
space; fractional orders integrate the mixture ratio with adaptive
quadrature.  Events compose additively in RDP, and the conversion to
(epsilon, delta) takes the minimum over orders of

    RDP(a) + log(1 / delta) / (a - 1).

Events with sigma = 0 are admitted with infinite RDP so that non-private
measurement modes remain representable in a ledger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .errors import ConfigError

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5) + tuple(
    float(a) for a in range(2, 65)
) + (96.0, 128.0)

VALID_TAGS = ("train", "measure")


@dataclass(frozen=True)
class SgmEvent:
    """One sampled-Gaussian release: (sample rate, noise scale, steps, tag)."""

    q: float
    sigma: float
    steps: int
    tag: str = "train"

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"sample rate must be in (0, 1], got {self.q}")
        if self.sigma < 0.0:
            raise ConfigError(f"noise scale must be >= 0, got {self.sigma}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.tag not in VALID_TAGS:
            raise ConfigError(f"tag must be one of {VALID_TAGS}, got {self.tag!r}")


@dataclass
class PrivacyLedger:
    """Append-only list of SGM events with a target delta."""

    delta: float = 1e-5
    events: list[SgmEvent] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")

    def record(self, event: SgmEvent) -> None:
        self.events.append(event)

    def filtered(self, tag: str) -> "PrivacyLedger":
        return PrivacyLedger(
            delta=self.delta, events=[e for e in self.events if e.tag == tag]
        )


@dataclass(frozen=True)
class RdpCurve:
    orders: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.orders, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "orders", o)
        object.__setattr__(self, "values", v)
        if o.shape != v.shape:
            raise ConfigError("orders and values must have the same length")
        if np.any(v < 0):
            raise ConfigError("RDP values must be nonnegative")


def _log_comb(n: float, k: np.ndarray) -> np.ndarray:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _rdp_integer_order(q: float, sigma: float, alpha: int) -> float:
    """Exact binomial-expansion RDP for an integer order, in log space."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        _log_comb(alpha, i)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma**2)
    )
    log_a = special.logsumexp(log_terms)
    return max(float(log_a) / (alpha - 1), 0.0)


def _rdp_fractional_order(q: float, sigma: float, alpha: float) -> float:
    """Adaptive quadrature of the mixture Renyi integral for non-integers."""
    s2 = sigma * sigma
    log_norm = -0.5 * math.log(2.0 * math.pi * s2)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)

    def integrand(z):
        log_ratio = np.logaddexp(log_1mq, log_q + (2.0 * z - 1.0) / (2.0 * s2))
        return np.exp(log_norm - z * z / (2.0 * s2) + alpha * log_ratio)

    total, _ = integrate.quad(integrand, -np.inf, np.inf, limit=200)
    return max(math.log(max(total, 1.0)) / (alpha - 1), 0.0)


@lru_cache(maxsize=4096)
def _rdp_single(q: float, sigma: float, alpha: float) -> float:
    if alpha <= 1.0:
        raise ConfigError(f"Renyi order must be > 1, got {alpha}")
    if sigma == 0.0:
        return math.inf
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    if float(alpha).is_integer():
        return _rdp_integer_order(q, sigma, int(alpha))
    return _rdp_fractional_order(q, sigma, alpha)


def rdp_sgm(q: float, sigma: float, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Per-step RDP curve of the sampled Gaussian mechanism.

    Args:
        q: Poisson sampling rate in (0, 1].
        sigma: noise scale relative to the clipped sensitivity; 0 yields an
            infinite curve.
        orders: Renyi orders, all > 1.

    Returns:
        RdpCurve aligned with ``orders``.
    """
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"sample rate must be in (0, 1], got {q}")
    if sigma < 0.0:
        raise ConfigError(f"noise scale must be >= 0, got {sigma}")
    orders = tuple(float(a) for a in orders)
    values = np.array([_rdp_single(q, sigma, a) for a in orders])
    return RdpCurve(orders=np.array(orders), values=values)


def compose(ledger: PrivacyLedger, orders=DEFAULT_ORDERS) -> RdpCurve:
    """Elementwise sum over events of steps * per-step RDP.

    An empty ledger composes to the zero curve, so epsilon is bounded only
    by the delta-conversion term.
    """
    orders = tuple(float(a) for a in orders)
    total = np.zeros(len(orders))
    for event in ledger.events:
        curve = rdp_sgm(event.q, event.sigma, orders)
        total = total + event.steps * curve.values
    return RdpCurve(orders=np.array(orders), values=total)


def eps_at_delta(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an RDP curve to (epsilon, best_order) at a target delta."""
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must be in (0, 1), got {delta}")
    candidates = curve.values + math.log(1.0 / delta) / (curve.orders - 1.0)
    idx = int(np.argmin(candidates))
    return float(candidates[idx]), float(curve.orders[idx])


def ledger_epsilon(ledger: PrivacyLedger, delta: float | None = None,
                   orders=DEFAULT_ORDERS) -> float:
    delta = ledger.delta if delta is None else delta
    eps, _ = eps_at_delta(compose(ledger, orders), delta)
    return eps


def analysis_fraction(ledger: PrivacyLedger, delta: float | None = None,
                      orders=DEFAULT_ORDERS) -> float:
    """Epsilon of the measure-only ledger over epsilon of the full ledger.

    Zero by construction when the ledger holds no measurement events.
    """
    measure = ledger.filtered("measure")
    if not measure.events:
        return 0.0
    eps_measure = ledger_epsilon(measure, delta, orders)
    eps_total = ledger_epsilon(ledger, delta, orders)
    return eps_measure / eps_total


# -- persistence -----------------------------------------------------------
# One event per line: ``tag q sigma steps``.


def save_ledger(ledger: PrivacyLedger, path) -> None:
    with open(path, "w") as fh:
        for e in ledger.events:
            fh.write(f"{e.tag} {e.q!r} {e.sigma!r} {e.steps}\n")


def load_ledger(path, delta: float = 1e-5) -> PrivacyLedger:
    ledger = PrivacyLedger(delta=delta)
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ConfigError(
                    f"{path}:{line_no}: expected 'tag q sigma steps', got "
                    f"{line!r}"
                )
            tag, q, sigma, steps = parts
            ledger.record(
                SgmEvent(q=float(q), sigma=float(sigma), steps=int(steps),
                         tag=tag)
            )
    return ledger
