"""Patterned pricing, sufficient-condition checks, and an arbitrage search.

A pattern's price curve is arbitrage-free when its patterned utility ``U``
is strictly decreasing, satisfies ``U * U'' <= 2 * U'**2`` everywhere, and
blows up as the base loss goes to zero. The second condition is reported as
the scale-free slack ``2 - U * U'' / U'**2`` (non-negative when it holds).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .mechanisms import grouped_utility, inverse_patterned_utility, invert_grouped
from .types import Database, EpsGrid, MarketConfig, Mechanism, Pattern, PrivacySpec

logger = logging.getLogger(__name__)

DECREASE_TOL = 1e-12
CONVEXITY_TOL = 1e-8
BLOWUP_RATIO = 1e6
BLOWUP_DECADES = 3
ARBITRAGE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class PriceQuote:
    variance: float
    base_loss: float
    price: float
    per_owner_loss: PrivacySpec
    per_owner_compensation: np.ndarray


def quote_at_base(pattern: Pattern, eps_base: float, v: float, db: Database,
                  cfg: MarketConfig) -> PriceQuote:
    losses = pattern.rho * eps_base
    comp = db.compensation_rates * losses
    total = (1.0 + cfg.brokerage_rate) * math.fsum(comp)
    return PriceQuote(float(v), float(eps_base), total, PrivacySpec(losses), comp)


def price(pattern: Pattern, v: float, db: Database, cfg: MarketConfig) -> PriceQuote:
    """Quote the price of a histogram answer with per-cell variance ``v``."""
    eps_base = inverse_patterned_utility(pattern, v, cfg.sensitivity, cfg.mechanism,
                                         cfg.root_tol)
    return quote_at_base(pattern, eps_base, v, db, cfg)


def pricing_function(pattern: Pattern, compensation_rates: Sequence[float],
                     brokerage_rate: float, sensitivity: float,
                     mechanism: Mechanism) -> Callable:
    """Vectorized ``v -> price`` for a fixed pattern.

    Unreachable variances map to NaN.
    """
    weight = (1.0 + brokerage_rate) * float(np.dot(compensation_rates, pattern.rho))
    if mechanism is Mechanism.LAPLACE_UNIFORM:
        floor = pattern.rho.min()

        def curve(v):
            v = np.asarray(v, dtype=float)
            return weight * sensitivity * np.sqrt(2.0 / v) / floor
    else:
        values, sizes = pattern.groups()

        def curve(v):
            scalar = np.ndim(v) == 0
            out = weight * invert_grouped(values, sizes, v, sensitivity)
            return float(out[0]) if scalar else out
    return curve


def condition_slacks(values, sizes, eps, sensitivity: float):
    """Return ``(U, U', U'', convexity_slack)`` on the array ``eps``."""
    u, u1, u2 = grouped_utility(values, sizes, eps, sensitivity, derivatives=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = np.where(u1 != 0, 2.0 - u * u2 / (u1 * u1), -np.inf)
    return u, u1, u2, slack


@dataclass
class ConditionReport:
    holds: bool
    violations: List[Tuple[float, int, float]] = field(default_factory=list)

    def to_dict(self):
        return {"holds": self.holds,
                "violations": [{"eps": e, "condition": c, "slack": s}
                               for e, c, s in self.violations]}


def _resolve_grid(grid, max_loss: Optional[float]) -> np.ndarray:
    if isinstance(grid, EpsGrid):
        return grid.points(1.0 if max_loss is None else max_loss)
    pts = np.sort(np.asarray(grid, dtype=float))
    if pts.ndim != 1 or pts.size < 2 or pts[0] <= 0:
        raise ValueError("grid must hold at least two positive points")
    return pts


def check_theorem3(pattern: Pattern, sensitivity: float, grid,
                   max_loss: Optional[float] = None,
                   tol: float = CONVEXITY_TOL) -> ConditionReport:
    """Check the sufficient arbitrage-freeness conditions on a grid.

    Condition 1 needs ``U' <= -1e-12`` and condition 2 a convexity slack of
    at least ``-tol`` at every grid point. Condition 3 (unbounded growth at
    0+) is checked heuristically: ``U`` must keep increasing over three
    decades below the grid and end at least 1e6 times its value at the
    grid's middle point.
    """
    eps = _resolve_grid(grid, max_loss)
    values, sizes = pattern.groups()
    u, u1, _, slack = condition_slacks(values, sizes, eps, sensitivity)
    violations = []
    for i in np.flatnonzero(~(u1 <= -DECREASE_TOL)):
        violations.append((float(eps[i]), 1, float(-u1[i])))
    for i in np.flatnonzero(~(slack >= -tol)):
        violations.append((float(eps[i]), 2, float(slack[i])))

    probes = eps[0] * 10.0 ** -np.arange(BLOWUP_DECADES + 1)
    u_probe = grouped_utility(values, sizes, probes, sensitivity)
    u_mid = u[eps.size // 2]
    ratio = u_probe[-1] / u_mid
    if not (np.all(np.diff(u_probe) > 0) and ratio >= BLOWUP_RATIO):
        violations.append((float(probes[-1]), 3, float(ratio)))
    violations.sort(key=lambda t: (t[1], t[0]))
    return ConditionReport(not violations, violations)


@dataclass(frozen=True)
class Counterexample:
    """A variance ``v`` undercut by buying ``variances`` and combining them
    with ``coefficients``."""

    v: float
    variances: Tuple[float, ...]
    coefficients: Tuple[float, ...]
    target_price: float
    bundle_price: float

    def to_dict(self):
        return {"v": self.v, "variances": list(self.variances),
                "coefficients": list(self.coefficients),
                "target_price": self.target_price, "bundle_price": self.bundle_price}


@dataclass
class ArbitrageReport:
    free: bool
    counterexamples: List[Counterexample] = field(default_factory=list)

    def to_dict(self, limit: Optional[int] = None):
        cex = self.counterexamples if limit is None else self.counterexamples[:limit]
        return {"free": self.free, "counterexample_count": len(self.counterexamples),
                "counterexamples": [c.to_dict() for c in cex]}


def _vectorized(pricing: Callable) -> Callable:
    def call(v):
        v = np.asarray(v, dtype=float)
        try:
            out = np.asarray(pricing(v), dtype=float)
            if out.shape == v.shape:
                return out
        except (TypeError, ValueError):
            pass
        return np.array([float(pricing(float(x))) for x in v.ravel()]).reshape(v.shape)
    return call


def arbitrage_oracle(pricing: Callable, v_grid: Sequence[float], m_max: int = 8,
                     rel_slack: float = ARBITRAGE_SLACK) -> ArbitrageReport:
    """Search two families of bundles for arbitrage.

    Equal splits: ``m`` answers at variance ``m*v`` averaged with weights
    ``1/m`` reproduce variance ``v``. Pairs: answers at ``v1`` and ``v2``
    combined with inverse-variance weights give ``v1*v2/(v1+v2)``. This
    refutes arbitrage-freeness soundly but cannot prove it.
    """
    if m_max < 2:
        raise ValueError("m_max must be >= 2")
    pi = _vectorized(pricing)
    grid = np.unique(np.asarray(v_grid, dtype=float))
    if grid.size == 0 or grid[0] <= 0:
        raise ValueError("v_grid must hold positive variances")
    base = pi(grid)
    found = []

    for m in range(2, m_max + 1):
        split = m * pi(m * grid)
        hit = split < base * (1.0 - rel_slack)
        for i in np.flatnonzero(hit):
            found.append(Counterexample(float(grid[i]), (float(m * grid[i]),) * m,
                                        (1.0 / m,) * m, float(base[i]), float(split[i])))

    i, j = np.triu_indices(grid.size, k=1)
    v1, v2 = grid[i], grid[j]
    v_eff = v1 * v2 / (v1 + v2)
    bundle = base[i] + base[j]
    target = pi(v_eff)
    hit = bundle < target * (1.0 - rel_slack)
    for t in np.flatnonzero(hit):
        a1 = v2[t] / (v1[t] + v2[t])
        found.append(Counterexample(float(v_eff[t]), (float(v1[t]), float(v2[t])),
                                    (float(a1), float(1.0 - a1)),
                                    float(target[t]), float(bundle[t])))
    if found:
        logger.info("arbitrage oracle found %d counterexamples", len(found))
    return ArbitrageReport(not found, found)
