"""Perturbation mechanisms and their variance (utility) functions.

Randomness comes from ``numpy.random.Generator`` over the PCG64 bit
generator. Laplace noise is produced by inverse-CDF from one uniform double
per cell, so a seed fixes every released count on any platform running
the same numpy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBudget, NonInvertibleUtility, VarianceUnachievable
from .types import Database, Mechanism, Pattern, PrivacySpec

logger = logging.getLogger(__name__)

MAX_BRACKET_STEPS = 64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def laplace_noise(rng: np.random.Generator, scale: float, size: int) -> np.ndarray:
    """Draw ``size`` Laplace(0, scale) variates by inverting the CDF."""
    u = rng.random(size) - 0.5
    # u == -0.5 has probability 2**-53; map it to the largest finite draw
    tail = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(float).tiny)
    return -scale * np.sign(u) * np.log(tail)


@dataclass(frozen=True, eq=False)
class PerturbedAnswer:
    counts: np.ndarray
    spec_achieved: PrivacySpec


def _as_losses(budgets) -> np.ndarray:
    if isinstance(budgets, PrivacySpec):
        return budgets.losses
    arr = np.asarray(budgets, dtype=float)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise InvalidBudget("budgets must be a non-empty finite vector")
    return arr


def _positive_budgets(budgets) -> np.ndarray:
    eps = _as_losses(budgets)
    if np.any(eps <= 0):
        raise InvalidBudget("every budget must be > 0")
    return eps


def true_histogram(db: Database) -> np.ndarray:
    return np.bincount(db.locations, minlength=db.cell_count)


def inclusion_probabilities(losses) -> np.ndarray:
    """Sampling probability ``(e^eps_i - 1) / (e^eps_max - 1)`` per owner.

    Evaluated as ``e^(eps_i - eps_max) * expm1(-eps_i) / expm1(-eps_max)``,
    which neither overflows for large losses nor cancels for small ones.
    """
    eps = _as_losses(losses)
    top = eps.max()
    if not top > 0:
        raise InvalidBudget("at least one loss must be > 0")
    return np.exp(eps - top) * np.expm1(-eps) / np.expm1(-top)


def laplace_mechanism(db: Database, budgets, sensitivity: float,
                      rng: np.random.Generator) -> PerturbedAnswer:
    eps = _positive_budgets(budgets)
    if eps.size != db.n:
        raise InvalidBudget("budget vector length does not match database")
    floor = eps.min()
    noise = laplace_noise(rng, sensitivity / floor, db.cell_count)
    counts = true_histogram(db) + noise
    return PerturbedAnswer(counts, PrivacySpec(np.full(db.n, floor)))


def sample_mechanism(db: Database, budgets, sensitivity: float,
                     rng: np.random.Generator) -> PerturbedAnswer:
    """Subsample owners with personalized probabilities, then add Laplace noise
    calibrated to the largest budget."""
    eps = _positive_budgets(budgets)
    if eps.size != db.n:
        raise InvalidBudget("budget vector length does not match database")
    keep = rng.random(db.n) < inclusion_probabilities(eps)
    hist = np.bincount(db.locations[keep], minlength=db.cell_count)
    noise = laplace_noise(rng, sensitivity / eps.max(), db.cell_count)
    return PerturbedAnswer(hist + noise, PrivacySpec(eps))


def perturb(mechanism: Mechanism, db: Database, budgets, sensitivity: float,
            rng: np.random.Generator) -> PerturbedAnswer:
    if mechanism is Mechanism.LAPLACE_UNIFORM:
        return laplace_mechanism(db, budgets, sensitivity, rng)
    return sample_mechanism(db, budgets, sensitivity, rng)


def utility_laplace(budgets, sensitivity: float) -> float:
    eps = _positive_budgets(budgets)
    return 2.0 * (sensitivity / eps.min()) ** 2


def utility_sample(losses, sensitivity: float) -> float:
    """Worst-case per-cell variance of the Sample mechanism.

    Sum of the Bernoulli inclusion variances over all owners plus the
    Laplace variance at the largest loss.
    """
    eps = _as_losses(losses)
    if np.any(eps < 0):
        raise InvalidBudget("losses must be >= 0")
    p = inclusion_probabilities(eps)
    return float(np.sum(p * (1.0 - p))) + 2.0 * (sensitivity / eps.max()) ** 2


def patterned_utility(pattern: Pattern, eps_base: float, sensitivity: float,
                      mechanism: Mechanism) -> float:
    if not eps_base > 0:
        raise InvalidBudget("eps_base must be > 0")
    losses = pattern.rho * eps_base
    if mechanism is Mechanism.LAPLACE_UNIFORM:
        return utility_laplace(losses, sensitivity)
    return utility_sample(losses, sensitivity)


def grouped_utility(values, sizes, eps, sensitivity: float, derivatives: bool = False):
    """Sample-mechanism patterned utility for a pattern given as groups.

    ``values`` are the distinct pattern entries and ``sizes`` their
    multiplicities; ``eps`` may be an array of base losses. With
    ``derivatives=True`` returns ``(U, U', U'')`` in closed form.
    """
    g = np.asarray(values, dtype=float)[:, None]
    m = np.asarray(sizes, dtype=float)[:, None]
    e = np.atleast_1d(np.asarray(eps, dtype=float))[None, :]
    live = g > 0
    gs = np.where(live, g, 1.0)  # placeholder for zero groups, masked below

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        p = np.where(live, np.exp((gs - 1) * e) * np.expm1(-gs * e) / np.expm1(-e), 0.0)
        s = p * (1 - p)
        lap = 2 * sensitivity ** 2 / e[0] ** 2
        u = np.sum(m * s, axis=0) + lap
        if not derivatives:
            return u if np.ndim(eps) else float(u[0])

        def h(a):  # d/de log(1 - e^{-a e})
            return a * np.exp(-a * e) / -np.expm1(-a * e)

        def dh(a):
            return -a * a * np.exp(-a * e) / np.expm1(-a * e) ** 2

        l1 = np.where(live, (gs - 1) + h(gs) - h(1.0), 0.0)
        l2 = np.where(live, dh(gs) - dh(1.0), 0.0)
        p1 = p * l1
        p2 = p * (l1 * l1 + l2)
        u1 = np.sum(m * p1 * (1 - 2 * p), axis=0) - 4 * sensitivity ** 2 / e[0] ** 3
        u2 = (np.sum(m * (p2 * (1 - 2 * p) - 2 * p1 * p1), axis=0)
              + 12 * sensitivity ** 2 / e[0] ** 4)
    if np.ndim(eps):
        return u, u1, u2
    return float(u[0]), float(u1[0]), float(u2[0])


def inverse_patterned_utility(pattern: Pattern, v: float, sensitivity: float,
                              mechanism: Mechanism, tol: float = 1e-10) -> float:
    """Base loss whose patterned utility equals ``v`` (relative tolerance ``tol``).

    Laplace inverts in closed form. Sample brackets the root by doubling (or
    halving) from 1 and then bisects.
    """
    if not v > 0:
        raise VarianceUnachievable(f"variance must be > 0, got {v!r}")
    if mechanism is Mechanism.LAPLACE_UNIFORM:
        floor = pattern.rho.min()
        if floor <= 0:
            raise InvalidBudget("Laplace pricing needs a pattern with no zero entries")
        return sensitivity * np.sqrt(2.0 / v) / floor

    def f(x):
        return patterned_utility(pattern, x, sensitivity, mechanism)

    lo, hi = _bracket(f, v)
    if lo == hi:
        return lo
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        u = f(mid)
        if abs(u - v) <= tol * v:
            return mid
        if u > v:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 2 * np.spacing(hi):
            break
    logger.debug("bisection hit float resolution at eps=%r for v=%r", mid, v)
    return mid


def _bracket(f, v):
    """Return ``(lo, hi)`` with ``f(lo) >= v >= f(hi)``, checking monotonicity."""
    x = 1.0
    u = f(x)
    if u == v:
        return x, x
    if u > v:
        for _ in range(MAX_BRACKET_STEPS):
            nxt = 2.0 * x
            un = f(nxt)
            if un > u:
                raise NonInvertibleUtility(
                    f"utility increases between eps={x!r} and eps={nxt!r}")
            if un <= v:
                return x, nxt
            x, u = nxt, un
        raise VarianceUnachievable(f"variance {v!r} is below the utility's range")
    for _ in range(MAX_BRACKET_STEPS):
        nxt = 0.5 * x
        un = f(nxt)
        if un < u:
            raise NonInvertibleUtility(
                f"utility decreases between eps={nxt!r} and eps={x!r}")
        if un >= v:
            return nxt, x
        x, u = nxt, un
    raise VarianceUnachievable(f"variance {v!r} is above the utility's range")


def invert_grouped(values, sizes, v, sensitivity: float) -> np.ndarray:
    """Vectorized inverse of :func:`grouped_utility` for an array of variances.

    Brackets every target by doubling/halving from 1, then runs 64 bisection
    steps, which shrinks each bracket to float resolution. Targets outside
    the reachable range come back as NaN.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    lo = np.ones_like(v)
    hi = np.ones_like(v)
    u_hi = grouped_utility(values, sizes, hi, sensitivity)
    u_lo = u_hi.copy()
    for _ in range(MAX_BRACKET_STEPS):
        grow = u_hi > v
        shrink = u_lo < v
        if not (grow.any() or shrink.any()):
            break
        hi = np.where(grow, 2 * hi, hi)
        lo = np.where(shrink, 0.5 * lo, lo)
        lo = np.where(grow, 0.5 * hi, lo)
        hi = np.where(shrink, 2 * lo, hi)
        u_hi = grouped_utility(values, sizes, hi, sensitivity)
        u_lo = grouped_utility(values, sizes, lo, sensitivity)
    bad = (u_hi > v) | (u_lo < v)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        above = grouped_utility(values, sizes, mid, sensitivity) > v
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = 0.5 * (lo + hi)
    out[bad] = np.nan
    return out
