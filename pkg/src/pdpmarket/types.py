"""Domain types shared across the marketplace.

Privacy losses are in nats: an owner with loss ``eps`` sees output
probabilities change by at most a factor ``exp(eps)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidBudget, InvalidPattern, LedgerUnderflow


class Mechanism(str, enum.Enum):
    """Perturbation mechanism paired with its budget allocator."""

    LAPLACE_UNIFORM = "LaplaceUniform"
    SAMPLE_GROUPING = "SampleGrouping"

    @classmethod
    def parse(cls, text: str) -> "Mechanism":
        for m in cls:
            if text.strip().lower() == m.value.lower():
                return m
        raise ValueError(f"unknown mechanism {text!r}; expected one of "
                         f"{', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class Owner:
    id: str
    location: int
    max_tolerable_loss: float
    compensation_rate: float

    def __post_init__(self):
        if not self.max_tolerable_loss > 0:
            raise ValueError(f"owner {self.id}: max_tolerable_loss must be > 0")
        if not self.compensation_rate > 0:
            raise ValueError(f"owner {self.id}: compensation_rate must be > 0")
        if self.location < 0:
            raise ValueError(f"owner {self.id}: location must be >= 0")


@dataclass(frozen=True)
class Database:
    """Owners in a fixed order plus the histogram width ``cell_count``."""

    owners: tuple
    cell_count: int

    def __post_init__(self):
        object.__setattr__(self, "owners", tuple(self.owners))
        if not self.owners:
            raise ValueError("database needs at least one owner")
        if self.cell_count < 1:
            raise ValueError("cell_count must be a positive integer")
        seen = set()
        for o in self.owners:
            if o.id in seen:
                raise ValueError(f"duplicate owner id {o.id!r}")
            seen.add(o.id)
            if o.location >= self.cell_count:
                raise ValueError(
                    f"owner {o.id}: location {o.location} outside "
                    f"0..{self.cell_count - 1}")

    @property
    def n(self) -> int:
        return len(self.owners)

    @property
    def locations(self) -> np.ndarray:
        return np.array([o.location for o in self.owners], dtype=np.int64)

    @property
    def max_losses(self) -> np.ndarray:
        return np.array([o.max_tolerable_loss for o in self.owners], dtype=float)

    @property
    def compensation_rates(self) -> np.ndarray:
        return np.array([o.compensation_rate for o in self.owners], dtype=float)


@dataclass(frozen=True, eq=False)
class PrivacySpec:
    """Per-owner privacy losses (or budgets), aligned with database order."""

    losses: np.ndarray

    def __post_init__(self):
        arr = np.array(self.losses, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidBudget("privacy spec must be a non-empty vector")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise InvalidBudget("privacy losses must be finite and >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "losses", arr)

    def __len__(self):
        return self.losses.size

    @property
    def max(self) -> float:
        return float(self.losses.max())

    @property
    def min(self) -> float:
        return float(self.losses.min())


@dataclass(frozen=True, eq=False)
class Pattern:
    """Normalized loss shape: entries in [0, 1] with maximum exactly 1."""

    rho: np.ndarray

    def __post_init__(self):
        arr = np.array(self.rho, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidPattern("pattern must be a non-empty vector")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
            raise InvalidPattern("pattern entries must lie in [0, 1]")
        if arr.max() != 1.0:
            raise InvalidPattern("pattern maximum must be exactly 1")
        arr.setflags(write=False)
        object.__setattr__(self, "rho", arr)

    def __len__(self):
        return self.rho.size

    def __eq__(self, other):
        return isinstance(other, Pattern) and np.array_equal(self.rho, other.rho)

    def __hash__(self):
        return hash(self.rho.tobytes())

    @classmethod
    def ones(cls, n: int) -> "Pattern":
        return cls(np.ones(n))

    def groups(self):
        """Distinct values and their multiplicities, ascending."""
        values, counts = np.unique(self.rho, return_counts=True)
        return values, counts


def make_pattern(raw: Sequence[float]) -> Pattern:
    """Scale ``raw`` so that its largest entry is exactly 1."""
    arr = np.asarray(raw, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidPattern("pattern input must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidPattern("pattern input must be finite and non-negative")
    top = arr.max()
    if top <= 0:
        raise InvalidPattern("pattern input is all zero")
    rho = arr / top
    # x / x is exactly 1 in IEEE arithmetic, but guard against any drift
    rho[arr == top] = 1.0
    return Pattern(np.minimum(rho, 1.0))


class PrivacyLedger:
    """Remaining tolerable loss per owner across a session of sales.

    Cumulative spend is tracked with Neumaier-compensated sums so that
    ``remaining + sum(spent)`` reproduces the owner's cap to within a few ulps.
    """

    def __init__(self, max_losses: Sequence[float]):
        caps = np.array(max_losses, dtype=float)
        if caps.ndim != 1 or caps.size == 0 or np.any(~(caps > 0)):
            raise InvalidBudget("maximum tolerable losses must be positive")
        self.max_losses = caps
        self.spent: list = []  # one array of per-owner losses per debit
        self._total = np.zeros_like(caps)
        self._comp = np.zeros_like(caps)

    @classmethod
    def from_database(cls, db: Database) -> "PrivacyLedger":
        return cls(db.max_losses)

    def __len__(self):
        return self.max_losses.size

    @property
    def remaining(self) -> np.ndarray:
        return np.maximum(self.max_losses - (self._total + self._comp), 0.0)

    @property
    def spent_total(self) -> np.ndarray:
        return self._total + self._comp

    def debit(self, losses, rel_tol: float = 1e-12) -> None:
        x = np.asarray(losses.losses if isinstance(losses, PrivacySpec) else losses,
                       dtype=float)
        if x.shape != self.max_losses.shape:
            raise ValueError("debit vector length does not match ledger")
        if np.any(x < 0):
            raise ValueError("cannot debit a negative loss")
        over = x - self.remaining > rel_tol * self.max_losses
        if np.any(over):
            i = int(np.flatnonzero(over)[0])
            raise LedgerUnderflow(
                f"owner index {i}: loss {x[i]!r} exceeds remaining "
                f"{self.remaining[i]!r}")
        t = self._total + x
        big = np.abs(self._total) >= np.abs(x)
        self._comp += np.where(big, (self._total - t) + x, (x - t) + self._total)
        self._total = t
        self.spent.append(x.copy())

    def exhausted(self, fraction: float) -> np.ndarray:
        """Mask of owners whose remaining loss is below ``fraction`` of their cap."""
        return self.remaining < fraction * self.max_losses

    def conservation_error(self) -> float:
        """Largest ``|remaining + sum(spent) - cap| / cap`` over owners (exact sums)."""
        rem = self.remaining
        worst = 0.0
        for i, cap in enumerate(self.max_losses):
            total = math.fsum([rem[i]] + [float(s[i]) for s in self.spent])
            worst = max(worst, abs(total - cap) / cap)
        return worst

    def copy(self) -> "PrivacyLedger":
        other = PrivacyLedger(self.max_losses)
        other.spent = [s.copy() for s in self.spent]
        other._total = self._total.copy()
        other._comp = self._comp.copy()
        return other


@dataclass(frozen=True)
class EpsGrid:
    """Log-spaced grid of base losses used for pattern checks.

    The upper end is ``max_factor`` times the largest tolerable loss, so it is
    resolved against a roster with :meth:`points`.
    """

    lo: float = 1e-3
    max_factor: float = 10.0
    count: int = 512

    def __post_init__(self):
        if not (self.lo > 0 and self.max_factor > 0 and self.count >= 2):
            raise ValueError("invalid eps grid")

    def upper(self, max_loss: float) -> float:
        return max(self.max_factor * max_loss, self.lo * 10)

    def points(self, max_loss: float) -> np.ndarray:
        return np.geomspace(self.lo, self.upper(max_loss), self.count)

    def denser(self, factor: int = 10) -> "EpsGrid":
        return EpsGrid(self.lo, self.max_factor, self.count * factor)


@dataclass(frozen=True)
class MarketConfig:
    brokerage_rate: float = 0.0
    sensitivity: float = 2.0
    group_count: int = 4
    mechanism: Mechanism = Mechanism.LAPLACE_UNIFORM
    exhaustion_fraction: float = 1e-6
    rng_seed: int = 0
    eps_grid: EpsGrid = field(default_factory=EpsGrid)
    root_tol: float = 1e-10
    cell_count: Optional[int] = None
    sip_max_iters: int = 100

    def __post_init__(self):
        if self.brokerage_rate < 0:
            raise ValueError("brokerage_rate must be >= 0")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be > 0")
        if self.group_count < 1:
            raise ValueError("group_count must be a positive integer")
        if not 0 < self.exhaustion_fraction < 1:
            raise ValueError("exhaustion_fraction must lie in (0, 1)")
        if not 0 < self.root_tol < 1:
            raise ValueError("root_tol must lie in (0, 1)")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def check_database(self, db: Database) -> None:
        if self.mechanism is Mechanism.SAMPLE_GROUPING and self.group_count > db.n:
            raise ValueError(
                f"group_count {self.group_count} exceeds owner count {db.n}")
        if self.cell_count is not None and self.cell_count != db.cell_count:
            raise ValueError("config cell_count disagrees with database")


@dataclass(frozen=True, eq=False)
class QueryTransaction:
    """One accepted sale: what was asked, what it cost, what was released."""

    k: int
    requested_variance: float
    min_affordable_variance: float
    pattern: Pattern
    base_loss: float
    losses: PrivacySpec
    price: float
    compensations: np.ndarray
    answer: np.ndarray

    @property
    def compensation_total(self) -> float:
        return math.fsum(self.compensations)
