"""Per-query budget allocation.

``uniform_allocate`` hands every owner half of the smallest remaining loss
(the Laplace pairing). The grouping allocator instead fixes a loss pattern
once per database, chosen close to the owners' own caps subject to the
arbitrage-freeness conditions, and scales it to fit under half of what each
owner has left.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidGroupCount, InvalidPattern, OwnerExhausted, PatternInfeasible
from .pricing import _resolve_grid, condition_slacks
from .types import EpsGrid, Pattern, PrivacyLedger, PrivacySpec

logger = logging.getLogger(__name__)

GROUP_FLOOR = 1e-3
FEASIBILITY_TOL = 1e-8
# Constraint margin inside the solver; keeps the returned pattern feasible
# between grid points and on denser verification grids.
SIP_MARGIN = 1e-3
LINE_SCAN_STEPS = 32
BISECT_STEPS = 40


@dataclass(frozen=True, eq=False)
class GroupedPattern:
    """A pattern whose owners share one of ``N`` values.

    ``group_values`` ascend and end in exactly 1; ``owner_to_group[i]`` is
    the group index of owner ``i``.
    """

    group_values: np.ndarray
    group_sizes: np.ndarray
    owner_to_group: np.ndarray

    def __post_init__(self):
        vals = np.array(self.group_values, dtype=float)
        sizes = np.array(self.group_sizes, dtype=np.int64)
        owners = np.array(self.owner_to_group, dtype=np.int64)
        if vals.ndim != 1 or vals.size == 0 or sizes.shape != vals.shape:
            raise InvalidPattern("group values and sizes must be matching vectors")
        if vals[-1] != 1.0 or not vals[0] > 0 or np.any(np.diff(vals) < 0):
            raise InvalidPattern("group values must ascend within (0, 1] and end at 1")
        if np.any(sizes < 1) or sizes.sum() != owners.size:
            raise InvalidPattern("group sizes must be positive and cover every owner")
        if owners.size and (owners.min() < 0 or owners.max() >= vals.size):
            raise InvalidPattern("owner_to_group refers to a missing group")
        if not np.array_equal(np.bincount(owners, minlength=vals.size), sizes):
            raise InvalidPattern("group sizes disagree with owner_to_group")
        for arr in (vals, sizes, owners):
            arr.setflags(write=False)
        object.__setattr__(self, "group_values", vals)
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "owner_to_group", owners)

    def __eq__(self, other):
        return (isinstance(other, GroupedPattern)
                and np.array_equal(self.group_values, other.group_values)
                and np.array_equal(self.group_sizes, other.group_sizes)
                and np.array_equal(self.owner_to_group, other.owner_to_group))

    @property
    def n(self) -> int:
        return self.owner_to_group.size

    def expand(self) -> Pattern:
        return Pattern(self.group_values[self.owner_to_group])

    def with_values(self, values) -> "GroupedPattern":
        return GroupedPattern(values, self.group_sizes, self.owner_to_group)

    def to_dict(self) -> dict:
        return {"group_values": [float(v) for v in self.group_values],
                "group_sizes": [int(s) for s in self.group_sizes],
                "owner_to_group": [int(g) for g in self.owner_to_group]}

    @classmethod
    def from_dict(cls, data: dict) -> "GroupedPattern":
        return cls(data["group_values"], data["group_sizes"], data["owner_to_group"])


def _remaining_of(remaining) -> np.ndarray:
    if isinstance(remaining, PrivacyLedger):
        return remaining.remaining
    return np.asarray(remaining, dtype=float)


def uniform_allocate(remaining) -> PrivacySpec:
    rem = _remaining_of(remaining)
    if np.any(rem <= 0):
        raise OwnerExhausted("an owner has no remaining tolerable loss")
    return PrivacySpec(np.full(rem.size, 0.5 * rem.min()))


def initial_pattern(max_losses: Sequence[float], group_count: int) -> GroupedPattern:
    """Group owners by their normalized caps.

    Owners are sorted by cap and cut into ``group_count`` runs of
    ``n // group_count`` (the last run absorbs the remainder). Each run takes
    its smallest normalized cap; the top run is pinned to 1.
    """
    caps = np.asarray(max_losses, dtype=float)
    n = caps.size
    if not 1 <= group_count <= n:
        raise InvalidGroupCount(f"group count {group_count} must lie in 1..{n}")
    rho = caps / caps.max()
    order = np.argsort(rho, kind="stable")
    step = n // group_count
    sorted_group = np.minimum(np.arange(n) // step, group_count - 1)
    values = np.array([rho[order][sorted_group == g].min() for g in range(group_count)])
    values[-1] = 1.0
    owner_to_group = np.empty(n, dtype=np.int64)
    owner_to_group[order] = sorted_group
    return GroupedPattern(values, np.bincount(sorted_group, minlength=group_count),
                          owner_to_group)


def grouping_allocate(remaining, pattern) -> PrivacySpec:
    """Half of each owner's remaining loss, shaved down to fit the pattern."""
    rem = _remaining_of(remaining)
    if np.any(rem <= 0):
        raise OwnerExhausted("an owner has no remaining tolerable loss")
    rho = pattern.rho if isinstance(pattern, Pattern) else pattern.expand().rho
    if rho.size != rem.size:
        raise ValueError("pattern length does not match ledger")
    initial = 0.5 * rem
    live = rho > 0
    base = min(initial.max(), float(np.min(initial[live] / rho[live])))
    while np.any(base * rho > initial):
        base = np.nextafter(base, 0.0)
    return PrivacySpec(base * rho)


def _constraint_values(values, sizes, eps, sensitivity, margin):
    """Smallest of (elasticity - margin, convexity slack - margin) per point."""
    u, u1, _, slack = condition_slacks(values, sizes, eps, sensitivity)
    elasticity = -eps * u1 / u
    return np.minimum(elasticity, slack) - margin


class _Search:
    """State for one constraint-exchange run over the free group values."""

    def __init__(self, sizes, target, sensitivity, grid, margin, tol, floor):
        self.sizes = sizes
        self.target = target
        self.sensitivity = sensitivity
        self.grid = grid
        self.margin = margin
        self.tol = tol
        self.floor = floor

    def objective(self, x) -> float:
        return float(np.sum(self.sizes * np.abs(x - self.target)))

    def feasible(self, x, eps) -> bool:
        if eps.size == 0:
            return True
        g = _constraint_values(x, self.sizes, eps, self.sensitivity, self.margin)
        return bool(np.all(g >= 0))

    def worst(self, x):
        g = _constraint_values(x, self.sizes, self.grid, self.sensitivity, self.margin)
        g = np.where(np.isnan(g), -np.inf, g)
        i = int(np.argmin(g))
        return float(self.grid[i]), float(g[i])

    def full_feasible(self, x) -> bool:
        return self.worst(x)[1] >= -self.tol

    def line_move(self, x, y, ok):
        """Point nearest ``y`` on the segment from feasible ``x`` that passes ``ok``."""
        if ok(y):
            return y
        ts = 1.0 - np.arange(1, LINE_SCAN_STEPS + 1) / LINE_SCAN_STEPS
        good, bad = 0.0, 1.0
        for t in ts[:-1]:
            if ok(x + t * (y - x)):
                good = t
                break
            bad = t
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (good + bad)
            if ok(x + mid * (y - x)):
                good = mid
            else:
                bad = mid
        return x + good * (y - x)

    def descend(self, x, working, sweeps=60):
        """Projected coordinate descent toward the target over the working set."""
        eps = np.array(sorted(working))

        def ok(z):
            return self.feasible(z, eps)

        best = self.objective(x)
        for _ in range(sweeps):
            start = best
            x = self.line_move(x, self.target, ok)
            for j in range(x.size - 1):
                lo = x[j - 1] if j else self.floor
                goal = min(max(self.target[j], lo), x[j + 1])
                if goal == x[j]:
                    continue
                y = x.copy()
                y[j] = goal
                x = self.line_move(x, y, ok)
            best = self.objective(x)
            if best >= start - 1e-14:
                break
        return x


def solve_pattern_sip(init: GroupedPattern, sensitivity: float, eps_grid=None, *,
                      max_loss: Optional[float] = None, max_iters: int = 100,
                      margin: float = SIP_MARGIN, tol: float = FEASIBILITY_TOL,
                      floor: float = GROUP_FLOOR,
                      trace: Optional[List[dict]] = None) -> GroupedPattern:
    """Find group values closest (weighted L1) to ``init`` that keep the price
    curve arbitrage-free.

    The infinite family of constraints (one per base loss) is handled by
    constraint exchange: solve with a finite working set, add the most
    violated grid point, repeat. A certified-feasible incumbent starts at the
    all-ones pattern and only improves, so its objective never increases.
    Each round appends ``{"iteration", "objective", "relaxed_objective",
    "added_eps", "violation"}`` to ``trace`` when given.

    Raises :class:`PatternInfeasible` (carrying the incumbent) if the
    working-set solution still violates the grid after ``max_iters`` rounds.
    """
    grid = _resolve_grid(EpsGrid() if eps_grid is None else eps_grid, max_loss)
    sizes = init.group_sizes.astype(float)
    target = np.clip(init.group_values, floor, 1.0)
    target[-1] = 1.0
    search = _Search(sizes, target, sensitivity, grid, margin, tol, floor)

    incumbent = np.ones_like(target)
    working: list = []
    for it in range(1, max_iters + 1):
        cand = search.descend(incumbent.copy(), working)
        at, g = search.worst(cand)
        converged = g >= -tol
        if converged:
            if search.objective(cand) <= search.objective(incumbent):
                incumbent = cand
        else:
            working.append(at)
            pulled = search.line_move(incumbent, cand, search.full_feasible)
            if search.objective(pulled) < search.objective(incumbent):
                incumbent = pulled
        if trace is not None:
            trace.append({"iteration": it, "objective": search.objective(incumbent),
                          "relaxed_objective": search.objective(cand),
                          "added_eps": None if converged else at, "violation": g})
        if converged:
            logger.debug("pattern search converged after %d rounds", it)
            return init.with_values(_tidy(incumbent))
    raise PatternInfeasible(
        f"pattern search did not converge in {max_iters} rounds",
        best=init.with_values(_tidy(incumbent)))


def _tidy(x) -> np.ndarray:
    out = np.maximum.accumulate(np.asarray(x, dtype=float))
    out[-1] = 1.0
    return out


def pattern_cache_key(max_losses, group_count: int, sensitivity: float,
                      grid: EpsGrid) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(max_losses, dtype="<f8").tobytes())
    h.update(repr((int(group_count), float(sensitivity), grid.lo, grid.max_factor,
                   grid.count, SIP_MARGIN, GROUP_FLOOR)).encode())
    return h.hexdigest()


def save_pattern(path, pattern: GroupedPattern, key: str) -> None:
    from .io import dumps_json
    data = dict(pattern.to_dict(), config_hash=key)
    Path(path).write_text(dumps_json(data) + "\n")


def load_pattern(path, key: Optional[str] = None) -> Optional[GroupedPattern]:
    """Read a cached pattern; ``None`` if missing or built for another setup."""
    p = Path(path)
    if not p.exists():
        return None
    data = json.loads(p.read_text())
    if key is not None and data.get("config_hash") != key:
        return None
    return GroupedPattern.from_dict(data)
