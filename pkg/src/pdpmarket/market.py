"""The Offer / Quote / Delivery trading loop.

A session sells histogram answers one order at a time. Each order first
gets an offer (the smallest variance the current budgets can support), then
a quote for the buyer's requested variance, then delivery of a perturbed
answer with the ledger debited. Buyers are scripted as a list of requested
variances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union


from .allocation import (GroupedPattern, grouping_allocate, initial_pattern,
                         solve_pattern_sip, uniform_allocate)
from .errors import OwnerExhausted, PatternInfeasible
from .io import fmt
from .mechanisms import (inverse_patterned_utility, make_rng, perturb,
                         utility_laplace, utility_sample)
from .pricing import PriceQuote, quote_at_base
from .types import (Database, MarketConfig, Mechanism, Pattern, PrivacyLedger,
                    PrivacySpec, QueryTransaction)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Rejection:
    k: int
    requested_variance: float
    min_affordable_variance: float


@dataclass(frozen=True, eq=False)
class Offer:
    k: int
    budgets: PrivacySpec
    min_affordable_variance: float
    pattern: Pattern


def resolve_pattern(db: Database, cfg: MarketConfig):
    """The pattern a session trades in: all-ones for Laplace, searched for Sample."""
    if cfg.mechanism is Mechanism.LAPLACE_UNIFORM:
        return Pattern.ones(db.n)
    caps = db.max_losses
    init = initial_pattern(caps, cfg.group_count)
    try:
        return solve_pattern_sip(init, cfg.sensitivity, cfg.eps_grid,
                                 max_loss=float(caps.max()), max_iters=cfg.sip_max_iters)
    except PatternInfeasible as exc:
        logger.warning("%s; trading in the best verified pattern instead", exc)
        return exc.best


class MarketState:
    """Mutable state of one session. Not safe for concurrent writers."""

    def __init__(self, db: Database, cfg: MarketConfig,
                 pattern: Union[Pattern, GroupedPattern, None] = None):
        cfg.check_database(db)
        self.db = db
        self.config = cfg
        self.ledger = PrivacyLedger.from_database(db)
        self.transaction_log: List[QueryTransaction] = []
        self.events: list = []
        self.k = 1
        self.cached_pattern = resolve_pattern(db, cfg) if pattern is None else pattern
        if len(self._pattern()) != db.n:
            raise ValueError("pattern length does not match database")
        self.rng = make_rng(cfg.rng_seed)
        self.pending: Optional[Offer] = None
        self.closed_reason: Optional[str] = None

    def _pattern(self) -> Pattern:
        p = self.cached_pattern
        return p.expand() if isinstance(p, GroupedPattern) else p

    @property
    def exhausted(self) -> bool:
        return bool(self.ledger.exhausted(self.config.exhaustion_fraction).any())


def offer(state: MarketState) -> float:
    """Allocate budgets for the next order and return the minimum affordable variance."""
    cfg = state.config
    if state.exhausted:
        raise OwnerExhausted("an owner's remaining loss is below the exhaustion threshold")
    if cfg.mechanism is Mechanism.LAPLACE_UNIFORM:
        budgets = uniform_allocate(state.ledger)
        v_min = utility_laplace(budgets, cfg.sensitivity)
        pattern = Pattern.ones(state.db.n)
    else:
        budgets = grouping_allocate(state.ledger, state.cached_pattern)
        v_min = utility_sample(budgets, cfg.sensitivity)
        pattern = state._pattern()
    state.pending = Offer(state.k, budgets, v_min, pattern)
    return v_min


def quote(state: MarketState, v: float) -> Union[PriceQuote, Rejection]:
    """Price a request against the open offer; too-small variances are rejected."""
    pending = state.pending
    if pending is None:
        raise RuntimeError("quote requested without an open offer")
    if v < pending.min_affordable_variance:
        return Rejection(pending.k, float(v), pending.min_affordable_variance)
    cfg = state.config
    eps_base = inverse_patterned_utility(pending.pattern, v, cfg.sensitivity,
                                         cfg.mechanism, cfg.root_tol)
    # U is decreasing, so v >= v_min implies eps_base <= the offered maximum;
    # clamp away root-finding slack so losses never exceed the budgets.
    eps_base = min(float(eps_base), pending.budgets.max)
    return quote_at_base(pending.pattern, eps_base, v, state.db, cfg)


def deliver(state: MarketState, accepted: PriceQuote) -> QueryTransaction:
    """Release a perturbed answer, pay owners, and debit the ledger."""
    pending = state.pending
    if pending is None:
        raise RuntimeError("delivery without an open offer")
    cfg = state.config
    losses = accepted.per_owner_loss
    answer = perturb(cfg.mechanism, state.db, losses, cfg.sensitivity, state.rng)
    state.ledger.debit(losses)
    tx = QueryTransaction(
        k=state.k,
        requested_variance=accepted.variance,
        min_affordable_variance=pending.min_affordable_variance,
        pattern=pending.pattern,
        base_loss=accepted.base_loss,
        losses=losses,
        price=accepted.price,
        compensations=accepted.per_owner_compensation,
        answer=answer.counts,
    )
    state.transaction_log.append(tx)
    state.k += 1
    state.pending = None
    return tx


def run_session(db: Database, cfg: MarketConfig, script: Sequence[float],
                pattern: Union[Pattern, GroupedPattern, None] = None) -> MarketState:
    """Process scripted requests in order until the script ends or an owner is exhausted."""
    state = MarketState(db, cfg, pattern)
    for v in script:
        if state.exhausted:
            state.closed_reason = "owner_exhausted"
            break
        if state.pending is None:
            offer(state)
        result = quote(state, v)
        if isinstance(result, Rejection):
            logger.info("order %d rejected: v=%g below v_min=%g", result.k,
                        result.requested_variance, result.min_affordable_variance)
            state.events.append(result)
            continue
        state.events.append(deliver(state, result))
    else:
        state.closed_reason = "script_end"
    return state


TRANSACTION_HEADER = ["k", "requested_v", "min_v", "accepted", "price", "eps_base",
                      "answer_json", "comp_total"]


def transaction_rows(state: MarketState):
    for ev in state.events:
        if isinstance(ev, Rejection):
            yield [ev.k, fmt(ev.requested_variance), fmt(ev.min_affordable_variance),
                   "false", "", "", "", ""]
        else:
            answer = "[" + ",".join(fmt(x) for x in ev.answer) + "]"
            yield [ev.k, fmt(ev.requested_variance), fmt(ev.min_affordable_variance),
                   "true", fmt(ev.price), fmt(ev.base_loss), answer,
                   fmt(ev.compensation_total)]


def ledger_header(state: MarketState):
    return (["id", "max_eps", "remaining", "spent"]
            + [f"loss_{tx.k}" for tx in state.transaction_log])


def ledger_rows(state: MarketState):
    led = state.ledger
    rem = led.remaining
    for i, owner in enumerate(state.db.owners):
        spent = [float(s[i]) for s in led.spent]
        yield ([owner.id, fmt(owner.max_tolerable_loss), fmt(rem[i]), fmt(math.fsum(spent))]
               + [fmt(x) for x in spent])


def summary(state: MarketState) -> dict:
    cfg = state.config
    log = state.transaction_log
    compensation = math.fsum(tx.compensation_total for tx in log)
    rem = state.ledger.remaining / state.ledger.max_losses
    return {
        "mechanism": cfg.mechanism.value,
        "rng_seed": cfg.rng_seed,
        "owners": state.db.n,
        "accepted": len(log),
        "rejected": sum(isinstance(e, Rejection) for e in state.events),
        "closed_reason": state.closed_reason,
        "revenue": math.fsum(tx.price for tx in log),
        "compensation": compensation,
        "broker_profit": cfg.brokerage_rate * compensation,
        "min_remaining_fraction": float(rem.min()),
        "conservation_error": state.ledger.conservation_error(),
    }
