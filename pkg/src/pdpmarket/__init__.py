"""Trading histogram answers over location data with bounded personalized
privacy loss and arbitrage-free prices."""

from .allocation import (GroupedPattern, grouping_allocate, initial_pattern,
                         solve_pattern_sip, uniform_allocate)
from .errors import (InputError, InvalidBudget, InvalidGroupCount, InvalidPattern,
                     LedgerUnderflow, MarketError, NonInvertibleUtility, OwnerExhausted,
                     PatternInfeasible, VarianceUnachievable)
from .market import MarketState, Rejection, deliver, offer, quote, run_session
from .mechanisms import (inverse_patterned_utility, laplace_mechanism, make_rng,
                         patterned_utility, sample_mechanism, true_histogram,
                         utility_laplace, utility_sample)
from .pricing import PriceQuote, arbitrage_oracle, check_theorem3, price, pricing_function
from .types import (Database, EpsGrid, MarketConfig, Mechanism, Owner, Pattern,
                    PrivacyLedger, PrivacySpec, QueryTransaction, make_pattern)

__version__ = "0.1.0"
