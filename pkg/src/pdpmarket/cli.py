"""Command-line entry point.

Exit codes: 0 success (or all checks pass), 1 a verification check failed,
2 bad input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import market
from .allocation import GroupedPattern, load_pattern, pattern_cache_key, save_pattern
from .errors import InputError, MarketError, VarianceUnachievable
from .io import dumps_json, fmt, load_config, load_pattern_file, load_roster, load_script, write_csv
from .mechanisms import inverse_patterned_utility, patterned_utility
from .pricing import arbitrage_oracle, check_theorem3, pricing_function
from .types import Mechanism, Pattern

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
REPORT_LIMIT = 20


@dataclass(frozen=True)
class RunManifest:
    owners_path: Path
    config_path: Path
    script_path: Path
    output_dir: Path
    seed: Optional[int] = None
    pattern_path: Optional[Path] = None

    def check(self) -> None:
        for label, p in (("owners", self.owners_path), ("config", self.config_path),
                         ("queries", self.script_path), ("pattern", self.pattern_path)):
            if p is not None and not Path(p).is_file():
                raise InputError(f"{label} file not found", p)


def _load(owners, config, seed=None):
    cfg = load_config(config)
    if seed is not None:
        cfg = replace(cfg, rng_seed=seed)
    db = load_roster(owners, cfg.cell_count)
    try:
        cfg.check_database(db)
    except ValueError as exc:
        raise InputError(str(exc), config) from None
    return db, cfg


def _as_pattern(p) -> Pattern:
    return p.expand() if isinstance(p, GroupedPattern) else p


def _pattern_dict(p, key=None) -> dict:
    if isinstance(p, GroupedPattern):
        return dict(p.to_dict(), config_hash=key)
    return {"rho": [float(x) for x in p.rho]}


def _session_pattern(db, cfg, pattern_path):
    if pattern_path is not None:
        p = load_pattern_file(pattern_path)
        if len(_as_pattern(p)) != db.n:
            raise InputError("pattern length does not match roster", pattern_path)
        logger.warning("trading in a supplied pattern; arbitrage-freeness is not enforced")
        return p
    return market.resolve_pattern(db, cfg)


def cmd_run(manifest: RunManifest) -> int:
    manifest.check()
    db, cfg = _load(manifest.owners_path, manifest.config_path, manifest.seed)
    script = load_script(manifest.script_path)
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    key = None
    pattern = None
    if manifest.pattern_path is not None:
        pattern = _session_pattern(db, cfg, manifest.pattern_path)
    elif cfg.mechanism is Mechanism.SAMPLE_GROUPING:
        key = pattern_cache_key(db.max_losses, cfg.group_count, cfg.sensitivity, cfg.eps_grid)
        pattern = load_pattern(out / "pattern.json", key)
        if pattern is not None and pattern.n != db.n:
            pattern = None
        if pattern is not None:
            logger.info("reusing cached pattern from %s", out / "pattern.json")
    state = market.run_session(db, cfg, script, pattern)

    if isinstance(state.cached_pattern, GroupedPattern) and key is not None:
        save_pattern(out / "pattern.json", state.cached_pattern, key)
    else:
        (out / "pattern.json").write_text(
            dumps_json(_pattern_dict(state.cached_pattern, key)) + "\n")
    write_csv(out / "transactions.csv", market.TRANSACTION_HEADER,
              market.transaction_rows(state))
    write_csv(out / "ledger.csv", market.ledger_header(state), market.ledger_rows(state))
    (out / "summary.json").write_text(dumps_json(market.summary(state)) + "\n")
    return EXIT_OK


def _variance_range(pattern: Pattern, cfg, max_loss: float):
    eps = cfg.eps_grid.points(max_loss)
    top = patterned_utility(pattern, eps[0], cfg.sensitivity, cfg.mechanism)
    bottom = patterned_utility(pattern, eps[-1], cfg.sensitivity, cfg.mechanism)
    # pair bundles reach v/2 below the grid's smallest variance
    return 2.0 * bottom, top


def cmd_check_arbitrage(owners, config, pattern_path=None, points: int = 200,
                        m_max: int = 8, stream=None) -> int:
    stream = stream or sys.stdout
    db, cfg = _load(owners, config)
    pattern = _as_pattern(_session_pattern(db, cfg, pattern_path))
    max_loss = float(db.max_losses.max())

    # the Laplace utility is the all-ones Sample utility with eps rescaled by
    # min(rho); the conditions are invariant under that rescaling
    checked = Pattern.ones(db.n) if cfg.mechanism is Mechanism.LAPLACE_UNIFORM else pattern
    conds = check_theorem3(checked, cfg.sensitivity, cfg.eps_grid, max_loss=max_loss)
    lo, hi = _variance_range(pattern, cfg, max_loss)
    curve = pricing_function(pattern, db.compensation_rates, cfg.brokerage_rate,
                             cfg.sensitivity, cfg.mechanism)
    arb = arbitrage_oracle(curve, np.geomspace(lo, hi, points), m_max)
    ok = conds.holds and arb.free
    report = {"pass": ok, "mechanism": cfg.mechanism.value,
              "pattern": _pattern_dict(pattern),
              "conditions": conds.to_dict(), "arbitrage": arb.to_dict(limit=REPORT_LIMIT)}
    report["conditions"]["violations"] = report["conditions"]["violations"][:REPORT_LIMIT]
    report["conditions"]["violation_count"] = len(conds.violations)
    stream.write(dumps_json(report) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_price_curve(owners, config, pattern_path=None, v_min=None, v_max=None,
                    points: int = 100, stream=None) -> int:
    stream = stream or sys.stdout
    db, cfg = _load(owners, config)
    pattern = _as_pattern(_session_pattern(db, cfg, pattern_path))
    max_loss = float(db.max_losses.max())
    lo, hi = _variance_range(pattern, cfg, max_loss)
    v_min = lo if v_min is None else v_min
    v_max = hi if v_max is None else v_max
    if not 0 < v_min <= v_max or points < 1:
        raise InputError("need 0 < v_min <= v_max and points >= 1")

    opening = market.MarketState(db, cfg, pattern)
    v_open = market.offer(opening)
    weight = (1.0 + cfg.brokerage_rate) * float(np.dot(db.compensation_rates, pattern.rho))
    stream.write("v,eps_base,price,achievable,affordable\n")
    for v in np.geomspace(v_min, v_max, points):
        try:
            eps = inverse_patterned_utility(pattern, v, cfg.sensitivity, cfg.mechanism,
                                            cfg.root_tol)
            row = [fmt(v), fmt(eps), fmt(weight * eps), "true"]
        except VarianceUnachievable:
            row = [fmt(v), "", "", "false"]
        row.append("true" if v >= v_open else "false")
        stream.write(",".join(row) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdpmarket",
        description="Simulate a location-data market with personalized privacy budgets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--owners", required=True, type=Path, help="owner roster CSV")
        p.add_argument("--config", required=True, type=Path, help="key = value config")
        p.add_argument("--pattern", type=Path,
                       help="pattern JSON to trade in instead of the computed one")

    run = sub.add_parser("run", help="run a scripted trading session")
    common(run)
    run.add_argument("--queries", required=True, type=Path, help="CSV of requested variances")
    run.add_argument("--seed", type=int, help="overrides rng_seed from the config")
    run.add_argument("--out", required=True, type=Path, help="output directory")

    chk = sub.add_parser("check-arbitrage", help="verify a pattern's price curve")
    common(chk)
    chk.add_argument("--points", type=int, default=200)
    chk.add_argument("--m-max", type=int, default=8)

    curve = sub.add_parser("price-curve", help="tabulate variance, base loss and price")
    common(curve)
    curve.add_argument("--v-min", type=float)
    curve.add_argument("--v-max", type=float)
    curve.add_argument("--points", type=int, default=100)
    curve.add_argument("--out", type=Path, help="write CSV here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(RunManifest(args.owners, args.config, args.queries, args.out,
                                       args.seed, args.pattern))
        if args.command == "check-arbitrage":
            return cmd_check_arbitrage(args.owners, args.config, args.pattern,
                                       args.points, args.m_max)
        if args.out is not None:
            with open(args.out, "w") as fh:
                return cmd_price_curve(args.owners, args.config, args.pattern,
                                       args.v_min, args.v_max, args.points, fh)
        return cmd_price_curve(args.owners, args.config, args.pattern,
                               args.v_min, args.v_max, args.points)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MarketError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
