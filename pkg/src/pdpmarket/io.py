"""File formats: owner roster CSV, key-value config, variance scripts, and
17-significant-digit serialization for outputs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import List, Union

import numpy as np

from .errors import InputError
from .types import Database, EpsGrid, MarketConfig, Mechanism, Owner, Pattern

ROSTER_HEADER = ["id", "location", "max_eps", "comp_rate"]


def fmt(x: float) -> str:
    """Render a float with 17 significant digits (always round-trips)."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def dumps_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with floats written by :func:`fmt` (NaN/inf become null)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps_json(v, indent, _level + 1) for v in seq) + "]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    return json.dumps(obj)


def _number(text: str, path, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise InputError(f"{what}: expected a number, got {text!r}", path, line) from None


def _integer(text: str, path, line: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InputError(f"{what}: expected an integer, got {text!r}", path, line) from None


def load_roster(path, cell_count: int) -> Database:
    """Read ``id,location,max_eps,comp_rate`` rows into a :class:`Database`."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot open roster: {exc.strerror}", path) from None
    owners = []
    seen = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ROSTER_HEADER:
            raise InputError(f"header must be {','.join(ROSTER_HEADER)}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise InputError(f"expected 4 fields, got {len(row)}", path, line)
            oid = row[0].strip()
            if oid in seen:
                raise InputError(f"duplicate owner id {oid!r}", path, line)
            seen.add(oid)
            location = _integer(row[1].strip(), path, line, "location")
            if not 0 <= location < cell_count:
                raise InputError(f"location {location} outside 0..{cell_count - 1}", path, line)
            try:
                owners.append(Owner(oid, location,
                                    _number(row[2].strip(), path, line, "max_eps"),
                                    _number(row[3].strip(), path, line, "comp_rate")))
            except ValueError as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(str(exc), path, line) from None
    try:
        return Database(tuple(owners), cell_count)
    except ValueError as exc:
        raise InputError(str(exc), path) from None


def _read_pairs(path):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot open config: {exc.strerror}", path) from None
    pairs = {}
    for num, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise InputError("expected 'key = value'", path, num)
        key, value = (s.strip() for s in text.split("=", 1))
        if not key or not value:
            raise InputError("expected 'key = value'", path, num)
        if key in pairs:
            raise InputError(f"duplicate key {key!r}", path, num)
        pairs[key] = (value, num)
    return pairs


CONFIG_KEYS = {
    "cell_count", "brokerage_rate", "sensitivity", "group_count", "mechanism",
    "exhaustion_fraction", "rng_seed", "eps_grid_min", "eps_grid_max_factor",
    "eps_grid_points", "root_tol", "sip_max_iters",
}


def load_config(path) -> MarketConfig:
    """Parse a ``key = value`` config file; ``#`` starts a comment."""
    pairs = _read_pairs(path)
    for key, (_, num) in pairs.items():
        if key not in CONFIG_KEYS:
            raise InputError(f"unknown key {key!r}", path, num)
    if "cell_count" not in pairs:
        raise InputError("missing required key 'cell_count'", path)

    def num(key, default, kind=float):
        if key not in pairs:
            return default
        value, line = pairs[key]
        return (_integer if kind is int else _number)(value, path, line, key)

    kwargs = {
        "cell_count": num("cell_count", None, int),
        "brokerage_rate": num("brokerage_rate", 0.0),
        "sensitivity": num("sensitivity", 2.0),
        "group_count": num("group_count", 4, int),
        "exhaustion_fraction": num("exhaustion_fraction", 1e-6),
        "rng_seed": num("rng_seed", 0, int),
        "root_tol": num("root_tol", 1e-10),
        "sip_max_iters": num("sip_max_iters", 100, int),
    }
    if "mechanism" in pairs:
        value, line = pairs["mechanism"]
        try:
            kwargs["mechanism"] = Mechanism.parse(value)
        except ValueError as exc:
            raise InputError(str(exc), path, line) from None
    try:
        kwargs["eps_grid"] = EpsGrid(num("eps_grid_min", 1e-3),
                                     num("eps_grid_max_factor", 10.0),
                                     num("eps_grid_points", 512, int))
        cfg = MarketConfig(**kwargs)
    except ValueError as exc:
        raise InputError(str(exc), path) from None
    if cfg.cell_count < 1:
        raise InputError("cell_count must be positive", path, pairs["cell_count"][1])
    return cfg


def load_script(path) -> List[float]:
    """Read requested variances, one per row; an optional ``v`` header is allowed."""
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise InputError(f"cannot open query script: {exc.strerror}", path) from None
    out = []
    with fh:
        reader = csv.reader(fh)
        for row in reader:
            line = reader.line_num
            cells = [c.strip() for c in row if c.strip()]
            if not cells:
                continue
            if line == 1 and cells == ["v"]:
                continue
            if len(cells) != 1:
                raise InputError("expected one variance per row", path, line)
            v = _number(cells[0], path, line, "v")
            if not v > 0 or not math.isfinite(v):
                raise InputError(f"variance must be positive and finite, got {v!r}",
                                 path, line)
            out.append(v)
    return out


def load_pattern_file(path) -> Union[Pattern, "GroupedPattern"]:
    """Read a pattern JSON: either ``{"rho": [...]}`` or a grouped-pattern sidecar."""
    from .allocation import GroupedPattern
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot open pattern: {exc.strerror}", path) from None
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    try:
        if "rho" in data:
            return Pattern(data["rho"])
        return GroupedPattern.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"not a pattern: {exc}", path) from None


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
